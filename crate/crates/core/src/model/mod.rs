//! Trainable sequence encoder with three read-out regimes.
//!
//! One trunk (token + position embeddings, causal self-attention blocks,
//! feed-forward, layer norm) feeds
//!
//! * a tied autoregressive head: next-level logits are inner products with
//!   the level's slice of the token-embedding table,
//! * untied parallel heads: one linear map per level from the final state,
//! * the final hidden state itself, consumed by similarity retrieval.
//!
//! Everything is double-precision-friendly and hand-differentiated; see
//! [`gradcheck`] for the finite-difference verification.

mod backward;
mod forward;
pub mod gradcheck;
mod train;

pub use forward::{encode, encode_all, ar_logits, ar_logits_from_hidden, parallel_logits, Session};
pub use gradcheck::{grad_check, grad_check_against, GradCheckReport};
pub use train::{
    adam_step, batch_loss, loss_and_grads, train_step, AdamState, Hyper, Objective, TrainBatch,
    TrainExample, Trainer,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::stream;
use crate::scalar::Scalar;
use crate::simgr::AggregatorKind;
use crate::tokenizer::SemanticIdTable;

/// Maps (level, level-local token) pairs onto one flat embedding row space,
/// with a single begin-of-context special token at the end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    level_sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl VocabLayout {
    pub fn new(level_sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(level_sizes.len());
        let mut acc = 0;
        for &s in level_sizes {
            offsets.push(acc);
            acc += s;
        }
        VocabLayout {
            level_sizes: level_sizes.to_vec(),
            offsets,
        }
    }

    pub fn depth(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.level_sizes[level]
    }

    pub fn level_offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    /// Number of real tokens (all levels, excluding the special).
    pub fn token_count(&self) -> usize {
        self.offsets.last().unwrap_or(&0) + self.level_sizes.last().unwrap_or(&0)
    }

    /// Row index of the begin-of-context token.
    pub fn bos(&self) -> usize {
        self.token_count()
    }

    /// Total embedding rows including the special token.
    pub fn rows(&self) -> usize {
        self.token_count() + 1
    }

    pub fn global(&self, level: usize, token: u32) -> usize {
        debug_assert!((token as usize) < self.level_sizes[level]);
        self.offsets[level] + token as usize
    }

    /// Flattens an item history into global token ids.
    pub fn serialize_history(&self, items: &[usize], table: &SemanticIdTable) -> Vec<u32> {
        let mut out = Vec::with_capacity(items.len() * self.depth());
        for &item in items {
            for (level, &t) in table.sequence(item).iter().enumerate() {
                out.push(self.global(level, t) as u32);
            }
        }
        out
    }
}

/// Architecture and sizing of the sequence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding / hidden width.
    pub dim: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Encoder blocks. 0 bypasses the trunk entirely (the hidden state is
    /// the raw embedding sum), which keeps a near-linear model around for
    /// gradient-check baselines.
    pub blocks: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ff_mult: usize,
    /// Per-level vocabulary sizes, dedup level included.
    pub level_vocab_sizes: Vec<usize>,
    /// Maximum user-history tokens (excluding the begin-of-context token).
    pub context_len: usize,
    /// Aggregation operator for similarity retrieval.
    pub aggregator: AggregatorKind,
    /// Whether the dedup token participates in item aggregation.
    pub agg_include_dedup: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ff_mult == 0 || self.context_len == 0 {
            return Err(Error::invalid("model sizes must be >= 1"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.level_vocab_sizes.is_empty() || self.level_vocab_sizes.contains(&0) {
            return Err(Error::invalid("level vocabularies must be non-empty"));
        }
        Ok(())
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout::new(&self.level_vocab_sizes)
    }

    pub fn depth(&self) -> usize {
        self.level_vocab_sizes.len()
    }

    /// Positions the model can address: BOS + history + decode prefix.
    pub fn max_positions(&self) -> usize {
        1 + self.context_len + self.depth()
    }

    /// Token slots aggregated per item.
    pub fn agg_levels(&self) -> usize {
        if self.agg_include_dedup {
            self.depth()
        } else {
            self.depth() - 1
        }
    }
}

/// Layer-norm scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LnParams<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

impl<F: Scalar> LnParams<F> {
    fn ones(dim: usize) -> Self {
        LnParams {
            gamma: vec![F::one(); dim],
            beta: vec![F::zero(); dim],
        }
    }

    fn zeros(dim: usize) -> Self {
        LnParams {
            gamma: vec![F::zero(); dim],
            beta: vec![F::zero(); dim],
        }
    }
}

/// One encoder block: pre-norm attention and feed-forward sublayers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1: LnParams<F>,
    pub wq: Mat<F>,
    pub wk: Mat<F>,
    pub wv: Mat<F>,
    pub wo: Mat<F>,
    pub ln2: LnParams<F>,
    pub w1: Mat<F>,
    pub b1: Vec<F>,
    pub w2: Mat<F>,
    pub b2: Vec<F>,
}

/// Learned weights of the item aggregation operator (empty for mean
/// pooling). Shapes depend on the [`AggregatorKind`] and the number of
/// aggregated token slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AggParams<F> {
    pub mats: Vec<Mat<F>>,
}

/// Full parameter set: one trunk, three read-outs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub cfg: ModelConfig,
    /// `(token_count + 1) x dim`; the last row is the begin-of-context
    /// token. Level slices double as the tied autoregressive output head.
    pub tok_emb: Mat<F>,
    pub pos_emb: Mat<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub ln_f: LnParams<F>,
    /// Untied per-level heads, `dim x |V_l|` each.
    pub heads: Vec<Mat<F>>,
    pub agg: AggParams<F>,
}

fn normal_mat<F: Scalar>(rng: &mut impl rand::Rng, rows: usize, cols: usize, std: f64) -> Mat<F> {
    use rand_distr::{Distribution, StandardNormal};
    let mut m = Mat::zeros(rows, cols);
    for v in m.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = F::of(z * std);
    }
    m
}

impl<F: Scalar> ModelParams<F> {
    /// Seeded initialization. Embeddings and trunk weights are small
    /// normals; parallel heads start at zero (uniform marginals); learned
    /// aggregators start as exact mean pooling.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let d = cfg.dim;
        let std = 0.02;
        let mut rng = stream(cfg.seed, "model-init", 0);

        let tok_emb = normal_mat(&mut rng, layout.rows(), d, std);
        let pos_emb = normal_mat(&mut rng, cfg.max_positions(), d, std);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln1: LnParams::ones(d),
                wq: normal_mat(&mut rng, d, d, std),
                wk: normal_mat(&mut rng, d, d, std),
                wv: normal_mat(&mut rng, d, d, std),
                wo: normal_mat(&mut rng, d, d, std),
                ln2: LnParams::ones(d),
                w1: normal_mat(&mut rng, d, d * cfg.ff_mult, std),
                b1: vec![F::zero(); d * cfg.ff_mult],
                w2: normal_mat(&mut rng, d * cfg.ff_mult, d, std),
                b2: vec![F::zero(); d],
            })
            .collect();
        let heads = cfg
            .level_vocab_sizes
            .iter()
            .map(|&s| Mat::zeros(d, s))
            .collect();
        let agg = AggParams::mean_equivalent(&cfg, &mut rng);

        Ok(ModelParams {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LnParams::ones(d),
            heads,
            agg,
        })
    }

    pub fn layout(&self) -> VocabLayout {
        self.cfg.layout()
    }

    /// Same shapes, all values zero. Used for gradients and optimizer state.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tok_emb.fill(F::zero());
        z.pos_emb.fill(F::zero());
        for b in &mut z.blocks {
            b.ln1 = LnParams::zeros(self.cfg.dim);
            b.ln2 = LnParams::zeros(self.cfg.dim);
            b.wq.fill(F::zero());
            b.wk.fill(F::zero());
            b.wv.fill(F::zero());
            b.wo.fill(F::zero());
            b.w1.fill(F::zero());
            b.b1.fill(F::zero());
            b.w2.fill(F::zero());
            b.b2.fill(F::zero());
        }
        z.ln_f = LnParams::zeros(self.cfg.dim);
        for h in &mut z.heads {
            h.fill(F::zero());
        }
        for m in &mut z.agg.mats {
            m.fill(F::zero());
        }
        z
    }

    /// Named views of every parameter block, in a fixed order shared by
    /// the optimizer, the checkpoint format and the gradient checker.
    pub fn named_blocks(&self) -> Vec<(String, &[F], Vec<usize>)> {
        let mut out: Vec<(String, &[F], Vec<usize>)> = Vec::new();
        let d = self.cfg.dim;
        out.push((
            "tok_emb".into(),
            self.tok_emb.data(),
            vec![self.tok_emb.rows(), d],
        ));
        out.push((
            "pos_emb".into(),
            self.pos_emb.data(),
            vec![self.pos_emb.rows(), d],
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blk{i}.ln1.gamma"), &b.ln1.gamma, vec![d]));
            out.push((format!("blk{i}.ln1.beta"), &b.ln1.beta, vec![d]));
            out.push((format!("blk{i}.attn.wq"), b.wq.data(), vec![d, d]));
            out.push((format!("blk{i}.attn.wk"), b.wk.data(), vec![d, d]));
            out.push((format!("blk{i}.attn.wv"), b.wv.data(), vec![d, d]));
            out.push((format!("blk{i}.attn.wo"), b.wo.data(), vec![d, d]));
            out.push((format!("blk{i}.ln2.gamma"), &b.ln2.gamma, vec![d]));
            out.push((format!("blk{i}.ln2.beta"), &b.ln2.beta, vec![d]));
            out.push((
                format!("blk{i}.ff.w1"),
                b.w1.data(),
                vec![d, d * self.cfg.ff_mult],
            ));
            out.push((format!("blk{i}.ff.b1"), &b.b1, vec![d * self.cfg.ff_mult]));
            out.push((
                format!("blk{i}.ff.w2"),
                b.w2.data(),
                vec![d * self.cfg.ff_mult, d],
            ));
            out.push((format!("blk{i}.ff.b2"), &b.b2, vec![d]));
        }
        out.push(("ln_f.gamma".into(), &self.ln_f.gamma, vec![d]));
        out.push(("ln_f.beta".into(), &self.ln_f.beta, vec![d]));
        for (l, h) in self.heads.iter().enumerate() {
            out.push((format!("head{l}"), h.data(), vec![d, h.cols()]));
        }
        for (i, m) in self.agg.mats.iter().enumerate() {
            out.push((
                format!("agg.{}", self.cfg.aggregator.mat_name(i)),
                m.data(),
                vec![m.rows(), m.cols()],
            ));
        }
        out
    }

    /// Mutable twin of [`Self::named_blocks`], same order.
    pub fn named_blocks_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb.data_mut()));
        out.push(("pos_emb".into(), self.pos_emb.data_mut()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blk{i}.ln1.gamma"), b.ln1.gamma.as_mut_slice()));
            out.push((format!("blk{i}.ln1.beta"), b.ln1.beta.as_mut_slice()));
            out.push((format!("blk{i}.attn.wq"), b.wq.data_mut()));
            out.push((format!("blk{i}.attn.wk"), b.wk.data_mut()));
            out.push((format!("blk{i}.attn.wv"), b.wv.data_mut()));
            out.push((format!("blk{i}.attn.wo"), b.wo.data_mut()));
            out.push((format!("blk{i}.ln2.gamma"), b.ln2.gamma.as_mut_slice()));
            out.push((format!("blk{i}.ln2.beta"), b.ln2.beta.as_mut_slice()));
            out.push((format!("blk{i}.ff.w1"), b.w1.data_mut()));
            out.push((format!("blk{i}.ff.b1"), b.b1.as_mut_slice()));
            out.push((format!("blk{i}.ff.w2"), b.w2.data_mut()));
            out.push((format!("blk{i}.ff.b2"), b.b2.as_mut_slice()));
        }
        out.push(("ln_f.gamma".into(), self.ln_f.gamma.as_mut_slice()));
        out.push(("ln_f.beta".into(), self.ln_f.beta.as_mut_slice()));
        for (l, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head{l}"), h.data_mut()));
        }
        let agg_kind = self.cfg.aggregator;
        for (i, m) in self.agg.mats.iter_mut().enumerate() {
            out.push((format!("agg.{}", agg_kind.mat_name(i)), m.data_mut()));
        }
        out
    }

    /// The tied AR output slice for one level: rows of the embedding table.
    pub fn level_embedding_rows(&self, level: usize) -> (usize, usize) {
        let layout = self.layout();
        (layout.level_offset(level), layout.level_size(level))
    }
}

impl<F: Scalar> AggParams<F> {
    /// Initializes a learned aggregator so its initial output equals mean
    /// pooling, which anchors all variants to the same starting behavior.
    fn mean_equivalent(cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        let d = cfg.dim;
        let l = cfg.agg_levels();
        let inv_l = F::of(1.0 / l as f64);
        let mats = match cfg.aggregator {
            AggregatorKind::Mean => Vec::new(),
            AggregatorKind::ConcatProject => {
                // vertical stack of I/L
                let mut w = Mat::zeros(l * d, d);
                for slot in 0..l {
                    for j in 0..d {
                        *w.at_mut(slot * d + j, j) = inv_l;
                    }
                }
                vec![w]
            }
            AggregatorKind::ProjectPool => (0..l)
                .map(|_| {
                    let mut w = Mat::zeros(d, d);
                    for j in 0..d {
                        *w.at_mut(j, j) = F::one();
                    }
                    w
                })
                .collect(),
            AggregatorKind::Gating => vec![Mat::zeros(1, l)],
            AggregatorKind::CrossAttention => vec![Mat::zeros(1, d)],
        };
        let _ = rng;
        AggParams { mats }
    }
}
