//! Training: teacher-forced autoregressive, parallel-marginal, and
//! similarity-retrieval objectives over the shared trunk, optimized with
//! decoupled weight decay and a warmup + cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::mat::{dot, Mat};
use crate::scalar::Scalar;
use crate::simgr::{self, SimGrConfig};
use crate::tokenizer::SemanticIdTable;

use super::backward::backward;
use super::forward::{forward_trace, Trace};
use super::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Token-level cross-entropy under the chain rule, teacher forced.
    Ar,
    /// Sum of per-level marginal cross-entropies from one forward pass.
    Parallel,
    /// Full-softmax item cross-entropy against aggregated item embeddings.
    SimGr,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Ar => "ar",
            Objective::Parallel => "parallel",
            Objective::SimGr => "simgr",
        }
    }
}

/// One supervised example: a serialized history and the next item.
#[derive(Debug, Clone)]
pub struct TrainExample {
    /// Global token ids of the user history (begin-of-context excluded).
    pub context: Vec<u32>,
    /// The next item's semantic-ID tokens, level-local.
    pub target_tokens: Vec<u32>,
    /// The next item's index, for the retrieval objective.
    pub target_item: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_frac: f64,
    pub total_steps: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.01,
            total_steps: 1000,
        }
    }
}

impl Hyper {
    /// Learning rate at 1-based step `t`: linear warmup, then cosine decay.
    pub fn lr_at(&self, t: u64) -> f64 {
        let warmup = ((self.total_steps as f64 * self.warmup_frac).ceil() as u64).max(1);
        if t <= warmup {
            return self.lr * t as f64 / warmup as f64;
        }
        let total = self.total_steps.max(t);
        let progress = (t - warmup) as f64 / (total - warmup).max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub t: u64,
    m: ModelParams<F>,
    v: ModelParams<F>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        AdamState {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Stable log-softmax cross-entropy. Returns the loss and writes
/// `softmax - onehot` into `logits`.
fn cross_entropy_in_place<F: Scalar>(logits: &mut [F], target: usize) -> F {
    let m = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in logits.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    let loss = -(logits[target] / z).ln();
    for v in logits.iter_mut() {
        *v /= z;
    }
    logits[target] -= F::one();
    loss
}

fn validate_example<F: Scalar>(
    params: &ModelParams<F>,
    ex: &TrainExample,
    idx: usize,
) -> Result<()> {
    if ex.context.is_empty() {
        return Err(Error::invalid(format!("example {idx}: empty context")));
    }
    if ex.context.len() > params.cfg.context_len {
        return Err(Error::invalid(format!(
            "example {idx}: context exceeds {} tokens",
            params.cfg.context_len
        )));
    }
    if ex.target_tokens.len() != params.cfg.depth() {
        return Err(Error::invalid(format!(
            "example {idx}: target has {} tokens, expected {}",
            ex.target_tokens.len(),
            params.cfg.depth()
        )));
    }
    for (l, &t) in ex.target_tokens.iter().enumerate() {
        if t as usize >= params.cfg.level_vocab_sizes[l] {
            return Err(Error::invalid(format!(
                "example {idx}: target token {t} invalid at level {l}"
            )));
        }
    }
    Ok(())
}

struct ExampleGrad<F> {
    trace: Trace<F>,
    dhidden: Mat<F>,
    loss: F,
}

/// Per-example losses and parameter gradients for one batch.
///
/// The loss is the mean over examples of the per-example negative
/// log-likelihood (summed over levels for the token objectives).
pub fn loss_and_grads<F: Scalar>(
    params: &ModelParams<F>,
    batch: &TrainBatch,
    objective: Objective,
    simgr_cfg: &SimGrConfig,
    table: &SemanticIdTable,
    items_override: Option<&Mat<F>>,
) -> Result<(F, ModelParams<F>, Vec<F>)> {
    if batch.examples.is_empty() {
        return Err(Error::invalid("batch must be non-empty"));
    }
    let mut grads = params.zeros_like();
    let n = batch.examples.len();
    let w = F::of(1.0 / n as f64);
    let layout = params.layout();
    let depth = params.cfg.depth();
    let d = params.cfg.dim;

    let owned_items;
    let items: Option<&Mat<F>> = match objective {
        Objective::SimGr => match items_override {
            Some(m) => Some(m),
            None => {
                owned_items = simgr::materialize_item_matrix(params, table)?;
                Some(&owned_items)
            }
        },
        _ => None,
    };
    let mut d_items = items.map(|m| Mat::zeros(m.rows(), m.cols()));

    let mut per_example = Vec::with_capacity(n);
    let mut example_grads: Vec<ExampleGrad<F>> = Vec::with_capacity(n);

    for (idx, ex) in batch.examples.iter().enumerate() {
        validate_example(params, ex, idx)?;
        let mut tokens = Vec::with_capacity(1 + ex.context.len() + depth);
        tokens.push(layout.bos());
        tokens.extend(ex.context.iter().map(|&t| t as usize));
        let ctx_last = tokens.len() - 1;

        let loss;
        let trace;
        let mut dhidden;
        match objective {
            Objective::Ar => {
                for (l, &t) in ex.target_tokens.iter().take(depth - 1).enumerate() {
                    tokens.push(layout.global(l, t));
                }
                trace = forward_trace(params, &tokens)?;
                dhidden = Mat::zeros(tokens.len(), d);
                let mut total = F::zero();
                for l in 0..depth {
                    let pos = ctx_last + l;
                    let h = trace.hidden.row(pos).to_vec();
                    let (offset, size) = params.level_embedding_rows(l);
                    let mut logits: Vec<F> = (0..size)
                        .map(|t| dot(&h, params.tok_emb.row(offset + t)))
                        .collect();
                    total += cross_entropy_in_place(&mut logits, ex.target_tokens[l] as usize);
                    // tied head: gradient flows to both the hidden state and
                    // the embedding rows
                    let dh = dhidden.row_mut(pos);
                    for (t, &dl) in logits.iter().enumerate() {
                        let dl = dl * w;
                        let erow = params.tok_emb.row(offset + t);
                        for i in 0..d {
                            dh[i] += dl * erow[i];
                        }
                        let gr = grads.tok_emb.row_mut(offset + t);
                        for i in 0..d {
                            gr[i] += dl * h[i];
                        }
                    }
                }
                loss = total;
            }
            Objective::Parallel => {
                trace = forward_trace(params, &tokens)?;
                dhidden = Mat::zeros(tokens.len(), d);
                let h = trace.hidden.row(ctx_last).to_vec();
                let mut total = F::zero();
                for l in 0..depth {
                    let head = &params.heads[l];
                    let mut logits = vec![F::zero(); head.cols()];
                    crate::mat::vecmat(&h, head, &mut logits);
                    total += cross_entropy_in_place(&mut logits, ex.target_tokens[l] as usize);
                    let dh = dhidden.row_mut(ctx_last);
                    let gh = grads.heads[l].data_mut();
                    let cols = head.cols();
                    for (t, &dl) in logits.iter().enumerate() {
                        let dl = dl * w;
                        for i in 0..d {
                            dh[i] += dl * head.at(i, t);
                            gh[i * cols + t] += dl * h[i];
                        }
                    }
                }
                loss = total;
            }
            Objective::SimGr => {
                let item_mat = items.unwrap();
                if ex.target_item >= item_mat.rows() {
                    return Err(Error::invalid(format!(
                        "example {idx}: target item {} out of range",
                        ex.target_item
                    )));
                }
                trace = forward_trace(params, &tokens)?;
                dhidden = Mat::zeros(tokens.len(), d);
                let h = trace.hidden.row(ctx_last).to_vec();
                let (l, dh, dscores) =
                    simgr::simgr_loss(&h, item_mat, ex.target_item, simgr_cfg)?;
                loss = l;
                let dst = dhidden.row_mut(ctx_last);
                for i in 0..d {
                    dst[i] += dh[i] * w;
                }
                let acc = d_items.as_mut().unwrap();
                for (i, row_grad) in dscores.iter().enumerate() {
                    let dst = acc.row_mut(i);
                    for j in 0..d {
                        dst[j] += row_grad[j] * w;
                    }
                }
            }
        }

        if !loss.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at example {idx}"
            )));
        }
        per_example.push(loss);
        example_grads.push(ExampleGrad {
            trace,
            dhidden,
            loss,
        });
    }

    // hidden-state gradients carry the batch weight already
    for eg in &example_grads {
        backward(params, &eg.trace, &eg.dhidden, &mut grads);
    }

    if let Some(acc) = d_items {
        simgr::item_matrix_backward(params, table, &acc, &mut grads)?;
    }

    let mut total = F::zero();
    for eg in &example_grads {
        total += eg.loss;
    }
    let mean = total * w;
    Ok((mean, grads, per_example))
}

/// Mean batch loss without gradients (finite-difference probes).
pub fn batch_loss<F: Scalar>(
    params: &ModelParams<F>,
    batch: &TrainBatch,
    objective: Objective,
    simgr_cfg: &SimGrConfig,
    table: &SemanticIdTable,
) -> Result<F> {
    if batch.examples.is_empty() {
        return Err(Error::invalid("batch must be non-empty"));
    }
    let layout = params.layout();
    let depth = params.cfg.depth();
    let n = batch.examples.len();

    let items = match objective {
        Objective::SimGr => Some(simgr::materialize_item_matrix(params, table)?),
        _ => None,
    };

    let mut total = F::zero();
    for (idx, ex) in batch.examples.iter().enumerate() {
        validate_example(params, ex, idx)?;
        let mut tokens = Vec::with_capacity(1 + ex.context.len() + depth);
        tokens.push(layout.bos());
        tokens.extend(ex.context.iter().map(|&t| t as usize));
        let ctx_last = tokens.len() - 1;
        match objective {
            Objective::Ar => {
                for (l, &t) in ex.target_tokens.iter().take(depth - 1).enumerate() {
                    tokens.push(layout.global(l, t));
                }
                let trace = forward_trace(params, &tokens)?;
                for l in 0..depth {
                    let h = trace.hidden.row(ctx_last + l);
                    let (offset, size) = params.level_embedding_rows(l);
                    let mut logits: Vec<F> = (0..size)
                        .map(|t| dot(h, params.tok_emb.row(offset + t)))
                        .collect();
                    total += cross_entropy_in_place(&mut logits, ex.target_tokens[l] as usize);
                }
            }
            Objective::Parallel => {
                let trace = forward_trace(params, &tokens)?;
                let h = trace.hidden.row(ctx_last);
                for l in 0..depth {
                    let head = &params.heads[l];
                    let mut logits = vec![F::zero(); head.cols()];
                    crate::mat::vecmat(h, head, &mut logits);
                    total += cross_entropy_in_place(&mut logits, ex.target_tokens[l] as usize);
                }
            }
            Objective::SimGr => {
                let trace = forward_trace(params, &tokens)?;
                let h = trace.hidden.row(ctx_last);
                let probs = simgr::score_all_items(h, items.as_ref().unwrap(), simgr_cfg)?;
                total += -(probs[ex.target_item].ln());
            }
        }
    }
    Ok(total * F::of(1.0 / n as f64))
}

/// One AdamW step with the scheduled learning rate.
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut AdamState<F>,
    hyper: &Hyper,
) {
    state.t += 1;
    let lr = F::of(hyper.lr_at(state.t));
    let b1 = F::of(hyper.beta1);
    let b2 = F::of(hyper.beta2);
    let eps = F::of(hyper.eps);
    let one = F::one();
    let bc1 = one - b1.powi(state.t as i32);
    let bc2 = one - b2.powi(state.t as i32);

    let shapes: Vec<Vec<usize>> = grads.named_blocks().iter().map(|(_, _, s)| s.clone()).collect();
    let gblocks: Vec<Vec<F>> = grads
        .named_blocks()
        .into_iter()
        .map(|(_, data, _)| data.to_vec())
        .collect();
    let mut pblocks = params.named_blocks_mut();
    let mut mblocks = state.m.named_blocks_mut();
    let mut vblocks = state.v.named_blocks_mut();

    for (bi, g) in gblocks.iter().enumerate() {
        // decoupled decay on matrices only (embeddings and projections),
        // not on biases or layer-norm scales
        let decay = if shapes[bi].len() == 2 {
            F::of(hyper.weight_decay)
        } else {
            F::zero()
        };
        let p = &mut pblocks[bi].1;
        let m = &mut mblocks[bi].1;
        let v = &mut vblocks[bi].1;
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] = p[i] - lr * (mhat / (vhat.sqrt() + eps) + decay * p[i]);
        }
    }
}

/// One optimization step; returns the pre-update mean loss.
pub fn train_step<F: Scalar>(
    params: &mut ModelParams<F>,
    batch: &TrainBatch,
    objective: Objective,
    state: &mut AdamState<F>,
    hyper: &Hyper,
    simgr_cfg: &SimGrConfig,
    table: &SemanticIdTable,
) -> Result<F> {
    let (loss, grads, _) = loss_and_grads(params, batch, objective, simgr_cfg, table, None)?;
    adam_step(params, &grads, state, hyper);
    Ok(loss)
}

/// Convenience wrapper owning the optimizer state, with an optional
/// item-matrix staleness interval for the retrieval objective.
pub struct Trainer<'a, F: Scalar> {
    pub params: &'a mut ModelParams<F>,
    pub table: &'a SemanticIdTable,
    pub simgr_cfg: SimGrConfig,
    pub hyper: Hyper,
    pub state: AdamState<F>,
    /// Re-materialize the item matrix every `n` steps (1 = every step).
    pub item_refresh_every: u64,
    cached_items: Option<Mat<F>>,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(
        params: &'a mut ModelParams<F>,
        table: &'a SemanticIdTable,
        simgr_cfg: SimGrConfig,
        hyper: Hyper,
    ) -> Self {
        let state = AdamState::new(params);
        Trainer {
            params,
            table,
            simgr_cfg,
            hyper,
            state,
            item_refresh_every: 1,
            cached_items: None,
        }
    }

    pub fn step(&mut self, batch: &TrainBatch, objective: Objective) -> Result<F> {
        let items = if matches!(objective, Objective::SimGr) {
            let refresh = self.cached_items.is_none()
                || self.item_refresh_every <= 1
                || self.state.t % self.item_refresh_every == 0;
            if refresh {
                self.cached_items =
                    Some(simgr::materialize_item_matrix(self.params, self.table)?);
            }
            self.cached_items.clone()
        } else {
            None
        };
        let (loss, grads, _) = loss_and_grads(
            self.params,
            batch,
            objective,
            &self.simgr_cfg,
            self.table,
            items.as_ref(),
        )?;
        adam_step(self.params, &grads, &mut self.state, &self.hyper);
        Ok(loss)
    }
}
