//! Forward pass.
//!
//! The trunk is evaluated one position at a time against per-block key and
//! value caches. Batch encoding and incremental decoding share this single
//! code path, so a [`Session`] that extends a context token-by-token
//! produces bit-identical states to a fresh full encode.

use crate::error::{Error, Result};
use crate::mat::{dot, vecmat, Mat};
use crate::scalar::Scalar;

use super::{LnParams, ModelParams};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Per-position layer-norm cache: normalized values and inverse stddev.
#[derive(Debug, Clone)]
pub(crate) struct LnTrace<F> {
    pub xhat: Mat<F>,
    pub inv_std: Vec<F>,
}

impl<F: Scalar> LnTrace<F> {
    fn new(dim: usize) -> Self {
        LnTrace {
            xhat: Mat::zeros(0, dim),
            inv_std: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockTrace<F> {
    pub ln1: LnTrace<F>,
    pub q: Mat<F>,
    pub k: Mat<F>,
    pub v: Mat<F>,
    /// Attention probabilities per position: `heads * (pos + 1)` values,
    /// laid out head-major.
    pub probs: Vec<Vec<F>>,
    /// Head-concatenated attention mix, before the output projection.
    pub o: Mat<F>,
    pub ln2: LnTrace<F>,
    /// Feed-forward pre-activation.
    pub f1: Mat<F>,
    /// Feed-forward post-activation.
    pub g: Mat<F>,
}

impl<F: Scalar> BlockTrace<F> {
    fn new(dim: usize, ff: usize) -> Self {
        BlockTrace {
            ln1: LnTrace::new(dim),
            q: Mat::zeros(0, dim),
            k: Mat::zeros(0, dim),
            v: Mat::zeros(0, dim),
            probs: Vec::new(),
            o: Mat::zeros(0, dim),
            ln2: LnTrace::new(dim),
            f1: Mat::zeros(0, ff),
            g: Mat::zeros(0, ff),
        }
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Trace<F> {
    pub(crate) tokens: Vec<usize>,
    pub(crate) blocks: Vec<BlockTrace<F>>,
    pub(crate) ln_f: LnTrace<F>,
    /// Final hidden states, one row per position.
    pub hidden: Mat<F>,
}

/// Layer norm of one row; records xhat/inv_std when tracing.
fn ln_row<F: Scalar>(x: &[F], p: &LnParams<F>, out: &mut [F], trace: Option<&mut LnTrace<F>>) {
    let d = x.len();
    let inv_d = F::of(1.0 / d as f64);
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean *= inv_d;
    let mut var = F::zero();
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var *= inv_d;
    let inv_std = (var + F::of(LN_EPS)).sqrt().recip();
    let mut xhat_row = vec![F::zero(); d];
    for i in 0..d {
        let xh = (x[i] - mean) * inv_std;
        xhat_row[i] = xh;
        out[i] = p.gamma[i] * xh + p.beta[i];
    }
    if let Some(t) = trace {
        t.xhat.push_row(&xhat_row);
        t.inv_std.push(inv_std);
    }
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let u = c * (x + k * x * x * x);
    F::of(0.5) * x * (F::one() + u.tanh())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let k = F::of(0.044715);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * sech2 * c * (F::one() + F::of(3.0) * k * x * x)
}

/// Rolling per-block key/value rows for incremental evaluation.
#[derive(Debug, Clone)]
struct KvCache<F> {
    k: Mat<F>,
    v: Mat<F>,
}

/// Incremental forward state over a fixed parameter set.
///
/// `advance` appends one token and returns that position's final hidden
/// state; `truncate` rolls back to an earlier length, which is what the
/// trie decoders use to hop between sibling prefixes cheaply.
pub struct Session<'a, F: Scalar> {
    params: &'a ModelParams<F>,
    caches: Vec<KvCache<F>>,
    len: usize,
    hidden: Mat<F>,
    trace: Option<Trace<F>>,
}

impl<'a, F: Scalar> Session<'a, F> {
    pub fn new(params: &'a ModelParams<F>) -> Self {
        Self::with_tracing(params, false)
    }

    pub(crate) fn with_tracing(params: &'a ModelParams<F>, tracing: bool) -> Self {
        let d = params.cfg.dim;
        let ff = d * params.cfg.ff_mult;
        let caches = (0..params.cfg.blocks)
            .map(|_| KvCache {
                k: Mat::zeros(0, d),
                v: Mat::zeros(0, d),
            })
            .collect();
        let trace = tracing.then(|| Trace {
            tokens: Vec::new(),
            blocks: (0..params.cfg.blocks)
                .map(|_| BlockTrace::new(d, ff))
                .collect(),
            ln_f: LnTrace::new(d),
            hidden: Mat::zeros(0, d),
        });
        Session {
            params,
            caches,
            len: 0,
            hidden: Mat::zeros(0, d),
            trace,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Final hidden state at the last position.
    pub fn last_hidden(&self) -> &[F] {
        self.hidden.row(self.len - 1)
    }

    pub fn hidden_at(&self, pos: usize) -> &[F] {
        self.hidden.row(pos)
    }

    pub(crate) fn take_trace(&mut self) -> Option<Trace<F>> {
        self.trace.take()
    }

    /// Rolls the session back to `len` positions.
    pub fn truncate(&mut self, len: usize) {
        assert!(len <= self.len, "cannot truncate forward");
        assert!(self.trace.is_none(), "tracing sessions cannot truncate");
        for c in &mut self.caches {
            c.k.truncate_rows(len);
            c.v.truncate_rows(len);
        }
        self.hidden.truncate_rows(len);
        self.len = len;
    }

    /// Appends one global token id and computes its final hidden state.
    pub fn advance(&mut self, token: usize) -> Result<()> {
        let p = self.params;
        let d = p.cfg.dim;
        let heads = p.cfg.heads;
        let dh = d / heads;
        let pos = self.len;

        if token >= p.tok_emb.rows() {
            return Err(Error::invalid(format!(
                "token id {token} out of range (vocab rows {})",
                p.tok_emb.rows()
            )));
        }
        if pos >= p.pos_emb.rows() {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds maximum positions {}",
                pos + 1,
                p.pos_emb.rows()
            )));
        }

        if let Some(t) = &mut self.trace {
            t.tokens.push(token);
        }

        // embedding + position
        let mut x = vec![F::zero(); d];
        for i in 0..d {
            x[i] = p.tok_emb.at(token, i) + p.pos_emb.at(pos, i);
        }

        let scale = F::of(1.0 / (dh as f64).sqrt());
        for (bi, blk) in p.blocks.iter().enumerate() {
            let cache = &mut self.caches[bi];
            let mut btrace = self.trace.as_mut().map(|t| &mut t.blocks[bi]);

            // attention sublayer
            let mut a = vec![F::zero(); d];
            ln_row(&x, &blk.ln1, &mut a, btrace.as_deref_mut().map(|t| &mut t.ln1));
            let mut q = vec![F::zero(); d];
            let mut k = vec![F::zero(); d];
            let mut v = vec![F::zero(); d];
            vecmat(&a, &blk.wq, &mut q);
            vecmat(&a, &blk.wk, &mut k);
            vecmat(&a, &blk.wv, &mut v);
            cache.k.push_row(&k);
            cache.v.push_row(&v);

            let span = pos + 1;
            let mut o = vec![F::zero(); d];
            let mut probs_row = Vec::new();
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = &q[cols.clone()];
                let mut scores = vec![F::zero(); span];
                for j in 0..span {
                    scores[j] = dot(qh, &cache.k.row(j)[cols.clone()]) * scale;
                }
                crate::mat::softmax_in_place(&mut scores);
                for j in 0..span {
                    let w = scores[j];
                    let vj = &cache.v.row(j)[cols.clone()];
                    for (oi, &vv) in o[cols.clone()].iter_mut().zip(vj) {
                        *oi += w * vv;
                    }
                }
                probs_row.extend_from_slice(&scores);
            }
            let mut attn = vec![F::zero(); d];
            vecmat(&o, &blk.wo, &mut attn);
            for i in 0..d {
                x[i] += attn[i];
            }

            // feed-forward sublayer
            let mut b = vec![F::zero(); d];
            ln_row(&x, &blk.ln2, &mut b, btrace.as_deref_mut().map(|t| &mut t.ln2));
            let ff = d * p.cfg.ff_mult;
            let mut f1 = vec![F::zero(); ff];
            vecmat(&b, &blk.w1, &mut f1);
            for (f, &bias) in f1.iter_mut().zip(&blk.b1) {
                *f += bias;
            }
            let mut g = vec![F::zero(); ff];
            for i in 0..ff {
                g[i] = gelu(f1[i]);
            }
            let mut f2 = vec![F::zero(); d];
            vecmat(&g, &blk.w2, &mut f2);
            for i in 0..d {
                x[i] += f2[i] + blk.b2[i];
            }

            if let Some(t) = btrace {
                t.q.push_row(&q);
                t.k.push_row(&k);
                t.v.push_row(&v);
                t.probs.push(probs_row);
                t.o.push_row(&o);
                t.f1.push_row(&f1);
                t.g.push_row(&g);
            }
        }

        let mut h = vec![F::zero(); d];
        if p.cfg.blocks == 0 {
            // trunk bypass: the hidden state is the raw embedding sum
            h.copy_from_slice(&x);
        } else {
            ln_row(&x, &p.ln_f, &mut h, self.trace.as_mut().map(|t| &mut t.ln_f));
        }
        self.hidden.push_row(&h);
        self.len += 1;
        Ok(())
    }
}

fn check_context<F: Scalar>(params: &ModelParams<F>, context: &[u32]) -> Result<()> {
    if context.is_empty() {
        return Err(Error::invalid("context must be non-empty"));
    }
    if context.len() > params.cfg.context_len {
        return Err(Error::invalid(format!(
            "context length {} exceeds limit {}",
            context.len(),
            params.cfg.context_len
        )));
    }
    let real_tokens = params.layout().token_count();
    if let Some(&t) = context.iter().find(|&&t| t as usize >= real_tokens) {
        return Err(Error::invalid(format!(
            "context token {t} out of range ({real_tokens} real tokens)"
        )));
    }
    Ok(())
}

/// Runs the trunk over BOS + context and returns the per-position final
/// hidden states.
pub fn encode_all<F: Scalar>(params: &ModelParams<F>, context: &[u32]) -> Result<Mat<F>> {
    check_context(params, context)?;
    let mut s = Session::new(params);
    s.advance(params.layout().bos())?;
    for &t in context {
        s.advance(t as usize)?;
    }
    Ok(s.hidden)
}

/// Final-layer hidden state at the last input position.
pub fn encode<F: Scalar>(params: &ModelParams<F>, context: &[u32]) -> Result<Vec<F>> {
    let h = encode_all(params, context)?;
    Ok(h.row(h.rows() - 1).to_vec())
}

/// Next-level logits from a hidden state, via the tied embedding slice.
pub fn ar_logits_from_hidden<F: Scalar>(
    params: &ModelParams<F>,
    hidden: &[F],
    level: usize,
) -> Vec<F> {
    let (offset, size) = params.level_embedding_rows(level);
    (0..size)
        .map(|t| dot(hidden, params.tok_emb.row(offset + t)))
        .collect()
}

/// Logits over the next level's vocabulary given a context and a partial
/// semantic-ID prefix (level-local tokens).
pub fn ar_logits<F: Scalar>(
    params: &ModelParams<F>,
    context: &[u32],
    prefix: &[u32],
) -> Result<Vec<F>> {
    check_context(params, context)?;
    let layout = params.layout();
    let depth = params.cfg.depth();
    if prefix.len() >= depth {
        return Err(Error::invalid(format!(
            "prefix length {} must be < depth {depth}",
            prefix.len()
        )));
    }
    for (l, &t) in prefix.iter().enumerate() {
        if t as usize >= layout.level_size(l) {
            return Err(Error::invalid(format!(
                "prefix token {t} out of range for level {l}"
            )));
        }
    }
    let mut s = Session::new(params);
    s.advance(layout.bos())?;
    for &t in context {
        s.advance(t as usize)?;
    }
    for (l, &t) in prefix.iter().enumerate() {
        s.advance(layout.global(l, t))?;
    }
    Ok(ar_logits_from_hidden(params, s.last_hidden(), prefix.len()))
}

/// One forward pass; head `l` maps the last hidden state to level-`l`
/// marginal logits.
pub fn parallel_logits<F: Scalar>(params: &ModelParams<F>, context: &[u32]) -> Result<Vec<Vec<F>>> {
    let h = encode(params, context)?;
    Ok(params
        .heads
        .iter()
        .map(|w| {
            let mut out = vec![F::zero(); w.cols()];
            vecmat(&h, w, &mut out);
            out
        })
        .collect())
}

/// Traced forward over a pre-assembled token sequence (BOS included by the
/// caller). Used by training.
pub(crate) fn forward_trace<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[usize],
) -> Result<Trace<F>> {
    let mut s = Session::with_tracing(params, true);
    for &t in tokens {
        s.advance(t)?;
    }
    let mut trace = s.take_trace().expect("tracing session");
    trace.hidden = s.hidden;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::simgr::AggregatorKind;

    fn cfg(dim: usize, blocks: usize) -> ModelConfig {
        ModelConfig {
            dim,
            heads: 2,
            blocks,
            ff_mult: 4,
            level_vocab_sizes: vec![3, 2, 2],
            context_len: 12,
            aggregator: AggregatorKind::Mean,
            agg_include_dedup: true,
            seed: 7,
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let p = ModelParams::<f64>::init(cfg(4, 1)).unwrap();
        let ctx = [0u32, 3, 5, 1];
        assert_eq!(encode(&p, &ctx).unwrap(), encode(&p, &ctx).unwrap());
    }

    #[test]
    fn causality_prefix_states_unchanged() {
        let p = ModelParams::<f64>::init(cfg(4, 2)).unwrap();
        let short = [0u32, 3, 5];
        let long = [0u32, 3, 5, 1];
        let hs = encode_all(&p, &short).unwrap();
        let hl = encode_all(&p, &long).unwrap();
        for pos in 0..hs.rows() {
            assert_eq!(hs.row(pos), hl.row(pos), "position {pos} changed");
        }
    }

    #[test]
    fn session_matches_encode_bitwise() {
        let p = ModelParams::<f64>::init(cfg(8, 1)).unwrap();
        let ctx = [2u32, 4, 6, 1, 0];
        let full = encode_all(&p, &ctx).unwrap();
        let layout = p.layout();
        let mut s = Session::new(&p);
        s.advance(layout.bos()).unwrap();
        for &t in &ctx {
            s.advance(t as usize).unwrap();
        }
        assert_eq!(s.hidden.data(), full.data());
        // rollback then re-advance reproduces the same states
        s.truncate(3);
        for &t in &ctx[2..] {
            s.advance(t as usize).unwrap();
        }
        assert_eq!(s.hidden.data(), full.data());
    }

    #[test]
    fn out_of_range_and_overlength_rejected() {
        let p = ModelParams::<f64>::init(cfg(4, 1)).unwrap();
        assert!(encode(&p, &[]).is_err());
        assert!(encode(&p, &[99]).is_err());
        let long: Vec<u32> = vec![0; 13];
        assert!(encode(&p, &long).is_err());
    }

    #[test]
    fn ar_logits_validates_prefix() {
        let p = ModelParams::<f64>::init(cfg(4, 1)).unwrap();
        assert!(ar_logits(&p, &[0, 1], &[9]).is_err());
        assert!(ar_logits(&p, &[0, 1], &[0, 0, 0]).is_err());
        let l0 = ar_logits(&p, &[0, 1], &[]).unwrap();
        assert_eq!(l0.len(), 3);
        let l1 = ar_logits(&p, &[0, 1], &[2]).unwrap();
        assert_eq!(l1.len(), 2);
    }

    #[test]
    fn softmax_of_ar_logits_normalizes_and_shifts() {
        let p = ModelParams::<f64>::init(cfg(4, 1)).unwrap();
        let mut l = ar_logits(&p, &[0, 1, 2], &[]).unwrap();
        let mut shifted = l.clone();
        for v in &mut shifted {
            *v += 17.3;
        }
        crate::mat::softmax_in_place(&mut l);
        crate::mat::softmax_in_place(&mut shifted);
        let s: f64 = l.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for (a, b) in l.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_heads_give_uniform_marginals() {
        let p = ModelParams::<f64>::init(cfg(4, 1)).unwrap();
        let outs = parallel_logits(&p, &[0, 1]).unwrap();
        for (l, mut logits) in outs.into_iter().enumerate() {
            crate::mat::softmax_in_place(&mut logits);
            let expect = 1.0 / p.cfg.level_vocab_sizes[l] as f64;
            for v in logits {
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn parallel_heads_match_reference_multiplier() {
        let mut p = ModelParams::<f64>::init(cfg(4, 1)).unwrap();
        // fill heads with a deterministic pattern
        for h in &mut p.heads {
            let cols = h.cols();
            for (i, v) in h.data_mut().iter_mut().enumerate() {
                *v = ((i % cols) as f64 + 1.0) * 0.1 - (i as f64) * 0.01;
            }
        }
        let ctx = [0u32, 4, 2];
        let h = encode(&p, &ctx).unwrap();
        let outs = parallel_logits(&p, &ctx).unwrap();
        for (l, out) in outs.iter().enumerate() {
            for c in 0..out.len() {
                let mut manual = 0.0;
                for r in 0..p.cfg.dim {
                    manual += h[r] * p.heads[l].at(r, c);
                }
                assert!((manual - out[c]).abs() < 1e-12);
            }
        }
    }

    /// Straight-line re-implementation of the full forward pass for one
    /// tiny example, independent of the Session code path.
    #[test]
    fn encode_matches_straight_line_reference() {
        let p = ModelParams::<f64>::init(cfg(4, 1)).unwrap();
        let ctx = [1u32, 4];
        let got = encode_all(&p, &ctx).unwrap();

        let d = 4usize;
        let dh = 2usize;
        let tokens = vec![p.layout().bos(), 1, 4];
        let t_len = tokens.len();
        let blk = &p.blocks[0];

        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            (0..d).map(|i| g[i] * (x[i] - mean) * inv + b[i]).collect()
        };
        let matv = |x: &[f64], w: &Mat<f64>| -> Vec<f64> {
            (0..w.cols())
                .map(|c| (0..w.rows()).map(|r| x[r] * w.at(r, c)).sum())
                .collect()
        };

        let mut xs: Vec<Vec<f64>> = Vec::new();
        for (pos, &tok) in tokens.iter().enumerate() {
            let x: Vec<f64> = (0..d)
                .map(|i| p.tok_emb.at(tok, i) + p.pos_emb.at(pos, i))
                .collect();
            xs.push(x);
        }
        let a: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| ln(x, &blk.ln1.gamma, &blk.ln1.beta))
            .collect();
        let qs: Vec<Vec<f64>> = a.iter().map(|r| matv(r, &blk.wq)).collect();
        let ks: Vec<Vec<f64>> = a.iter().map(|r| matv(r, &blk.wk)).collect();
        let vs: Vec<Vec<f64>> = a.iter().map(|r| matv(r, &blk.wv)).collect();
        let mut after_attn = Vec::new();
        for pos in 0..t_len {
            let mut o = vec![0.0; d];
            for h in 0..2 {
                let cols = h * dh..(h + 1) * dh;
                let mut scores: Vec<f64> = (0..=pos)
                    .map(|j| {
                        qs[pos][cols.clone()]
                            .iter()
                            .zip(&ks[j][cols.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for s in &mut scores {
                    *s = (*s - m).exp() / z;
                }
                for (j, w) in scores.iter().enumerate() {
                    for (i, c) in cols.clone().enumerate() {
                        o[c] += w * vs[j][h * dh + i];
                    }
                }
            }
            let attn = matv(&o, &blk.wo);
            let x: Vec<f64> = (0..d).map(|i| xs[pos][i] + attn[i]).collect();
            after_attn.push(x);
        }
        let mut final_x = Vec::new();
        for x in &after_attn {
            let b = ln(x, &blk.ln2.gamma, &blk.ln2.beta);
            let mut f1 = matv(&b, &blk.w1);
            for (f, &bias) in f1.iter_mut().zip(&blk.b1) {
                *f += bias;
            }
            let g: Vec<f64> = f1.iter().map(|&v| gelu(v)).collect();
            let f2 = matv(&g, &blk.w2);
            let y: Vec<f64> = (0..d).map(|i| x[i] + f2[i] + blk.b2[i]).collect();
            final_x.push(y);
        }
        for (pos, y) in final_x.iter().enumerate() {
            let h = ln(y, &p.ln_f.gamma, &p.ln_f.beta);
            for i in 0..d {
                assert!(
                    (h[i] - got.at(pos, i)).abs() < 1e-12,
                    "pos {pos} dim {i}: reference {} vs session {}",
                    h[i],
                    got.at(pos, i)
                );
            }
        }
    }
}
