//! Similarity retrieval: score every item against the encoder's final
//! hidden state.
//!
//! Item vectors are aggregations of the item's semantic-ID token
//! embeddings; the item probability is a temperature softmax over inner
//! products. Training and retrieval share this exact scoring path.

use serde::{Deserialize, Serialize};

use crate::decoding::ScoredList;
use crate::error::{Error, Result};
use crate::mat::{dot, vecmat, Mat};
use crate::model::{encode, AggParams, ModelParams};
use crate::scalar::Scalar;
use crate::tokenizer::SemanticIdTable;

/// Aggregation operator turning the `L x d` token embeddings of an item
/// into one `d`-vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    /// Arithmetic mean of the token embeddings (no parameters).
    Mean,
    /// Concatenate, then one learned `(L*d) -> d` projection.
    ConcatProject,
    /// Per-slot learned `d -> d` maps, then mean.
    ProjectPool,
    /// Softmax-weighted mean with learned per-slot gate logits.
    Gating,
    /// Single-query attention over the token embeddings.
    CrossAttention,
}

impl AggregatorKind {
    pub(crate) fn mat_name(self, i: usize) -> String {
        match self {
            AggregatorKind::Mean => unreachable!("mean pooling has no parameters"),
            AggregatorKind::ConcatProject => "w".into(),
            AggregatorKind::ProjectPool => format!("w{i}"),
            AggregatorKind::Gating => "gate".into(),
            AggregatorKind::CrossAttention => "query".into(),
        }
    }
}

/// Retrieval settings shared by training and inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimGrConfig {
    /// Softmax temperature; smaller is sharper.
    pub temperature: f64,
    /// Score by cosine instead of raw inner product (ablation only).
    pub cosine: bool,
}

impl Default for SimGrConfig {
    fn default() -> Self {
        SimGrConfig {
            temperature: 0.07,
            cosine: false,
        }
    }
}

impl SimGrConfig {
    fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be finite and > 0"));
        }
        Ok(())
    }
}

/// Aggregated item representations plus the training step they were
/// materialized at.
#[derive(Debug, Clone)]
pub struct ItemMatrix<F> {
    pub data: Mat<F>,
    pub refresh_stamp: u64,
}

impl<F: Scalar> ItemMatrix<F> {
    pub fn materialize(
        params: &ModelParams<F>,
        table: &SemanticIdTable,
        refresh_stamp: u64,
    ) -> Result<Self> {
        Ok(ItemMatrix {
            data: materialize_item_matrix(params, table)?,
            refresh_stamp,
        })
    }
}

/// Aggregates one item's token embeddings (`rows x d`).
pub fn aggregate_item<F: Scalar>(
    embs: &Mat<F>,
    agg: &AggParams<F>,
    kind: AggregatorKind,
) -> Result<Vec<F>> {
    let l = embs.rows();
    let d = embs.cols();
    if l == 0 {
        return Err(Error::invalid("cannot aggregate zero token embeddings"));
    }
    let inv_l = F::of(1.0 / l as f64);
    match kind {
        AggregatorKind::Mean => {
            let mut out = vec![F::zero(); d];
            for r in 0..l {
                for (o, &v) in out.iter_mut().zip(embs.row(r)) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o *= inv_l;
            }
            Ok(out)
        }
        AggregatorKind::ConcatProject => {
            let w = &agg.mats[0];
            if w.rows() != l * d || w.cols() != d {
                return Err(Error::invalid(format!(
                    "concat projection is {}x{}, expected {}x{d}",
                    w.rows(),
                    w.cols(),
                    l * d
                )));
            }
            let mut out = vec![F::zero(); d];
            vecmat(embs.data(), w, &mut out);
            Ok(out)
        }
        AggregatorKind::ProjectPool => {
            if agg.mats.len() != l {
                return Err(Error::invalid(format!(
                    "project-pool has {} maps for {l} token slots",
                    agg.mats.len()
                )));
            }
            let mut out = vec![F::zero(); d];
            let mut tmp = vec![F::zero(); d];
            for r in 0..l {
                vecmat(embs.row(r), &agg.mats[r], &mut tmp);
                for (o, &v) in out.iter_mut().zip(&tmp) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o *= inv_l;
            }
            Ok(out)
        }
        AggregatorKind::Gating => {
            let gate = &agg.mats[0];
            if gate.cols() != l {
                return Err(Error::invalid(format!(
                    "gate has {} logits for {l} token slots",
                    gate.cols()
                )));
            }
            let mut w = gate.row(0).to_vec();
            crate::mat::softmax_in_place(&mut w);
            let mut out = vec![F::zero(); d];
            for r in 0..l {
                for (o, &v) in out.iter_mut().zip(embs.row(r)) {
                    *o += w[r] * v;
                }
            }
            Ok(out)
        }
        AggregatorKind::CrossAttention => {
            let q = agg.mats[0].row(0);
            if q.len() != d {
                return Err(Error::invalid("attention query width mismatch"));
            }
            let scale = F::of(1.0 / (d as f64).sqrt());
            let mut scores: Vec<F> = (0..l).map(|r| dot(q, embs.row(r)) * scale).collect();
            crate::mat::softmax_in_place(&mut scores);
            let mut out = vec![F::zero(); d];
            for r in 0..l {
                for (o, &v) in out.iter_mut().zip(embs.row(r)) {
                    *o += scores[r] * v;
                }
            }
            Ok(out)
        }
    }
}

/// Backward of [`aggregate_item`]: scatters `dout` into the token
/// embedding gradients and the aggregator's own parameter gradients.
pub fn aggregate_item_backward<F: Scalar>(
    embs: &Mat<F>,
    agg: &AggParams<F>,
    kind: AggregatorKind,
    dout: &[F],
    dembs: &mut Mat<F>,
    dagg: &mut AggParams<F>,
) {
    let l = embs.rows();
    let d = embs.cols();
    let inv_l = F::of(1.0 / l as f64);
    match kind {
        AggregatorKind::Mean => {
            for r in 0..l {
                for (g, &dv) in dembs.row_mut(r).iter_mut().zip(dout) {
                    *g += dv * inv_l;
                }
            }
        }
        AggregatorKind::ConcatProject => {
            let w = &agg.mats[0];
            let dw = &mut dagg.mats[0];
            let concat = embs.data();
            for (r, &cr) in concat.iter().enumerate() {
                let row = dw.row_mut(r);
                for (c, &dv) in dout.iter().enumerate() {
                    row[c] += cr * dv;
                }
            }
            for r in 0..l * d {
                let grad = dot(w.row(r), dout);
                dembs.data_mut()[r] += grad;
            }
        }
        AggregatorKind::ProjectPool => {
            for r in 0..l {
                let e = embs.row(r);
                let dw = &mut dagg.mats[r];
                for (i, &ei) in e.iter().enumerate() {
                    let row = dw.row_mut(i);
                    for (c, &dv) in dout.iter().enumerate() {
                        row[c] += ei * dv * inv_l;
                    }
                }
                let w = &agg.mats[r];
                let dst = dembs.row_mut(r);
                for i in 0..d {
                    dst[i] += dot(w.row(i), dout) * inv_l;
                }
            }
        }
        AggregatorKind::Gating => {
            let mut w = agg.mats[0].row(0).to_vec();
            crate::mat::softmax_in_place(&mut w);
            let dweights: Vec<F> = (0..l).map(|r| dot(dout, embs.row(r))).collect();
            let inner: F = (0..l).map(|r| w[r] * dweights[r]).sum();
            for r in 0..l {
                for (g, &dv) in dembs.row_mut(r).iter_mut().zip(dout) {
                    *g += w[r] * dv;
                }
                *dagg.mats[0].at_mut(0, r) += w[r] * (dweights[r] - inner);
            }
        }
        AggregatorKind::CrossAttention => {
            let q = agg.mats[0].row(0).to_vec();
            let scale = F::of(1.0 / (d as f64).sqrt());
            let mut alpha: Vec<F> = (0..l).map(|r| dot(&q, embs.row(r)) * scale).collect();
            crate::mat::softmax_in_place(&mut alpha);
            let dalpha: Vec<F> = (0..l).map(|r| dot(dout, embs.row(r))).collect();
            let inner: F = (0..l).map(|r| alpha[r] * dalpha[r]).sum();
            for r in 0..l {
                let ds = alpha[r] * (dalpha[r] - inner) * scale;
                let dst = dembs.row_mut(r);
                for i in 0..d {
                    dst[i] += alpha[r] * dout[i] + ds * q[i];
                }
                let dq = dagg.mats[0].row_mut(0);
                for (i, &ev) in embs.row(r).iter().enumerate() {
                    dq[i] += ds * ev;
                }
            }
        }
    }
}

fn gather_item_embs<F: Scalar>(
    params: &ModelParams<F>,
    table: &SemanticIdTable,
    item: usize,
) -> Mat<F> {
    let layout = params.layout();
    let slots = params.cfg.agg_levels();
    let mut m = Mat::zeros(0, params.cfg.dim);
    for (level, &t) in table.sequence(item).iter().take(slots).enumerate() {
        m.push_row(params.tok_emb.row(layout.global(level, t)));
    }
    m
}

/// Aggregated representation of every item, from the live embeddings.
pub fn materialize_item_matrix<F: Scalar>(
    params: &ModelParams<F>,
    table: &SemanticIdTable,
) -> Result<Mat<F>> {
    if table.depth() != params.cfg.depth() {
        return Err(Error::invalid(format!(
            "table depth {} does not match model depth {}",
            table.depth(),
            params.cfg.depth()
        )));
    }
    let mut out = Mat::zeros(0, params.cfg.dim);
    for item in 0..table.item_count() {
        let embs = gather_item_embs(params, table, item);
        let agg = aggregate_item(&embs, &params.agg, params.cfg.aggregator)?;
        out.push_row(&agg);
    }
    Ok(out)
}

/// Backward of [`materialize_item_matrix`]: routes per-item gradients into
/// token-embedding and aggregator gradients.
pub fn item_matrix_backward<F: Scalar>(
    params: &ModelParams<F>,
    table: &SemanticIdTable,
    d_items: &Mat<F>,
    grads: &mut ModelParams<F>,
) -> Result<()> {
    let layout = params.layout();
    let slots = params.cfg.agg_levels();
    for item in 0..table.item_count() {
        let embs = gather_item_embs(params, table, item);
        let mut dembs = Mat::zeros(embs.rows(), embs.cols());
        aggregate_item_backward(
            &embs,
            &params.agg,
            params.cfg.aggregator,
            d_items.row(item),
            &mut dembs,
            &mut grads.agg,
        );
        for (level, &t) in table.sequence(item).iter().take(slots).enumerate() {
            let dst = grads.tok_emb.row_mut(layout.global(level, t));
            for (g, &dv) in dst.iter_mut().zip(dembs.row(level)) {
                *g += dv;
            }
        }
    }
    Ok(())
}

/// Temperature-softmax probabilities of every item given a hidden state.
pub fn score_all_items<F: Scalar>(
    hidden: &[F],
    items: &Mat<F>,
    cfg: &SimGrConfig,
) -> Result<Vec<F>> {
    cfg.validate()?;
    if hidden.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("hidden state contains non-finite values"));
    }
    let inv_tau = F::of(1.0 / cfg.temperature);
    let mut scores: Vec<F> = if cfg.cosine {
        let hn = norm_or_tiny(hidden);
        (0..items.rows())
            .map(|i| {
                let r = items.row(i);
                dot(hidden, r) / (hn * norm_or_tiny(r)) * inv_tau
            })
            .collect()
    } else {
        (0..items.rows())
            .map(|i| dot(hidden, items.row(i)) * inv_tau)
            .collect()
    };
    crate::mat::softmax_in_place(&mut scores);
    Ok(scores)
}

fn norm_or_tiny<F: Scalar>(v: &[F]) -> F {
    let n = dot(v, v).sqrt();
    n.max(F::of(1e-30))
}

/// Full-softmax cross-entropy of the target item, with exact gradients
/// with respect to the hidden state and every item row.
pub fn simgr_loss<F: Scalar>(
    hidden: &[F],
    items: &Mat<F>,
    target: usize,
    cfg: &SimGrConfig,
) -> Result<(F, Vec<F>, Vec<Vec<F>>)> {
    if target >= items.rows() {
        return Err(Error::invalid(format!(
            "target item {target} out of range ({} items)",
            items.rows()
        )));
    }
    let probs = score_all_items(hidden, items, cfg)?;
    let loss = -probs[target].ln();
    let inv_tau = F::of(1.0 / cfg.temperature);
    let d = hidden.len();
    let n = items.rows();

    let mut dh = vec![F::zero(); d];
    let mut d_items = vec![vec![F::zero(); d]; n];

    if cfg.cosine {
        let hn = norm_or_tiny(hidden);
        let u: Vec<F> = hidden.iter().map(|&v| v / hn).collect();
        for i in 0..n {
            let row = items.row(i);
            let an = norm_or_tiny(row);
            let wi: Vec<F> = row.iter().map(|&v| v / an).collect();
            let cosv = dot(&u, &wi);
            let mut ds = probs[i] * inv_tau;
            if i == target {
                ds -= inv_tau;
            }
            for j in 0..d {
                dh[j] += ds * (wi[j] - cosv * u[j]) / hn;
                d_items[i][j] += ds * (u[j] - cosv * wi[j]) / an;
            }
        }
    } else {
        for i in 0..n {
            let mut ds = probs[i] * inv_tau;
            if i == target {
                ds -= inv_tau;
            }
            let row = items.row(i);
            for j in 0..d {
                dh[j] += ds * row[j];
                d_items[i][j] += ds * hidden[j];
            }
        }
    }
    Ok((loss, dh, d_items))
}

/// Ranks all items by probability for a pre-computed hidden state and
/// item matrix. Ties break toward the smaller item index.
pub fn rank_items<F: Scalar>(
    hidden: &[F],
    items: &Mat<F>,
    k: usize,
    cfg: &SimGrConfig,
) -> Result<ScoredList<F>> {
    let probs = score_all_items(hidden, items, cfg)?;
    let mut entries: Vec<(usize, F)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| (i, p.ln()))
        .collect();
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    entries.truncate(k);
    ScoredList::new(entries)
}

/// Encode the context, materialize item vectors from the live embeddings,
/// and return the top-`k` items by probability. One trunk forward pass.
pub fn simgr_topk<F: Scalar>(
    params: &ModelParams<F>,
    table: &SemanticIdTable,
    context: &[u32],
    k: usize,
    cfg: &SimGrConfig,
) -> Result<ScoredList<F>> {
    let hidden = encode(params, context)?;
    let items = materialize_item_matrix(params, table)?;
    rank_items(&hidden, &items, k, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Mat<f64> {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn mean_of_two_rows() {
        let embs = mat(&[&[1.0, 3.0], &[3.0, 1.0]]);
        let agg = AggParams { mats: vec![] };
        let out = aggregate_item(&embs, &agg, AggregatorKind::Mean).unwrap();
        assert_eq!(out, vec![2.0, 2.0]);
    }

    #[test]
    fn uniform_gates_equal_mean() {
        let embs = mat(&[&[1.0, 3.0, -2.0], &[3.0, 1.0, 4.0], &[0.5, 0.5, 0.5]]);
        let mean = aggregate_item(&embs, &AggParams { mats: vec![] }, AggregatorKind::Mean)
            .unwrap();
        // equal gate logits (any constant) produce a uniform softmax
        let gate = AggParams {
            mats: vec![Mat::from_vec(1, 3, vec![0.7, 0.7, 0.7])],
        };
        let gated = aggregate_item(&embs, &gate, AggregatorKind::Gating).unwrap();
        for (a, b) in mean.iter().zip(&gated) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_single_token_is_identity() {
        let embs = mat(&[&[0.4, -1.0, 2.0]]);
        let agg = AggParams {
            mats: vec![Mat::from_vec(1, 3, vec![0.3, -0.2, 0.9])],
        };
        let out = aggregate_item(&embs, &agg, AggregatorKind::CrossAttention).unwrap();
        assert_eq!(out, vec![0.4, -1.0, 2.0]);
    }

    #[test]
    fn identical_items_score_uniform() {
        let items = mat(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
        let cfg = SimGrConfig::default();
        let p = score_all_items(&[0.5, -0.25], &items, &cfg).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_item_softmax_arithmetic() {
        // scores 1 and 0 at temperature 1
        let items = mat(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let cfg = SimGrConfig {
            temperature: 1.0,
            cosine: false,
        };
        let p = score_all_items(&[1.0, 0.0], &items, &cfg).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn ranking_matches_raw_inner_products() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "simgr-rank", 0);
        for _ in 0..100 {
            let n = rng.gen_range(2..12);
            let d = 4;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let items = Mat::from_rows(&rows);
            let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tau = *[0.05, 0.1, 1.0, 10.0]
                .iter()
                .nth(rng.gen_range(0..4))
                .unwrap();
            let cfg = SimGrConfig {
                temperature: tau,
                cosine: false,
            };
            let probs = score_all_items(&h, &items, &cfg).unwrap();
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            // sort-equivalence oracle
            let mut by_prob: Vec<usize> = (0..n).collect();
            by_prob.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let raw: Vec<f64> = (0..n).map(|i| dot(&h, items.row(i))).collect();
            let mut by_raw: Vec<usize> = (0..n).collect();
            by_raw.sort_by(|&a, &b| raw[b].partial_cmp(&raw[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(by_prob, by_raw);
        }
    }

    #[test]
    fn single_item_loss_zero_grads_zero() {
        let items = mat(&[&[0.3, 0.8]]);
        let (loss, dh, di) = simgr_loss(&[1.0, -1.0], &items, 0, &SimGrConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(dh.iter().all(|&v| v.abs() < 1e-15));
        assert!(di[0].iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn uniform_items_loss_ln_n() {
        let items = mat(&[&[1.0, 1.0][..]; 8]);
        let (loss, _, _) = simgr_loss(&[0.2, 0.4], &items, 3, &SimGrConfig::default()).unwrap();
        assert!((loss - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "simgr-fd", 0);
        let d = 8;
        let n = 16;
        for &cosine in &[false, true] {
            let cfg = SimGrConfig {
                temperature: 0.5,
                cosine,
            };
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let items = Mat::from_rows(&rows);
            let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let target = 5;
            let (_, dh, di) = simgr_loss(&h, &items, target, &cfg).unwrap();
            let eps = 1e-6;
            for j in 0..d {
                let mut hp = h.clone();
                hp[j] += eps;
                let (lp, _, _) = simgr_loss(&hp, &items, target, &cfg).unwrap();
                hp[j] -= 2.0 * eps;
                let (lm, _, _) = simgr_loss(&hp, &items, target, &cfg).unwrap();
                let num = (lp - lm) / (2.0 * eps);
                assert!(
                    (num - dh[j]).abs() / num.abs().max(dh[j].abs()).max(1e-8) < 1e-6,
                    "dh[{j}] analytic {} vs numeric {num} (cosine={cosine})",
                    dh[j]
                );
            }
            for i in [0usize, target, n - 1] {
                for j in 0..d {
                    let mut m2 = items.clone();
                    *m2.at_mut(i, j) += eps;
                    let (lp, _, _) = simgr_loss(&h, &m2, target, &cfg).unwrap();
                    *m2.at_mut(i, j) -= 2.0 * eps;
                    let (lm, _, _) = simgr_loss(&h, &m2, target, &cfg).unwrap();
                    let num = (lp - lm) / (2.0 * eps);
                    assert!(
                        (num - di[i][j]).abs() / num.abs().max(di[i][j].abs()).max(1e-8) < 1e-6,
                        "d_items[{i}][{j}] analytic {} vs numeric {num} (cosine={cosine})",
                        di[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn temperature_preserves_argmax() {
        let items = mat(&[&[1.0, 0.0], &[0.0, 1.0], &[0.7, 0.7]]);
        let h = [1.0, 0.2];
        let mut tops = Vec::new();
        for tau in [0.05, 0.07, 0.1, 0.2, 1.0, 10.0] {
            let cfg = SimGrConfig {
                temperature: tau,
                cosine: false,
            };
            let list = rank_items(&h, &items, 1, &cfg).unwrap();
            tops.push(list.entries()[0].0);
        }
        assert!(tops.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn every_item_has_positive_probability() {
        let items = mat(&[&[1.0, 1.0], &[-1.0, -1.0], &[0.0, 0.0]]);
        let cfg = SimGrConfig {
            temperature: 0.05,
            cosine: false,
        };
        let p = score_all_items(&[1.0, 1.0], &items, &cfg).unwrap();
        assert!(p.iter().all(|&v| v > 0.0));
        assert_eq!(p.len(), 3);
    }
}
