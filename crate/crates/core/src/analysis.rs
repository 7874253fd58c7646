//! Decoding-bias analysis.
//!
//! Two questions are verified numerically against brute force:
//!
//! 1. How much of the exact top-K does beam search recover, and is the
//!    measured overlap bounded by the rank-based upper bound (with its
//!    union-bound relaxation)?
//! 2. How far can a marginal-product factorization distort item-level
//!    probabilities, relative to the chi-square divergence between the
//!    joint distributions?

use serde::Serialize;

use rand::Rng;

use crate::decoding::{beam_search, exact_search, rank_profile, BeamConfig, ScoredList, StepScorer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tokenizer::{PrefixTrie, SemanticIdTable};

/// Compensated (Kahan-Neumaier) mean, so aggregation order cannot leak
/// into reported values beyond 1e-12.
pub fn kahan_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    (sum + c) / xs.len() as f64
}

/// `|top-K(a) ∩ top-K(b)|`, as a count.
pub fn overlap_count<F: Scalar>(a: &ScoredList<F>, b: &ScoredList<F>, k: usize) -> Result<usize> {
    if a.len() < k || b.len() < k {
        return Err(Error::invalid(format!(
            "lists of length {} and {} are too short for K={k}",
            a.len(),
            b.len()
        )));
    }
    let sa = a.top_set(k);
    Ok(b.entries().iter().take(k).filter(|(i, _)| sa.contains(i)).count())
}

/// `|top-K(a) ∩ top-K(b)| / K`.
pub fn overlap_at_k<F: Scalar>(a: &ScoredList<F>, b: &ScoredList<F>, k: usize) -> Result<f64> {
    Ok(overlap_count(a, b, k)? as f64 / k as f64)
}

/// Per-user beam/exact overlap fractions and their mean.
#[derive(Debug, Clone, Serialize)]
pub struct OverlapReport {
    pub b: usize,
    pub k: usize,
    pub per_user: Vec<f64>,
    pub per_user_hits: Vec<u32>,
    pub mean: f64,
}

impl OverlapReport {
    pub fn total_hits(&self) -> u64 {
        self.per_user_hits.iter().map(|&h| h as u64).sum()
    }
}

/// Runs beam and exact search per user and aggregates top-K overlap.
pub fn measure_overlap<F, S, M>(
    mut make_scorer: M,
    trie: &PrefixTrie,
    n_users: usize,
    b: usize,
    k: usize,
) -> Result<OverlapReport>
where
    F: Scalar,
    S: StepScorer<F>,
    M: FnMut(usize) -> Result<S>,
{
    if n_users == 0 {
        return Err(Error::invalid("need at least one user"));
    }
    let cfg = BeamConfig::new(b, k.min(b));
    let mut per_user = Vec::with_capacity(n_users);
    let mut per_user_hits = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let mut scorer = make_scorer(u)?;
        let beam = beam_search(&mut scorer, trie, &cfg)?;
        let exact = exact_search(&mut scorer, trie, k, cfg.renormalize_over_valid)?;
        let eff_k = k.min(trie.leaf_count());
        let hits = overlap_count(&beam, &exact, eff_k.min(beam.len()))?;
        per_user_hits.push(hits as u32);
        per_user.push(hits as f64 / eff_k as f64);
    }
    Ok(OverlapReport {
        b,
        k,
        mean: kahan_mean(&per_user),
        per_user,
        per_user_hits,
    })
}

/// The rank-based overlap upper bound, evaluated deterministically.
///
/// With frozen parameters the event "every level-l token of item i ranks
/// within the top B at its true prefix" is a 0/1 indicator per user, so
/// the bound is the average fraction of exact-top-K items whose rank
/// profile survives a beam of size B.
#[derive(Debug, Clone, Serialize)]
pub struct BoundEstimate {
    pub b: usize,
    pub k: usize,
    pub per_user: Vec<f64>,
    pub per_user_ok: Vec<u32>,
    pub theorem1_upper: f64,
}

impl BoundEstimate {
    pub fn total_ok(&self) -> u64 {
        self.per_user_ok.iter().map(|&h| h as u64).sum()
    }
}

pub fn theorem1_upper_bound<F, S, M>(
    mut make_scorer: M,
    trie: &PrefixTrie,
    table: &SemanticIdTable,
    n_users: usize,
    b: usize,
    k: usize,
) -> Result<BoundEstimate>
where
    F: Scalar,
    S: StepScorer<F>,
    M: FnMut(usize) -> Result<S>,
{
    if n_users == 0 {
        return Err(Error::invalid("need at least one user"));
    }
    let mut per_user = Vec::with_capacity(n_users);
    let mut per_user_ok = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let mut scorer = make_scorer(u)?;
        let exact = exact_search(&mut scorer, trie, k, true)?;
        let eff_k = exact.len();
        let mut ok = 0u32;
        for (item, _) in exact.entries() {
            let ranks = rank_profile(&mut scorer, trie, table, *item)?;
            if ranks.iter().all(|&r| r <= b) {
                ok += 1;
            }
        }
        per_user_ok.push(ok);
        per_user.push(ok as f64 / eff_k as f64);
    }
    Ok(BoundEstimate {
        b,
        k,
        theorem1_upper: kahan_mean(&per_user),
        per_user,
        per_user_ok,
    })
}

/// Empirical per-level probabilities that the target item's token ranks
/// within the top B, plus the joint-event frequency.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalQ {
    pub b: usize,
    pub q: Vec<f64>,
    pub level_counts: Vec<u32>,
    pub joint_count: u32,
    pub joint_freq: f64,
    pub n_users: usize,
}

pub fn estimate_marginal_q<F, S, M>(
    mut make_scorer: M,
    trie: &PrefixTrie,
    table: &SemanticIdTable,
    targets: &[usize],
    b: usize,
) -> Result<MarginalQ>
where
    F: Scalar,
    S: StepScorer<F>,
    M: FnMut(usize) -> Result<S>,
{
    if targets.is_empty() {
        return Err(Error::invalid("need at least one target"));
    }
    let depth = table.depth();
    let mut level_counts = vec![0u32; depth];
    let mut joint_count = 0u32;
    for (u, &target) in targets.iter().enumerate() {
        let mut scorer = make_scorer(u)?;
        let ranks = rank_profile(&mut scorer, trie, table, target)?;
        let mut all = true;
        for (l, &r) in ranks.iter().enumerate() {
            if r <= b {
                level_counts[l] += 1;
            } else {
                all = false;
            }
        }
        if all {
            joint_count += 1;
        }
    }
    let n = targets.len();
    Ok(MarginalQ {
        b,
        q: level_counts.iter().map(|&c| c as f64 / n as f64).collect(),
        level_counts,
        joint_count,
        joint_freq: joint_count as f64 / n as f64,
        n_users: n,
    })
}

/// `1 - sum_l (1 - q_l)`: the union-bound relaxation of the joint event.
/// May be negative; the reporting layer clamps.
pub fn union_lower_bound(q: &[f64]) -> Result<f64> {
    for &v in q {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("marginal {v} outside [0,1]")));
        }
    }
    Ok(1.0 - q.iter().map(|&v| 1.0 - v).sum::<f64>())
}

/// Dense joint distribution over token grids (`dims[l]` tokens per level).
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable<F> {
    dims: Vec<usize>,
    probs: Vec<F>,
}

impl<F: Scalar> JointTable<F> {
    pub fn new(dims: Vec<usize>, probs: Vec<F>) -> Result<Self> {
        let size: usize = dims.iter().product();
        if dims.is_empty() || size == 0 {
            return Err(Error::invalid("joint table needs non-empty dimensions"));
        }
        if probs.len() != size {
            return Err(Error::invalid(format!(
                "expected {size} cells, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < F::zero()) {
            return Err(Error::invalid("probabilities must be finite and >= 0"));
        }
        Ok(JointTable { dims, probs })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, flat: usize) -> F {
        self.probs[flat]
    }

    pub fn probs(&self) -> &[F] {
        &self.probs
    }

    pub fn total(&self) -> F {
        let mut s = F::zero();
        for &p in &self.probs {
            s += p;
        }
        s
    }

    /// Token of `flat` at `level` (row-major, level 0 slowest).
    pub fn token_at(&self, flat: usize, level: usize) -> usize {
        let mut rem = flat;
        for l in (0..self.dims.len()).rev() {
            let t = rem % self.dims[l];
            rem /= self.dims[l];
            if l == level {
                return t;
            }
        }
        unreachable!("level within dims")
    }
}

/// Marginalizes the joint per level and returns the product distribution
/// over the full grid.
pub fn product_of_marginals<F: Scalar>(p_star: &JointTable<F>) -> Result<JointTable<F>> {
    let total = p_star.total().to_double();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "joint must sum to 1 (got {total})"
        )));
    }
    let levels = p_star.dims().len();
    let mut marginals: Vec<Vec<F>> = p_star.dims().iter().map(|&d| vec![F::zero(); d]).collect();
    for flat in 0..p_star.len() {
        let p = p_star.prob(flat);
        for (l, marg) in marginals.iter_mut().enumerate() {
            marg[p_star.token_at(flat, l)] += p;
        }
    }
    let mut probs = vec![F::one(); p_star.len()];
    for flat in 0..p_star.len() {
        for l in 0..levels {
            probs[flat] *= marginals[l][p_star.token_at(flat, l)];
        }
    }
    JointTable::new(p_star.dims().to_vec(), probs)
}

/// Pearson chi-square divergence `sum (p_tilde - p_star)^2 / p_star`.
///
/// The evaluation support is every cell where either distribution is
/// positive; a cell with `p_star = 0` but `p_tilde > 0` is outside the
/// divergence's domain.
pub fn chi_square<F: Scalar>(p_star: &JointTable<F>, p_tilde: &JointTable<F>) -> Result<F> {
    if p_star.dims() != p_tilde.dims() {
        return Err(Error::invalid("distributions have different shapes"));
    }
    let mut acc = F::zero();
    for flat in 0..p_star.len() {
        let ps = p_star.prob(flat);
        let pt = p_tilde.prob(flat);
        if ps == F::zero() {
            if pt > F::zero() {
                return Err(Error::Domain(format!(
                    "cell {flat} has p_star = 0 with p_tilde > 0"
                )));
            }
            continue;
        }
        let d = pt - ps;
        acc += d * d / ps;
    }
    Ok(acc)
}

/// An exact joint, its marginal-product approximation, and the sequence ->
/// item map (possibly many-to-one).
#[derive(Debug, Clone)]
pub struct DistributionPair<F> {
    pub p_star: JointTable<F>,
    pub p_tilde: JointTable<F>,
    /// `item_map[flat sequence index] = item`, onto `0..n_items`.
    pub item_map: Vec<usize>,
    pub n_items: usize,
}

impl<F: Scalar> DistributionPair<F> {
    pub fn new(
        p_star: JointTable<F>,
        p_tilde: JointTable<F>,
        item_map: Vec<usize>,
    ) -> Result<Self> {
        if p_star.dims() != p_tilde.dims() {
            return Err(Error::invalid("distributions have different shapes"));
        }
        if item_map.len() != p_star.len() {
            return Err(Error::invalid("item map must cover every sequence"));
        }
        for (flat, table) in [(&p_star, "p_star"), (&p_tilde, "p_tilde")] {
            let total = flat.total().to_double();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!("{table} sums to {total}, not 1")));
            }
        }
        let n_items = item_map.iter().max().map_or(0, |m| m + 1);
        let mut hit = vec![false; n_items];
        for &i in &item_map {
            hit[i] = true;
        }
        if hit.iter().any(|h| !h) {
            return Err(Error::invalid("item map must be onto 0..n_items"));
        }
        Ok(DistributionPair {
            p_star,
            p_tilde,
            item_map,
            n_items,
        })
    }

    /// Builds the factorized pair for a joint, with an identity item map.
    pub fn factorized(p_star: JointTable<F>) -> Result<Self> {
        let p_tilde = product_of_marginals(&p_star)?;
        let n = p_star.len();
        DistributionPair::new(p_star, p_tilde, (0..n).collect())
    }

    /// Same, with an explicit item map.
    pub fn factorized_with_map(p_star: JointTable<F>, item_map: Vec<usize>) -> Result<Self> {
        let p_tilde = product_of_marginals(&p_star)?;
        DistributionPair::new(p_star, p_tilde, item_map)
    }
}

/// Item-level distortion report for one distribution pair.
#[derive(Debug, Clone, Serialize)]
pub struct ShiftReport {
    /// Chi-square divergence between the sequence-level joints.
    pub chi_square: f64,
    /// `(p_tilde(i) - p_star(i))^2 / p_star(i)` per item.
    pub per_item_terms: Vec<f64>,
    /// `chi_square / n_items`.
    pub bound: f64,
    pub witness_item: usize,
    pub max_term: f64,
    /// Sum of the per-item terms (grouped chi-square, data-processing side).
    pub grouped_sum: f64,
}

impl ShiftReport {
    /// The claimed existence bound: some item's term reaches chi^2 / |I|.
    pub fn bound_holds(&self) -> bool {
        self.max_term >= self.bound
    }

    /// The grouped (data-processing) direction: the sequence-level
    /// chi-square dominates the summed item-level terms.
    pub fn grouping_holds(&self) -> bool {
        self.chi_square >= self.grouped_sum - 1e-12 * self.chi_square.abs().max(1.0)
    }
}

/// Aggregates both distributions to item level and evaluates the
/// worst-item distortion against `chi_square / n_items`.
pub fn verify_theorem2<F: Scalar>(pair: &DistributionPair<F>) -> Result<ShiftReport> {
    let chi = chi_square(&pair.p_star, &pair.p_tilde)?.to_double();
    let mut star_items = vec![0.0f64; pair.n_items];
    let mut tilde_items = vec![0.0f64; pair.n_items];
    for flat in 0..pair.p_star.len() {
        let item = pair.item_map[flat];
        star_items[item] += pair.p_star.prob(flat).to_double();
        tilde_items[item] += pair.p_tilde.prob(flat).to_double();
    }
    let mut per_item_terms = Vec::with_capacity(pair.n_items);
    for i in 0..pair.n_items {
        if star_items[i] <= 0.0 {
            return Err(Error::Domain(format!("item {i} has zero p_star mass")));
        }
        let d = tilde_items[i] - star_items[i];
        per_item_terms.push(d * d / star_items[i]);
    }
    let (witness_item, max_term) = per_item_terms
        .iter()
        .enumerate()
        .fold((0usize, f64::NEG_INFINITY), |(wi, wm), (i, &t)| {
            if t > wm {
                (i, t)
            } else {
                (wi, wm)
            }
        });
    let grouped_sum: f64 = per_item_terms.iter().sum();
    Ok(ShiftReport {
        chi_square: chi,
        bound: chi / pair.n_items as f64,
        per_item_terms,
        witness_item,
        max_term,
        grouped_sum,
    })
}

/// How sequence -> item maps are sampled in randomized sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiSampling {
    /// One item per sequence (the recommender regime; the existence bound
    /// is provable here).
    Bijective,
    /// Uniformly random many-to-one grouping.
    ManyToOne,
}

/// Strictly positive random joint over `dims` (all-ones Dirichlet via
/// normalized exponentials).
pub fn random_positive_joint(dims: &[usize], rng: &mut impl Rng) -> JointTable<f64> {
    let size: usize = dims.iter().product();
    let mut raw: Vec<f64> = (0..size)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            -u.ln()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    for v in &mut raw {
        *v /= total;
    }
    JointTable::new(dims.to_vec(), raw).expect("normalized positive joint")
}

/// Random sequence -> item map, relabeled to be onto `0..n_items`.
pub fn random_item_map(n_seqs: usize, sampling: PiSampling, rng: &mut impl Rng) -> Vec<usize> {
    let raw: Vec<usize> = match sampling {
        PiSampling::Bijective => return (0..n_seqs).collect(),
        PiSampling::ManyToOne => {
            let m = rng.gen_range(1..=n_seqs);
            (0..n_seqs).map(|_| rng.gen_range(0..m)).collect()
        }
    };
    // relabel image to 0..n_items in first-appearance order
    let mut next = 0usize;
    let mut remap = std::collections::HashMap::new();
    raw.into_iter()
        .map(|v| {
            *remap.entry(v).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            })
        })
        .collect()
}

/// Summary of a randomized theorem-2 sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub instances: usize,
    pub bound_violations: usize,
    pub grouping_violations: usize,
    /// Minimum of `max_term - bound` across instances.
    pub min_margin: f64,
}

/// Runs `instances` random (joint, item-map) pairs with dimensions drawn
/// from `levels x vocab` in {2,3} x {2,3,4}, and counts violations of the
/// existence bound and of the grouped-chi-square direction.
pub fn theorem2_sweep(instances: usize, sampling: PiSampling, seed: u64) -> Result<SweepReport> {
    let mut rng = crate::rng::stream(seed, "theorem2-sweep", 0);
    let mut bound_violations = 0;
    let mut grouping_violations = 0;
    let mut min_margin = f64::INFINITY;
    for _ in 0..instances {
        let levels = rng.gen_range(2..=3usize);
        let vocab = rng.gen_range(2..=4usize);
        let dims = vec![vocab; levels];
        let joint = random_positive_joint(&dims, &mut rng);
        let map = random_item_map(joint.len(), sampling, &mut rng);
        let pair = DistributionPair::factorized_with_map(joint, map)?;
        let report = verify_theorem2(&pair)?;
        if !report.bound_holds() {
            bound_violations += 1;
        }
        if !report.grouping_holds() {
            grouping_violations += 1;
        }
        min_margin = min_margin.min(report.max_term - report.bound);
    }
    Ok(SweepReport {
        instances,
        bound_violations,
        grouping_violations,
        min_margin,
    })
}
