//! Trie-constrained decoders.
//!
//! All decoders consume a [`StepScorer`] (conditional next-token
//! log-probabilities over the full level vocabulary) so that trained
//! models and hand-built probability tables run through identical code.
//! Step probabilities are optionally renormalized over the trie-valid
//! tokens, which makes exact search a proper distribution over leaves.
//!
//! Tie-breaking everywhere: score descending, then token sequence
//! ascending, then item index ascending.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mat::{log_sum_exp, vecmat};
use crate::model::{ar_logits_from_hidden, ModelParams, Session};
use crate::scalar::Scalar;
use crate::tokenizer::{PrefixTrie, SemanticIdTable};

/// Beam decoding settings.
#[derive(Debug, Clone)]
pub struct BeamConfig {
    /// Maximum partial sequences kept per step.
    pub beam_size: usize,
    /// Items returned.
    pub top_k: usize,
    /// Renormalize step probabilities over trie-valid tokens.
    pub renormalize_over_valid: bool,
}

impl BeamConfig {
    pub fn new(beam_size: usize, top_k: usize) -> Self {
        BeamConfig {
            beam_size,
            top_k,
            renormalize_over_valid: true,
        }
    }
}

/// Ranked `(item, log-score)` list, scores non-increasing, items unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredList<F> {
    entries: Vec<(usize, F)>,
}

impl<F: Scalar> ScoredList<F> {
    pub fn new(entries: Vec<(usize, F)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for w in entries.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::Integrity("scores must be non-increasing".into()));
            }
        }
        for (item, _) in &entries {
            if !seen.insert(*item) {
                return Err(Error::Integrity(format!("duplicate item {item}")));
            }
        }
        Ok(ScoredList { entries })
    }

    pub fn entries(&self) -> &[(usize, F)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(i, _)| *i)
    }

    /// Top-k item set.
    pub fn top_set(&self, k: usize) -> std::collections::HashSet<usize> {
        self.entries.iter().take(k).map(|(i, _)| *i).collect()
    }
}

/// Conditional next-level log-probabilities for an autoregressive model
/// (or a stand-in table).
pub trait StepScorer<F: Scalar> {
    /// Log-probabilities over the full vocabulary of level `prefix.len()`,
    /// conditioned on the user context and the given prefix.
    fn step_logprobs(&mut self, prefix: &[u32]) -> Result<Vec<F>>;
}

/// [`StepScorer`] over a trained model, with key/value reuse across
/// prefixes sharing a common stem (decode order is mostly depth-first, so
/// switching costs one or two incremental positions).
pub struct ArScorer<'a, F: Scalar> {
    params: &'a ModelParams<F>,
    session: Session<'a, F>,
    ctx_positions: usize,
    cur_prefix: Vec<u32>,
}

impl<'a, F: Scalar> ArScorer<'a, F> {
    pub fn new(params: &'a ModelParams<F>, context: &[u32]) -> Result<Self> {
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
        let layout = params.layout();
        let mut session = Session::new(params);
        session.advance(layout.bos())?;
        for &t in context {
            if t as usize >= layout.token_count() {
                return Err(Error::invalid(format!("context token {t} out of range")));
            }
            session.advance(t as usize)?;
        }
        let ctx_positions = session.len();
        Ok(ArScorer {
            params,
            session,
            ctx_positions,
            cur_prefix: Vec::new(),
        })
    }
}

impl<'a, F: Scalar> StepScorer<F> for ArScorer<'a, F> {
    fn step_logprobs(&mut self, prefix: &[u32]) -> Result<Vec<F>> {
        let depth = self.params.cfg.depth();
        if prefix.len() >= depth {
            return Err(Error::invalid(format!(
                "prefix length {} must be < depth {depth}",
                prefix.len()
            )));
        }
        let layout = self.params.layout();
        let common = self
            .cur_prefix
            .iter()
            .zip(prefix.iter())
            .take_while(|(a, b)| a == b)
            .count();
        self.session.truncate(self.ctx_positions + common);
        for (l, &t) in prefix.iter().enumerate().skip(common) {
            if t as usize >= layout.level_size(l) {
                return Err(Error::invalid(format!(
                    "prefix token {t} out of range at level {l}"
                )));
            }
            self.session.advance(layout.global(l, t))?;
        }
        self.cur_prefix = prefix.to_vec();
        let mut logits =
            ar_logits_from_hidden(self.params, self.session.last_hidden(), prefix.len());
        let lse = log_sum_exp(&logits);
        for v in &mut logits {
            *v -= lse;
        }
        Ok(logits)
    }
}

/// Hand-built scorer over explicit step distributions, keyed by prefix.
/// Useful for worked examples and tests.
#[derive(Debug, Clone, Default)]
pub struct TableScorer<F> {
    dists: BTreeMap<Vec<u32>, Vec<F>>,
}

impl<F: Scalar> TableScorer<F> {
    pub fn new() -> Self {
        TableScorer {
            dists: BTreeMap::new(),
        }
    }

    /// Registers the step distribution (probabilities) at a prefix.
    pub fn insert(&mut self, prefix: &[u32], probs: &[f64]) {
        self.dists.insert(
            prefix.to_vec(),
            probs.iter().map(|&p| F::of(p.ln())).collect(),
        );
    }

    pub fn from_steps(steps: &[(&[u32], &[f64])]) -> Self {
        let mut s = Self::new();
        for (p, d) in steps {
            s.insert(p, d);
        }
        s
    }
}

impl<F: Scalar> StepScorer<F> for TableScorer<F> {
    fn step_logprobs(&mut self, prefix: &[u32]) -> Result<Vec<F>> {
        self.dists
            .get(prefix)
            .cloned()
            .ok_or_else(|| Error::Lookup(format!("no step distribution at prefix {prefix:?}")))
    }
}

#[derive(Debug, Clone)]
struct Cand<F> {
    node: usize,
    path: Vec<u32>,
    score: F,
}

fn cand_order<F: Scalar>(a: &Cand<F>, b: &Cand<F>) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.path.cmp(&b.path))
}

fn masked_step<F: Scalar>(
    logprobs: &[F],
    children: &[(u32, usize)],
    renormalize: bool,
) -> Vec<(u32, usize, F)> {
    let denom = if renormalize {
        let valid: Vec<F> = children.iter().map(|&(t, _)| logprobs[t as usize]).collect();
        log_sum_exp(&valid)
    } else {
        F::zero()
    };
    children
        .iter()
        .map(|&(t, child)| (t, child, logprobs[t as usize] - denom))
        .collect()
}

/// Breadth-first beam search over the trie: keep the `beam_size` best
/// cumulative-log-probability prefixes per level, return the best
/// `top_k` leaves.
pub fn beam_search<F: Scalar, S: StepScorer<F>>(
    scorer: &mut S,
    trie: &PrefixTrie,
    cfg: &BeamConfig,
) -> Result<ScoredList<F>> {
    if trie.leaf_count() == 0 {
        return Err(Error::invalid("empty trie"));
    }
    if cfg.beam_size == 0 || cfg.top_k == 0 {
        return Err(Error::invalid("beam_size and top_k must be >= 1"));
    }
    let mut frontier = vec![Cand {
        node: PrefixTrie::ROOT,
        path: Vec::new(),
        score: F::zero(),
    }];
    for _level in 0..trie.depth() {
        let mut next = Vec::new();
        for cand in &frontier {
            let lps = scorer.step_logprobs(&cand.path)?;
            for (t, child, lp) in
                masked_step(&lps, trie.children(cand.node), cfg.renormalize_over_valid)
            {
                let mut path = cand.path.clone();
                path.push(t);
                next.push(Cand {
                    node: child,
                    path,
                    score: cand.score + lp,
                });
            }
        }
        next.sort_by(cand_order);
        next.truncate(cfg.beam_size);
        frontier = next;
    }
    let entries = frontier
        .into_iter()
        .take(cfg.top_k)
        .map(|c| {
            let item = trie
                .leaf_item(c.node)
                .ok_or_else(|| Error::Integrity("beam ended on a non-leaf".into()))?;
            Ok((item, c.score))
        })
        .collect::<Result<Vec<_>>>()?;
    ScoredList::new(entries)
}

/// Exhaustive chain-rule scoring of every leaf, the oracle beam search
/// approximates. Shared prefixes are scored once (depth-first walk).
pub fn exact_search<F: Scalar, S: StepScorer<F>>(
    scorer: &mut S,
    trie: &PrefixTrie,
    top_k: usize,
    renormalize_over_valid: bool,
) -> Result<ScoredList<F>> {
    if trie.leaf_count() == 0 {
        return Err(Error::invalid("empty trie"));
    }
    let mut leaves: Vec<Cand<F>> = Vec::with_capacity(trie.leaf_count());
    let mut path: Vec<u32> = Vec::new();
    dfs_score(
        scorer,
        trie,
        PrefixTrie::ROOT,
        F::zero(),
        &mut path,
        renormalize_over_valid,
        &mut leaves,
    )?;
    leaves.sort_by(cand_order);
    let entries = leaves
        .into_iter()
        .take(top_k)
        .map(|c| {
            let item = trie
                .leaf_item(c.node)
                .ok_or_else(|| Error::Integrity("walk ended on a non-leaf".into()))?;
            Ok((item, c.score))
        })
        .collect::<Result<Vec<_>>>()?;
    ScoredList::new(entries)
}

fn dfs_score<F: Scalar, S: StepScorer<F>>(
    scorer: &mut S,
    trie: &PrefixTrie,
    node: usize,
    score: F,
    path: &mut Vec<u32>,
    renorm: bool,
    leaves: &mut Vec<Cand<F>>,
) -> Result<()> {
    if trie.leaf_item(node).is_some() {
        leaves.push(Cand {
            node,
            path: path.clone(),
            score,
        });
        return Ok(());
    }
    let lps = scorer.step_logprobs(path)?;
    for (t, child, lp) in masked_step(&lps, trie.children(node), renorm) {
        path.push(t);
        dfs_score(scorer, trie, child, score + lp, path, renorm, leaves)?;
        path.pop();
    }
    Ok(())
}

/// Chain-rule log-probability of one full semantic-ID sequence, using the
/// same masking/renormalization as the decoders.
pub fn sequence_logprob<F: Scalar, S: StepScorer<F>>(
    scorer: &mut S,
    trie: &PrefixTrie,
    sequence: &[u32],
    renormalize_over_valid: bool,
) -> Result<F> {
    if sequence.len() != trie.depth() {
        return Err(Error::invalid(format!(
            "sequence length {} does not match trie depth {}",
            sequence.len(),
            trie.depth()
        )));
    }
    let mut node = PrefixTrie::ROOT;
    let mut total = F::zero();
    for (level, &t) in sequence.iter().enumerate() {
        let lps = scorer.step_logprobs(&sequence[..level])?;
        let children = trie.children(node);
        let next = trie.child(node, t).ok_or_else(|| {
            Error::invalid(format!("token {t} at level {level} is not a valid path"))
        })?;
        let step = masked_step(&lps, children, renormalize_over_valid)
            .into_iter()
            .find(|&(tok, _, _)| tok == t)
            .map(|(_, _, lp)| lp)
            .expect("child token present in masked step");
        total += step;
        node = next;
    }
    Ok(total)
}

/// Scores every leaf by the sum of its per-level log-marginals and returns
/// the top `k`. The marginals come from one parallel forward pass; invalid
/// combinations are excluded by walking only trie paths.
pub fn parallel_decode_from_marginals<F: Scalar>(
    log_marginals: &[Vec<F>],
    trie: &PrefixTrie,
    top_k: usize,
) -> Result<ScoredList<F>> {
    if trie.leaf_count() == 0 {
        return Err(Error::invalid("empty trie"));
    }
    if log_marginals.len() != trie.depth() {
        return Err(Error::invalid(format!(
            "{} marginal levels for trie depth {}",
            log_marginals.len(),
            trie.depth()
        )));
    }
    let mut leaves: Vec<Cand<F>> = Vec::with_capacity(trie.leaf_count());
    trie.for_each_leaf(|path, item| {
        let mut score = F::zero();
        for (l, &t) in path.iter().enumerate() {
            score += log_marginals[l][t as usize];
        }
        leaves.push(Cand {
            node: item, // node slot reused to carry the item id
            path: path.to_vec(),
            score,
        });
    });
    leaves.sort_by(cand_order);
    let entries: Vec<(usize, F)> = leaves
        .into_iter()
        .take(top_k)
        .map(|c| (c.node, c.score))
        .collect();
    ScoredList::new(entries)
}

/// One-forward-pass parallel decode for a trained model.
pub fn parallel_decode<F: Scalar>(
    params: &ModelParams<F>,
    trie: &PrefixTrie,
    context: &[u32],
    top_k: usize,
) -> Result<ScoredList<F>> {
    let hidden = crate::model::encode(params, context)?;
    let mut log_marginals = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let mut logits = vec![F::zero(); head.cols()];
        vecmat(&hidden, head, &mut logits);
        let lse = log_sum_exp(&logits);
        for v in &mut logits {
            *v -= lse;
        }
        log_marginals.push(logits);
    }
    parallel_decode_from_marginals(&log_marginals, trie, top_k)
}

/// 1-based rank of each of the item's tokens within the step distribution
/// at its true prefix, ranked over trie-valid tokens (ties toward the
/// smaller token index).
pub fn rank_profile<F: Scalar, S: StepScorer<F>>(
    scorer: &mut S,
    trie: &PrefixTrie,
    table: &SemanticIdTable,
    item: usize,
) -> Result<Vec<usize>> {
    if item >= table.item_count() {
        return Err(Error::invalid(format!("item {item} out of range")));
    }
    let seq = table.sequence(item);
    let mut node = PrefixTrie::ROOT;
    let mut ranks = Vec::with_capacity(seq.len());
    for (level, &target) in seq.iter().enumerate() {
        let lps = scorer.step_logprobs(&seq[..level])?;
        let children = trie.children(node);
        let target_lp = lps[target as usize];
        let mut rank = 1;
        for &(t, _) in children {
            let lp = lps[t as usize];
            if lp > target_lp || (lp == target_lp && t < target) {
                rank += 1;
            }
        }
        ranks.push(rank);
        node = trie
            .child(node, target)
            .ok_or_else(|| Error::Lookup(format!("item {item} path invalid at level {level}")))?;
    }
    Ok(ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::build_prefix_trie;

    /// The worked 2-level example: p(a)=0.6, p(b)=0.4, p(.|a)=(0.5,0.5),
    /// p(.|b)=(0.9,0.1). Joint: aa=0.30, ab=0.30, ba=0.36, bb=0.04.
    fn worked_example() -> (TableScorer<f64>, PrefixTrie, SemanticIdTable) {
        let scorer = TableScorer::from_steps(&[
            (&[][..], &[0.6, 0.4][..]),
            (&[0][..], &[0.5, 0.5][..]),
            (&[1][..], &[0.9, 0.1][..]),
        ]);
        let table = SemanticIdTable::new(
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]],
            vec![2, 2],
        )
        .unwrap();
        let trie = build_prefix_trie(&table).unwrap();
        (scorer, trie, table)
    }

    #[test]
    fn beam_one_misses_global_argmax() {
        let (mut scorer, trie, _) = worked_example();
        let list = beam_search(&mut scorer, &trie, &BeamConfig::new(1, 1)).unwrap();
        // greedy commits to token a, then ties break toward aa (item 0)
        assert_eq!(list.entries()[0].0, 0);
        assert!((list.entries()[0].1 - 0.30f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn beam_two_recovers_global_argmax() {
        let (mut scorer, trie, _) = worked_example();
        let list = beam_search(&mut scorer, &trie, &BeamConfig::new(2, 1)).unwrap();
        assert_eq!(list.entries()[0].0, 2); // ba
        assert!((list.entries()[0].1 - 0.36f64.ln()).abs() < 1e-12);

        let exact = exact_search(&mut scorer, &trie, 1, true).unwrap();
        assert_eq!(exact.entries()[0], list.entries()[0]);
    }

    #[test]
    fn saturated_beam_equals_exact_search() {
        let (mut scorer, trie, _) = worked_example();
        let beam = beam_search(&mut scorer, &trie, &BeamConfig::new(4, 4)).unwrap();
        let exact = exact_search(&mut scorer, &trie, 4, true).unwrap();
        assert_eq!(beam.entries().len(), 4);
        for (b, e) in beam.entries().iter().zip(exact.entries()) {
            assert_eq!(b.0, e.0);
            assert!((b.1 - e.1).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_leaf_probabilities_sum_to_one() {
        let (mut scorer, trie, _) = worked_example();
        let exact = exact_search(&mut scorer, &trie, 4, true).unwrap();
        let total: f64 = exact.entries().iter().map(|(_, lp)| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_item_trie_logprob_zero() {
        let table = SemanticIdTable::new(vec![vec![0, 0]], vec![1, 1]).unwrap();
        let trie = build_prefix_trie(&table).unwrap();
        let mut scorer: TableScorer<f64> =
            TableScorer::from_steps(&[(&[][..], &[1.0][..]), (&[0][..], &[1.0][..])]);
        let exact = exact_search(&mut scorer, &trie, 1, true).unwrap();
        assert_eq!(exact.entries()[0].0, 0);
        assert!(exact.entries()[0].1.abs() < 1e-12);
    }

    #[test]
    fn sequence_logprob_two_factor_product() {
        let (mut scorer, trie, _) = worked_example();
        let lp = sequence_logprob(&mut scorer, &trie, &[0, 1], true).unwrap();
        assert!((lp - 0.30f64.ln()).abs() < 1e-12);
        assert!(lp <= 0.0);
        assert!(sequence_logprob(&mut scorer, &trie, &[0], true).is_err());
    }

    #[test]
    fn sequence_logprob_matches_exact_leaf_scores() {
        let (mut scorer, trie, table) = worked_example();
        let exact = exact_search(&mut scorer, &trie, 4, true).unwrap();
        for &(item, score) in exact.entries() {
            let lp = sequence_logprob(&mut scorer, &trie, table.sequence(item), true).unwrap();
            assert_eq!(lp, score);
        }
    }

    #[test]
    fn parallel_marginal_product_erases_correlation() {
        // marginals of the correlated joint 0.4/0.1/0.1/0.4 are uniform
        let table = SemanticIdTable::new(
            vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]],
            vec![2, 2],
        )
        .unwrap();
        let trie = build_prefix_trie(&table).unwrap();
        let log_marginals = vec![
            vec![0.5f64.ln(), 0.5f64.ln()],
            vec![0.5f64.ln(), 0.5f64.ln()],
        ];
        let list = parallel_decode_from_marginals(&log_marginals, &trie, 4).unwrap();
        for &(_, lp) in list.entries() {
            assert!((lp.exp() - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_single_level_equals_exact() {
        let table =
            SemanticIdTable::new(vec![vec![0], vec![1], vec![2]], vec![3]).unwrap();
        let trie = build_prefix_trie(&table).unwrap();
        let probs = [0.2, 0.5, 0.3];
        let mut scorer: TableScorer<f64> = TableScorer::from_steps(&[(&[][..], &probs[..])]);
        let exact = exact_search(&mut scorer, &trie, 3, true).unwrap();
        let log_marginals = vec![probs.iter().map(|p| p.ln()).collect::<Vec<_>>()];
        let par = parallel_decode_from_marginals(&log_marginals, &trie, 3).unwrap();
        for (e, p) in exact.entries().iter().zip(par.entries()) {
            assert_eq!(e.0, p.0);
            assert!((e.1 - p.1).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_profile_worked_example() {
        let (mut scorer, trie, table) = worked_example();
        // item ba: token b ranks 2nd at the root, token a ranks 1st after b
        assert_eq!(rank_profile(&mut scorer, &trie, &table, 2).unwrap(), vec![2, 1]);
        // greedy-consistent item ba? the greedy item is a->a or a->b...
        // item aa: a ranks 1st, then (0.5, 0.5) ties toward token 0 -> rank 1
        assert_eq!(rank_profile(&mut scorer, &trie, &table, 0).unwrap(), vec![1, 1]);
        // rank is bounded by the number of valid tokens
        for item in 0..4 {
            for (l, r) in rank_profile(&mut scorer, &trie, &table, item)
                .unwrap()
                .iter()
                .enumerate()
            {
                let prefix = &table.sequence(item)[..l];
                let valid = crate::tokenizer::valid_next_tokens(&trie, prefix).unwrap();
                assert!(*r <= valid.len());
            }
        }
    }

    #[test]
    fn beam_errors_on_degenerate_inputs() {
        let (mut scorer, trie, _) = worked_example();
        assert!(beam_search(&mut scorer, &trie, &BeamConfig::new(0, 1)).is_err());
        assert!(beam_search::<f64, _>(
            &mut TableScorer::new(),
            &trie,
            &BeamConfig::new(1, 1)
        )
        .is_err());
    }

    #[test]
    fn scored_list_rejects_disorder_and_duplicates() {
        assert!(ScoredList::new(vec![(0, -1.0), (1, -0.5)]).is_err());
        assert!(ScoredList::new(vec![(0, -0.5), (0, -1.0)]).is_err());
        assert!(ScoredList::new(vec![(0, -0.5), (1, -1.0)]).is_ok());
    }
}
