//! Leave-one-out evaluation harness: accuracy (HR, NDCG) and diversity
//! (category entropy, catalog coverage) over per-user ranked lists.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::decoding::ScoredList;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One user's split: training history, validation target, test target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    /// Index of the user in the original interaction list.
    pub user: usize,
    pub train: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub users: Vec<UserSplit>,
}

/// Last interaction is the test target, second-to-last the validation
/// target, the rest (truncated to the most recent `max_len`) is training
/// history. Users with fewer than `min_interactions` (or structurally
/// fewer than 3) interactions are dropped.
pub fn leave_one_out_split(
    interactions: &[Vec<usize>],
    max_len: usize,
    min_interactions: usize,
) -> Result<SplitDataset> {
    if interactions.is_empty() {
        return Err(Error::invalid("no interactions"));
    }
    if max_len == 0 {
        return Err(Error::invalid("max_len must be >= 1"));
    }
    let threshold = min_interactions.max(3);
    let mut users = Vec::new();
    for (user, seq) in interactions.iter().enumerate() {
        if seq.len() < threshold {
            continue;
        }
        let n = seq.len();
        let test = seq[n - 1];
        let val = seq[n - 2];
        let head = &seq[..n - 2];
        let start = head.len().saturating_sub(max_len);
        users.push(UserSplit {
            user,
            train: head[start..].to_vec(),
            val,
            test,
        });
    }
    if users.is_empty() {
        return Err(Error::invalid(
            "every user fell below the interaction threshold",
        ));
    }
    Ok(SplitDataset { users })
}

fn check_aligned<F: Scalar>(lists: &[ScoredList<F>], targets: &[usize]) -> Result<()> {
    if lists.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} lists for {} targets",
            lists.len(),
            targets.len()
        )));
    }
    if lists.is_empty() {
        return Err(Error::invalid("no users to evaluate"));
    }
    Ok(())
}

/// Fraction of users whose target appears in their top-K list.
pub fn hit_rate_at_k<F: Scalar>(
    lists: &[ScoredList<F>],
    targets: &[usize],
    k: usize,
) -> Result<f64> {
    check_aligned(lists, targets)?;
    let mut hits = 0usize;
    for (list, &target) in lists.iter().zip(targets) {
        if list.len() < k {
            return Err(Error::invalid(format!(
                "list of length {} is too short for K={k}",
                list.len()
            )));
        }
        if list.items().take(k).any(|i| i == target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / lists.len() as f64)
}

/// Single-relevant-item NDCG: `1 / log2(rank + 1)` when the target ranks
/// within K, else 0; averaged over users.
pub fn ndcg_at_k<F: Scalar>(lists: &[ScoredList<F>], targets: &[usize], k: usize) -> Result<f64> {
    check_aligned(lists, targets)?;
    let mut total = 0.0;
    for (list, &target) in lists.iter().zip(targets) {
        if list.len() < k {
            return Err(Error::invalid(format!(
                "list of length {} is too short for K={k}",
                list.len()
            )));
        }
        if let Some(idx) = list.items().take(k).position(|i| i == target) {
            let rank = idx + 1;
            total += 1.0 / ((rank + 1) as f64).log2();
        }
    }
    Ok(total / lists.len() as f64)
}

/// Shannon entropy (nats) of the pooled category-exposure distribution of
/// everyone's top-K items.
pub fn entropy_at_k<F: Scalar>(
    lists: &[ScoredList<F>],
    categories: &[usize],
    k: usize,
) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::invalid("no users to evaluate"));
    }
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    let mut total = 0u64;
    for list in lists {
        for item in list.items().take(k) {
            let cat = *categories.get(item).ok_or_else(|| {
                Error::invalid(format!("item {item} has no category"))
            })?;
            *counts.entry(cat).or_insert(0) += 1;
            total += 1;
        }
    }
    let mut h = 0.0;
    for &c in counts.values() {
        let p = c as f64 / total as f64;
        h -= p * p.ln();
    }
    Ok(h)
}

/// Fraction of the catalog appearing in at least one top-K list.
pub fn coverage<F: Scalar>(lists: &[ScoredList<F>], item_count: usize, k: usize) -> Result<f64> {
    if item_count == 0 {
        return Err(Error::invalid("item_count must be >= 1"));
    }
    let mut seen = HashSet::new();
    for list in lists {
        seen.extend(list.items().take(k));
    }
    Ok(seen.len() as f64 / item_count as f64)
}

/// All metrics for one paradigm's decode output.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Entropy@K in nats.
    pub entropy: BTreeMap<usize, f64>,
    /// Entropy@K in bits, for convenience.
    pub entropy_bits: BTreeMap<usize, f64>,
    /// Coverage at the largest K.
    pub coverage: f64,
}

/// Evaluates HR/NDCG/Entropy at each K in `ks` and coverage at max K.
pub fn compute_metrics<F: Scalar>(
    lists: &[ScoredList<F>],
    targets: &[usize],
    categories: &[usize],
    item_count: usize,
    ks: &[usize],
) -> Result<MetricsReport> {
    if ks.is_empty() {
        return Err(Error::invalid("need at least one K"));
    }
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    let mut entropy = BTreeMap::new();
    let mut entropy_bits = BTreeMap::new();
    for &k in ks {
        hr.insert(k, hit_rate_at_k(lists, targets, k)?);
        ndcg.insert(k, ndcg_at_k(lists, targets, k)?);
        let e = entropy_at_k(lists, categories, k)?;
        entropy.insert(k, e);
        entropy_bits.insert(k, e / std::f64::consts::LN_2);
    }
    let max_k = *ks.iter().max().unwrap();
    Ok(MetricsReport {
        hr,
        ndcg,
        entropy,
        entropy_bits,
        coverage: coverage(lists, item_count, max_k)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(items: &[usize]) -> ScoredList<f64> {
        let entries: Vec<(usize, f64)> = items
            .iter()
            .enumerate()
            .map(|(r, &i)| (i, -(r as f64)))
            .collect();
        ScoredList::new(entries).unwrap()
    }

    #[test]
    fn split_definition_and_truncation() {
        let interactions = vec![vec![10, 11, 12, 13, 14]];
        let split = leave_one_out_split(&interactions, 20, 3).unwrap();
        assert_eq!(split.users[0].train, vec![10, 11, 12]);
        assert_eq!(split.users[0].val, 13);
        assert_eq!(split.users[0].test, 14);

        let split = leave_one_out_split(&interactions, 2, 3).unwrap();
        assert_eq!(split.users[0].train, vec![11, 12]);
    }

    #[test]
    fn short_users_dropped() {
        let interactions = vec![vec![1, 2], vec![1, 2, 3, 4, 5]];
        let split = leave_one_out_split(&interactions, 20, 3).unwrap();
        assert_eq!(split.users.len(), 1);
        assert_eq!(split.users[0].user, 1);
        // threshold 5 keeps only length >= 5
        let split = leave_one_out_split(&interactions, 20, 5).unwrap();
        assert_eq!(split.users.len(), 1);
        assert!(leave_one_out_split(&[vec![1, 2]], 20, 3).is_err());
    }

    #[test]
    fn hit_rate_examples() {
        let lists = vec![list(&[7, 1, 2, 3, 4])];
        assert_eq!(hit_rate_at_k(&lists, &[7], 1).unwrap(), 1.0);
        let lists = vec![list(&[0, 1, 2, 3, 4, 7])];
        assert_eq!(hit_rate_at_k(&lists, &[7], 5).unwrap(), 0.0);
        let lists = vec![list(&[7, 1, 2, 3, 4]), list(&[0, 1, 2, 3, 4])];
        assert_eq!(hit_rate_at_k(&lists, &[7, 9], 5).unwrap(), 0.5);
    }

    #[test]
    fn ndcg_examples() {
        let lists = vec![list(&[7, 1, 2])];
        assert_eq!(ndcg_at_k(&lists, &[7], 3).unwrap(), 1.0);
        let lists = vec![list(&[1, 7, 2])];
        let expect = 1.0 / 3.0f64.log2();
        assert!((ndcg_at_k(&lists, &[7], 3).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.6309).abs() < 1e-4);
        let lists = vec![list(&[1, 2, 3])];
        assert_eq!(ndcg_at_k(&lists, &[7], 3).unwrap(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        // items 0,1 in category 0; 2,3 in category 1
        let cats = vec![0, 0, 1, 1];
        let lists = vec![list(&[0, 1])];
        assert_eq!(entropy_at_k(&lists, &cats, 2).unwrap(), 0.0);
        let lists = vec![list(&[0, 2])];
        let h = entropy_at_k(&lists, &cats, 2).unwrap();
        assert!((h - 2.0f64.ln()).abs() < 1e-12);
        // 75%/25% exposure
        let lists = vec![list(&[0, 1]), list(&[0, 2])];
        let h = entropy_at_k(&lists, &cats, 2).unwrap();
        let expect = -(0.75f64.ln() * 0.75 + 0.25f64.ln() * 0.25);
        assert!((h - expect).abs() < 1e-12);
        assert!((expect - 0.5623).abs() < 1e-4);
        // uncategorized item
        let lists = vec![list(&[9])];
        assert!(entropy_at_k(&lists, &cats, 1).is_err());
    }

    #[test]
    fn entropy_invariant_under_relabeling() {
        let lists = vec![list(&[0, 1, 2]), list(&[2, 3, 0])];
        let cats = vec![0, 1, 2, 0];
        let relabeled = vec![5, 9, 4, 5];
        let a = entropy_at_k(&lists, &cats, 3).unwrap();
        let b = entropy_at_k(&lists, &relabeled, 3).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn coverage_examples() {
        let lists = vec![list(&[0, 1, 2]); 4];
        assert_eq!(coverage(&lists, 12, 3).unwrap(), 0.25);
        let lists = vec![list(&[0, 1]), list(&[2, 3])];
        assert_eq!(coverage(&lists, 4, 2).unwrap(), 1.0);
        // bounded by users * K / item_count
        let lists = vec![list(&[0, 1]), list(&[2, 3])];
        let c = coverage(&lists, 100, 2).unwrap();
        assert!(c <= 2.0 * 2.0 / 100.0);
    }

    #[test]
    fn monotone_in_k_and_discount_ordering() {
        let lists = vec![
            list(&[3, 1, 4, 1_0, 5, 9, 2, 6, 8, 7]),
            list(&[2, 7, 1, 8, 0, 9, 3, 6, 5, 4]),
        ];
        let targets = vec![4, 9];
        let mut prev_hr = 0.0;
        let mut prev_ndcg = 0.0;
        for k in [1, 5, 10] {
            let hr = hit_rate_at_k(&lists, &targets, k).unwrap();
            let nd = ndcg_at_k(&lists, &targets, k).unwrap();
            assert!(hr >= prev_hr);
            assert!(nd >= prev_ndcg);
            assert!(nd <= hr + 1e-15);
            prev_hr = hr;
            prev_ndcg = nd;
        }
    }

    /// Naive one-pass reference implementations on random fixtures.
    #[test]
    fn metrics_match_naive_reference() {
        use rand::Rng;
        let mut rng = crate::rng::stream(23, "metrics-oracle", 0);
        for _ in 0..20 {
            let n_items = rng.gen_range(5..30);
            let n_users = rng.gen_range(1..10);
            let k = rng.gen_range(1..=5usize);
            let cats: Vec<usize> = (0..n_items).map(|_| rng.gen_range(0..4)).collect();
            let mut lists = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..n_users {
                let mut items: Vec<usize> = (0..n_items).collect();
                for i in (1..items.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    items.swap(i, j);
                }
                items.truncate(k + 3);
                lists.push(list(&items));
                targets.push(rng.gen_range(0..n_items));
            }
            // naive reference
            let mut hits = 0.0;
            let mut ndcg = 0.0;
            let mut distinct = HashSet::new();
            let mut cat_counts: BTreeMap<usize, f64> = BTreeMap::new();
            let mut pool = 0.0;
            for (l, &t) in lists.iter().zip(&targets) {
                let top: Vec<usize> = l.items().take(k).collect();
                if top.contains(&t) {
                    hits += 1.0;
                    let rank = top.iter().position(|&i| i == t).unwrap() + 1;
                    ndcg += 1.0 / ((rank as f64) + 1.0).log2();
                }
                for &i in &top {
                    distinct.insert(i);
                    *cat_counts.entry(cats[i]).or_insert(0.0) += 1.0;
                    pool += 1.0;
                }
            }
            let mut ent = 0.0;
            for &c in cat_counts.values() {
                let p = c / pool;
                ent -= p * p.ln();
            }
            assert_eq!(
                hit_rate_at_k(&lists, &targets, k).unwrap(),
                hits / n_users as f64
            );
            assert!(
                (ndcg_at_k(&lists, &targets, k).unwrap() - ndcg / n_users as f64).abs() < 1e-12
            );
            assert!((entropy_at_k(&lists, &cats, k).unwrap() - ent).abs() < 1e-12);
            assert_eq!(
                coverage(&lists, n_items, k).unwrap(),
                distinct.len() as f64 / n_items as f64
            );
        }
    }
}
