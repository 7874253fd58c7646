//! Prefix trie over valid semantic-ID sequences.
//!
//! Every root-to-leaf path is one item's sequence; decoders use the trie
//! both as the validity mask and as the leaf -> item mapping.

use crate::error::{Error, Result};
use crate::tokenizer::SemanticIdTable;

#[derive(Debug, Clone)]
struct TrieNode {
    /// Children sorted by token, so iteration order is deterministic.
    children: Vec<(u32, usize)>,
    item: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
    depth: usize,
    leaf_count: usize,
}

impl PrefixTrie {
    pub const ROOT: usize = 0;

    /// Sequence length of every root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// Sorted `(token, child-node)` pairs under `node`.
    pub fn children(&self, node: usize) -> &[(u32, usize)] {
        &self.nodes[node].children
    }

    pub fn child(&self, node: usize, token: u32) -> Option<usize> {
        self.nodes[node]
            .children
            .binary_search_by_key(&token, |(t, _)| *t)
            .ok()
            .map(|idx| self.nodes[node].children[idx].1)
    }

    /// Item stored at a leaf node.
    pub fn leaf_item(&self, node: usize) -> Option<usize> {
        self.nodes[node].item
    }

    /// Walks `prefix` from the root, failing on the first invalid token.
    pub fn walk(&self, prefix: &[u32]) -> Result<usize> {
        let mut node = Self::ROOT;
        for (pos, &t) in prefix.iter().enumerate() {
            node = self.child(node, t).ok_or_else(|| {
                Error::Lookup(format!(
                    "prefix {:?} leaves the trie at position {pos} (token {t})",
                    prefix
                ))
            })?;
        }
        Ok(node)
    }

    /// Item reached by a full-depth sequence.
    pub fn lookup_item(&self, sequence: &[u32]) -> Result<usize> {
        if sequence.len() != self.depth {
            return Err(Error::Lookup(format!(
                "sequence length {} does not match trie depth {}",
                sequence.len(),
                self.depth
            )));
        }
        let node = self.walk(sequence)?;
        self.nodes[node]
            .item
            .ok_or_else(|| Error::Integrity("full-depth node is not a leaf".into()))
    }

    /// Calls `f(path, item)` for every leaf, in token-lexicographic order.
    pub fn for_each_leaf(&self, mut f: impl FnMut(&[u32], usize)) {
        let mut path = Vec::with_capacity(self.depth);
        self.visit(Self::ROOT, &mut path, &mut f);
    }

    fn visit(&self, node: usize, path: &mut Vec<u32>, f: &mut impl FnMut(&[u32], usize)) {
        if let Some(item) = self.nodes[node].item {
            f(path, item);
            return;
        }
        for &(t, child) in &self.nodes[node].children {
            path.push(t);
            self.visit(child, path, f);
            path.pop();
        }
    }
}

/// Builds the trie containing exactly the table's sequences.
pub fn build_prefix_trie(table: &SemanticIdTable) -> Result<PrefixTrie> {
    let depth = table.depth();
    let mut nodes = vec![TrieNode {
        children: Vec::new(),
        item: None,
    }];

    for (item, seq) in table.sequences() {
        let mut node = PrefixTrie::ROOT;
        for (pos, &t) in seq.iter().enumerate() {
            let found = nodes[node]
                .children
                .binary_search_by_key(&t, |(tok, _)| *tok);
            node = match found {
                Ok(idx) => nodes[node].children[idx].1,
                Err(idx) => {
                    let child = nodes.len();
                    nodes.push(TrieNode {
                        children: Vec::new(),
                        item: None,
                    });
                    nodes[node].children.insert(idx, (t, child));
                    child
                }
            };
            if pos + 1 == depth {
                if nodes[node].item.is_some() {
                    return Err(Error::Integrity(format!(
                        "duplicate full sequence {seq:?} for item {item}"
                    )));
                }
                nodes[node].item = Some(item);
            } else if nodes[node].item.is_some() {
                return Err(Error::Integrity(
                    "a stored sequence is a prefix of another".into(),
                ));
            }
        }
    }

    Ok(PrefixTrie {
        nodes,
        depth,
        leaf_count: table.item_count(),
    })
}

/// Tokens that may legally follow `prefix`.
pub fn valid_next_tokens(trie: &PrefixTrie, prefix: &[u32]) -> Result<Vec<u32>> {
    let node = trie.walk(prefix)?;
    Ok(trie.children(node).iter().map(|(t, _)| *t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tokenizer::{assign_semantic_ids, fit_residual_codebooks, ItemVectors};
    use rand::Rng;

    fn two_item_table() -> SemanticIdTable {
        SemanticIdTable::new(vec![vec![0, 0], vec![0, 1]], vec![1, 2]).unwrap()
    }

    #[test]
    fn two_item_trie_shape() {
        let trie = build_prefix_trie(&two_item_table()).unwrap();
        assert_eq!(trie.depth(), 2);
        assert_eq!(trie.leaf_count(), 2);
        assert_eq!(valid_next_tokens(&trie, &[]).unwrap(), vec![0]);
        assert_eq!(valid_next_tokens(&trie, &[0]).unwrap(), vec![0, 1]);
        assert_eq!(trie.lookup_item(&[0, 0]).unwrap(), 0);
        assert_eq!(trie.lookup_item(&[0, 1]).unwrap(), 1);
    }

    #[test]
    fn single_item_single_path() {
        let table = SemanticIdTable::new(vec![vec![2, 1, 0]], vec![3, 2, 1]).unwrap();
        let trie = build_prefix_trie(&table).unwrap();
        assert_eq!(trie.leaf_count(), 1);
        assert_eq!(trie.lookup_item(&[2, 1, 0]).unwrap(), 0);
        assert!(trie.lookup_item(&[0, 0, 0]).is_err());
    }

    #[test]
    fn invalid_prefix_is_lookup_error() {
        let trie = build_prefix_trie(&two_item_table()).unwrap();
        assert!(matches!(
            valid_next_tokens(&trie, &[1]),
            Err(Error::Lookup(_))
        ));
    }

    fn table_512() -> SemanticIdTable {
        let mut rng = stream(17, "trie-512", 0);
        let data: Vec<f64> = (0..512 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v = ItemVectors::new(512, 8, data).unwrap();
        let books = fit_residual_codebooks(&v, 4, 16, 10, 3).unwrap();
        assign_semantic_ids(&v, &books).unwrap()
    }

    #[test]
    fn round_trip_512_items() {
        let table = table_512();
        let trie = build_prefix_trie(&table).unwrap();
        assert_eq!(trie.leaf_count(), 512);
        let mut seen = 0;
        trie.for_each_leaf(|_, _| seen += 1);
        assert_eq!(seen, 512);
        for (item, seq) in table.sequences() {
            assert_eq!(trie.lookup_item(seq).unwrap(), item);
        }
    }

    #[test]
    fn valid_next_tokens_matches_filter_oracle() {
        let table = table_512();
        let trie = build_prefix_trie(&table).unwrap();
        let mut rng = stream(5, "prefix-pick", 0);
        for _ in 0..25 {
            let item = rng.gen_range(0..table.item_count());
            let len = rng.gen_range(0..table.depth());
            let prefix = &table.sequence(item)[..len];
            let got = valid_next_tokens(&trie, prefix).unwrap();
            // oracle: filter all stored sequences by the prefix
            let mut expect: Vec<u32> = table
                .sequences()
                .filter(|(_, s)| s.starts_with(prefix))
                .map(|(_, s)| s[len])
                .collect();
            expect.sort_unstable();
            expect.dedup();
            assert_eq!(got, expect, "prefix {prefix:?}");
        }
    }

    #[test]
    fn trie_table_equivalence_exhaustive_prefixes() {
        // every prefix of every stored sequence agrees with the filter oracle
        let table = SemanticIdTable::new(
            vec![vec![0, 0, 0], vec![0, 1, 0], vec![1, 0, 0], vec![1, 0, 1]],
            vec![2, 2, 2],
        )
        .unwrap();
        let trie = build_prefix_trie(&table).unwrap();
        for (_, seq) in table.sequences() {
            for len in 0..seq.len() {
                let prefix = &seq[..len];
                let got = valid_next_tokens(&trie, prefix).unwrap();
                let mut expect: Vec<u32> = table
                    .sequences()
                    .filter(|(_, s)| s.starts_with(prefix))
                    .map(|(_, s)| s[len])
                    .collect();
                expect.sort_unstable();
                expect.dedup();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn duplicate_sequences_rejected_upstream() {
        // the table constructor already refuses duplicates
        assert!(SemanticIdTable::new(vec![vec![0, 0], vec![0, 0]], vec![1, 1]).is_err());
    }
}
