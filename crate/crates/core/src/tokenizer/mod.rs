//! Item tokenization: residual k-means codebooks and semantic-ID tables.
//!
//! Each item's latent vector is quantized level by level: level `l` runs
//! k-means on the residuals left after subtracting the assigned centroids
//! of levels `< l`. The resulting token sequence gets one trailing
//! deduplication token so that the item -> sequence mapping is injective
//! even when quantized prefixes collide.

mod kmeans;
mod trie;

pub use trie::{build_prefix_trie, valid_next_tokens, PrefixTrie};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::scalar::Scalar;

/// Row-major matrix of item latent vectors.
#[derive(Debug, Clone)]
pub struct ItemVectors<F> {
    data: Mat<F>,
}

impl<F: Scalar> ItemVectors<F> {
    pub fn new(count: usize, dim: usize, data: Vec<F>) -> Result<Self> {
        if count == 0 || dim == 0 {
            return Err(Error::invalid("item vectors must be non-empty"));
        }
        if data.len() != count * dim {
            return Err(Error::invalid(format!(
                "expected {} values for {} x {} item vectors, got {}",
                count * dim,
                count,
                dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("item vectors contain non-finite entries"));
        }
        Ok(ItemVectors {
            data: Mat::from_vec(count, dim, data),
        })
    }

    pub fn count(&self) -> usize {
        self.data.rows()
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn vector(&self, item: usize) -> &[F] {
        self.data.row(item)
    }

    pub fn mat(&self) -> &Mat<F> {
        &self.data
    }
}

/// Per-level centroid tables produced by residual k-means.
#[derive(Debug, Clone)]
pub struct Codebooks<F> {
    centroids: Vec<Mat<F>>,
}

impl<F: Scalar> Codebooks<F> {
    pub fn new(centroids: Vec<Mat<F>>) -> Result<Self> {
        if centroids.is_empty() {
            return Err(Error::invalid("codebooks need at least one level"));
        }
        let (k, dim) = (centroids[0].rows(), centroids[0].cols());
        for m in &centroids {
            if m.rows() != k || m.cols() != dim {
                return Err(Error::invalid("codebook levels must share one shape"));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("codebook centroids must be finite"));
            }
        }
        Ok(Codebooks { centroids })
    }

    pub fn levels(&self) -> usize {
        self.centroids.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.centroids[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].cols()
    }

    pub fn level(&self, l: usize) -> &Mat<F> {
        &self.centroids[l]
    }
}

/// Injective item -> token-sequence mapping.
///
/// Sequences have `levels + 1` positions: the semantic tokens followed by
/// one dedup token (0 for every item when no prefixes collide).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticIdTable {
    ids: Vec<Vec<u32>>,
    level_vocab_sizes: Vec<usize>,
}

impl SemanticIdTable {
    pub fn new(ids: Vec<Vec<u32>>, level_vocab_sizes: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("semantic id table is empty"));
        }
        let depth = level_vocab_sizes.len();
        let mut seen = HashMap::new();
        for (item, seq) in ids.iter().enumerate() {
            if seq.len() != depth {
                return Err(Error::invalid(format!(
                    "item {item} has sequence length {} (expected {depth})",
                    seq.len()
                )));
            }
            for (l, &t) in seq.iter().enumerate() {
                if t as usize >= level_vocab_sizes[l] {
                    return Err(Error::invalid(format!(
                        "item {item} token {t} exceeds level-{l} vocabulary {}",
                        level_vocab_sizes[l]
                    )));
                }
            }
            if let Some(prev) = seen.insert(seq.clone(), item) {
                return Err(Error::Integrity(format!(
                    "items {prev} and {item} share the full sequence {seq:?}"
                )));
            }
        }
        Ok(SemanticIdTable {
            ids,
            level_vocab_sizes,
        })
    }

    pub fn item_count(&self) -> usize {
        self.ids.len()
    }

    /// Sequence length including the dedup position.
    pub fn depth(&self) -> usize {
        self.level_vocab_sizes.len()
    }

    pub fn sequence(&self, item: usize) -> &[u32] {
        &self.ids[item]
    }

    pub fn level_vocab_sizes(&self) -> &[usize] {
        &self.level_vocab_sizes
    }

    pub fn sequences(&self) -> impl Iterator<Item = (usize, &[u32])> {
        self.ids.iter().enumerate().map(|(i, s)| (i, s.as_slice()))
    }
}

/// Squared Euclidean distance.
fn dist2<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

/// Index of the nearest centroid row; ties go to the lowest index.
fn nearest_centroid<F: Scalar>(point: &[F], centroids: &Mat<F>) -> usize {
    let mut best = 0;
    let mut best_d = dist2(point, centroids.row(0));
    for c in 1..centroids.rows() {
        let d = dist2(point, centroids.row(c));
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Fits one codebook per level on the residuals of the previous levels.
///
/// Initialization samples `codebook_size` input rows (distinct values when
/// possible) from a stream derived from `seed`, so the result is a pure
/// function of `(vectors, levels, codebook_size, iters, seed)`.
pub fn fit_residual_codebooks<F: Scalar>(
    vectors: &ItemVectors<F>,
    levels: usize,
    codebook_size: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebooks<F>> {
    if levels == 0 {
        return Err(Error::invalid("levels must be >= 1"));
    }
    if iters == 0 {
        return Err(Error::invalid("iters must be >= 1"));
    }
    if codebook_size == 0 || codebook_size > vectors.count() {
        return Err(Error::invalid(format!(
            "codebook_size {} must be in 1..={}",
            codebook_size,
            vectors.count()
        )));
    }

    let n = vectors.count();
    let dim = vectors.dim();
    let mut residuals: Vec<Vec<F>> = (0..n).map(|i| vectors.vector(i).to_vec()).collect();
    let mut books = Vec::with_capacity(levels);

    for level in 0..levels {
        let centroids = kmeans::fit(&residuals, codebook_size, iters, seed, level as u64)?;
        for r in residuals.iter_mut() {
            let c = nearest_centroid(r, &centroids);
            for (x, y) in r.iter_mut().zip(centroids.row(c)) {
                *x -= *y;
            }
        }
        books.push(centroids);
    }

    debug_assert_eq!(books[0].cols(), dim);
    Codebooks::new(books)
}

/// Quantizes every item and appends the dedup token.
///
/// Token `t_l` is the nearest level-`l` centroid of the level-`l` residual.
/// Items sharing all semantic tokens get dedup tokens 0, 1, 2, ... in item
/// order; everyone else gets dedup token 0.
pub fn assign_semantic_ids<F: Scalar>(
    vectors: &ItemVectors<F>,
    books: &Codebooks<F>,
) -> Result<SemanticIdTable> {
    if vectors.dim() != books.dim() {
        return Err(Error::invalid(format!(
            "vector dim {} does not match centroid dim {}",
            vectors.dim(),
            books.dim()
        )));
    }

    let levels = books.levels();
    let mut prefixes: Vec<Vec<u32>> = Vec::with_capacity(vectors.count());
    for item in 0..vectors.count() {
        let mut residual = vectors.vector(item).to_vec();
        let mut seq = Vec::with_capacity(levels + 1);
        for l in 0..levels {
            let c = nearest_centroid(&residual, books.level(l));
            for (x, y) in residual.iter_mut().zip(books.level(l).row(c)) {
                *x -= *y;
            }
            seq.push(c as u32);
        }
        prefixes.push(seq);
    }

    let mut collision_rank: HashMap<&[u32], u32> = HashMap::new();
    let mut ids = Vec::with_capacity(prefixes.len());
    let mut dedup_vocab = 1usize;
    for prefix in &prefixes {
        let rank = collision_rank.entry(prefix.as_slice()).or_insert(0);
        let mut seq = prefix.clone();
        seq.push(*rank);
        dedup_vocab = dedup_vocab.max(*rank as usize + 1);
        *rank += 1;
        ids.push(seq);
    }

    let mut sizes = vec![books.codebook_size(); levels];
    sizes.push(dedup_vocab);
    SemanticIdTable::new(ids, sizes)
}
