//! Seeded Lloyd iterations used by the residual quantizer.

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::mat::Mat;
use crate::rng::stream;
use crate::scalar::Scalar;

/// Runs k-means on `points`, returning a `k x dim` centroid matrix.
///
/// Init picks `k` rows of the input via a seeded shuffle, preferring rows
/// with distinct values so duplicated points do not collapse centroids.
/// Empty clusters are re-seeded to the point currently farthest from its
/// centroid. Ties in the nearest-centroid assignment go to the lowest
/// centroid index.
pub fn fit<F: Scalar>(
    points: &[Vec<F>],
    k: usize,
    iters: usize,
    seed: u64,
    level: u64,
) -> Result<Mat<F>> {
    let n = points.len();
    let dim = points[0].len();
    let mut rng = stream(seed, "kmeans-init", level);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if chosen.iter().all(|&j| points[j] != points[i]) {
            chosen.push(i);
        }
    }
    for &i in &order {
        if chosen.len() == k {
            break;
        }
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }

    let mut centroids = Mat::zeros(k, dim);
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(&points[i]);
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let c = nearest(p, &centroids);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }

        let mut sums: Mat<F> = Mat::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &x) in sums.row_mut(assign[i]).iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = F::one() / F::from_usize(counts[c]).unwrap();
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // re-seed to the globally worst-quantized point
                let far = farthest_point(points, &assign, &centroids);
                centroids.row_mut(c).copy_from_slice(&points[far]);
                changed = true;
            }
        }

        if !changed {
            break;
        }
    }

    Ok(centroids)
}

fn nearest<F: Scalar>(p: &[F], centroids: &Mat<F>) -> usize {
    let mut best = 0;
    let mut best_d = dist2(p, centroids.row(0));
    for c in 1..centroids.rows() {
        let d = dist2(p, centroids.row(c));
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn farthest_point<F: Scalar>(points: &[Vec<F>], assign: &[usize], centroids: &Mat<F>) -> usize {
    let mut far = 0;
    let mut far_d = F::neg_infinity();
    for (i, p) in points.iter().enumerate() {
        let d = dist2(p, centroids.row(assign[i]));
        if d > far_d {
            far = i;
            far_d = d;
        }
    }
    far
}

fn dist2<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}
