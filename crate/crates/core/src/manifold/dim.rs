//! Maximum-likelihood intrinsic dimension from nearest-neighbour distances.
//!
//! Per anchor `x` with sorted neighbour distances `T_1 ≤ … ≤ T_k`:
//!
//! ```text
//! 1 / m̂_k(x) = (1 / (k−1)) Σ_{j<k} ln(T_k(x) / T_j(x))
//! ```
//!
//! The pool estimate averages the inverse per-anchor estimates and inverts
//! the mean (harmonic aggregation).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::Tensor;

pub const DEFAULT_NEIGHBORS: usize = 20;

/// Rows with duplicates removed, keeping the first occurrence.
fn unique_rows(pool: &Tensor) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.rows()).collect();
    let cmp_rows = |a: &usize, b: &usize| {
        pool.row(*a)
            .iter()
            .zip(pool.row(*b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    idx.sort_by(|a, b| cmp_rows(a, b).then(a.cmp(b)));
    idx.dedup_by(|a, b| cmp_rows(a, b).is_eq());
    idx.sort_unstable();
    idx
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Inverse MLE estimate `1/m̂_k` for one anchor.
fn inverse_estimate(pool: &Tensor, rows: &[usize], anchor: usize, k: usize) -> f64 {
    let x = pool.row(rows[anchor]);
    let mut d: Vec<f64> = rows
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != anchor)
        .map(|(_, &r)| sq_dist(x, pool.row(r)))
        .collect();
    d.select_nth_unstable_by(k - 1, f64::total_cmp);
    let nearest = &mut d[..k];
    nearest.sort_unstable_by(f64::total_cmp);
    // ln of distance ratios = half the ln of squared ratios
    let ln_tk = 0.5 * nearest[k - 1].ln();
    nearest[..k - 1]
        .iter()
        .map(|&t| ln_tk - 0.5 * t.ln())
        .sum::<f64>()
        / (k - 1) as f64
}

/// Estimates the intrinsic dimension of the rows of `pool` from `k` nearest
/// neighbours. Exact duplicate rows are dropped first.
pub fn estimate_intrinsic_dim(pool: &Tensor, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::config("k", "needs at least 2 neighbours"));
    }
    if !pool.all_finite() {
        return Err(Error::NonFiniteInput("dimension pool".into()));
    }
    let rows = unique_rows(pool);
    let dropped = pool.rows() - rows.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} duplicate rows before dimension estimation");
    }
    if rows.len() <= 1 && pool.rows() > 1 {
        return Err(Error::Empty("every pool row is a duplicate of the first".into()));
    }
    if rows.len() <= k {
        return Err(Error::config(
            "k",
            format!("needs more than {k} distinct rows, pool has {}", rows.len()),
        ));
    }
    // per-anchor terms come back in anchor order, so the sum is order-fixed
    let inverse: Vec<f64> = (0..rows.len())
        .into_par_iter()
        .map(|a| inverse_estimate(pool, &rows, a, k))
        .collect();
    let mean_inverse = inverse.iter().sum::<f64>() / inverse.len() as f64;
    if !(mean_inverse.is_finite() && mean_inverse > 0.0) {
        return Err(Error::NonFiniteInput("neighbour distance ratios".into()));
    }
    Ok(1.0 / mean_inverse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn segment_is_one_dimensional() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                let t: f64 = rng.gen();
                vec![t, 2.0 * t, -t]
            })
            .collect();
        let m = estimate_intrinsic_dim(&Tensor::from_rows(&rows).unwrap(), 20).unwrap();
        assert!((0.8..=1.3).contains(&m), "{m}");
    }

    #[test]
    fn curved_patch_in_twenty_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..5000)
            .map(|_| {
                let (a, b, c): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
                let mut r = vec![0.0; 20];
                r[0] = a;
                r[1] = b;
                r[2] = c;
                r[3] = (a * 3.0).sin();
                r[7] = b * c;
                r[12] = (a + c).cos();
                r
            })
            .collect();
        let m = estimate_intrinsic_dim(&Tensor::from_rows(&rows).unwrap(), 20).unwrap();
        assert!((2.5..=3.6).contains(&m), "{m}");
    }

    #[test]
    fn duplicates_are_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut rows: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let clean = estimate_intrinsic_dim(&Tensor::from_rows(&rows).unwrap(), 10).unwrap();
        rows.extend(rows.clone().into_iter().take(50));
        let dup = estimate_intrinsic_dim(&Tensor::from_rows(&rows).unwrap(), 10).unwrap();
        assert_eq!(clean, dup);
    }

    #[test]
    fn all_duplicates_is_an_error() {
        let pool = Tensor::matrix(30, 2, [0.5, 0.5].repeat(30)).unwrap();
        assert!(estimate_intrinsic_dim(&pool, 5).is_err());
    }

    #[test]
    fn too_few_rows() {
        let pool = Tensor::matrix(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 6.0]).unwrap();
        assert!(estimate_intrinsic_dim(&pool, 3).is_err());
        assert!(estimate_intrinsic_dim(&pool, 1).is_err());
    }
}
