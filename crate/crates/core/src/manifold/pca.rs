use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::tensor::{axpy, dot};
use crate::math::Tensor;

/// Linear manifold: the span of the top principal directions of a pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `n_comp × d_in`, orthonormal rows.
    pub components: Tensor,
    /// Variance fraction captured by each retained component.
    pub explained_variance_ratio: Vec<f64>,
}

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

/// Eigendecomposition of a pool's sample covariance, sorted by decreasing
/// eigenvalue.
struct Spectrum {
    mean: Vec<f64>,
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    order: Vec<usize>,
    rank: usize,
    total: f64,
}

impl Spectrum {
    fn new(pool: &Tensor) -> Result<Self> {
        let (n, d) = (pool.rows(), pool.cols());
        if n < 2 {
            return Err(Error::config("pool", format!("{n} rows cannot support a PCA")));
        }
        if !pool.all_finite() {
            return Err(Error::NonFiniteInput("pca pool".into()));
        }
        let mut mean = vec![0.0; d];
        for row in pool.iter_rows() {
            axpy(1.0, row, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);

        let mut cov = DMatrix::<f64>::zeros(d, d);
        let mut centered = vec![0.0; d];
        for row in pool.iter_rows() {
            for (c, (x, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
                *c = x - m;
            }
            for i in 0..d {
                let ci = centered[i];
                if ci == 0.0 {
                    continue;
                }
                // upper triangle only, mirrored below
                for j in i..d {
                    cov[(i, j)] += ci * centered[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }

        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let rank = order
            .iter()
            .filter(|&&i| eig.eigenvalues[i] > top * RANK_TOL && eig.eigenvalues[i] > 0.0)
            .count();
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        Ok(Self {
            mean,
            eig,
            order,
            rank,
            total,
        })
    }

    fn ratio(&self, k: usize) -> f64 {
        self.eig.eigenvalues[self.order[k]].max(0.0) / self.total
    }

    fn model(self, n_comp: usize) -> Result<PcaModel> {
        if n_comp > self.rank {
            return Err(Error::RankDeficient {
                requested: n_comp,
                rank: self.rank,
            });
        }
        let d = self.mean.len();
        let mut data = Vec::with_capacity(n_comp * d);
        let mut ratios = Vec::with_capacity(n_comp);
        for k in 0..n_comp {
            let col = self.eig.eigenvectors.column(self.order[k]);
            let norm = col.norm();
            let mut v: Vec<f64> = col.iter().map(|x| x / norm).collect();
            if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
                if *first < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            data.extend(v);
            ratios.push(self.ratio(k));
        }
        Ok(PcaModel {
            mean: self.mean,
            components: Tensor::matrix(n_comp, d, data)?,
            explained_variance_ratio: ratios,
        })
    }
}

/// Fits a PCA on the rows of `pool`. Components are the top eigenvectors of
/// the sample covariance, each signed so its first nonzero entry is positive.
pub fn fit_pca(pool: &Tensor, n_comp: usize) -> Result<PcaModel> {
    let (n, d) = (pool.rows(), pool.cols());
    if n_comp == 0 {
        return Err(Error::config("n_comp", "must be at least 1"));
    }
    if n_comp > d {
        return Err(Error::config("n_comp", format!("{n_comp} exceeds input width {d}")));
    }
    if n < n_comp || n < 2 {
        return Err(Error::config(
            "pool",
            format!("{n} rows cannot support {n_comp} components"),
        ));
    }
    Spectrum::new(pool)?.model(n_comp)
}

/// Fits a PCA with the fewest components whose explained variance reaches
/// `fraction` of the total.
pub fn fit_pca_variance(pool: &Tensor, fraction: f64) -> Result<PcaModel> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("retained_variance", format!("{fraction} is not in (0, 1]")));
    }
    let spec = Spectrum::new(pool)?;
    let mut acc = 0.0;
    let mut k = 0;
    while k < spec.rank {
        acc += spec.ratio(k);
        k += 1;
        // tolerance for fractions that are reached exactly
        if acc >= fraction - 1e-12 {
            break;
        }
    }
    spec.model(k.max(1))
}

impl PcaModel {
    pub fn d_in(&self) -> usize {
        self.components.cols()
    }

    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    /// `out = Cᵀ C v` without validation.
    #[inline]
    pub fn project_vector_into(&self, v: &[f64], coeffs: &mut [f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, row) in coeffs.iter_mut().zip(self.components.iter_rows()) {
            *c = dot(row, v);
            axpy(*c, row, out);
        }
    }

    pub fn project_vector(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.d_in() {
            return Err(Error::shape("pca vector", self.d_in(), v.len()));
        }
        let mut coeffs = vec![0.0; self.n_components()];
        let mut out = vec![0.0; v.len()];
        self.project_vector_into(v, &mut coeffs, &mut out);
        Ok(out)
    }

    /// Orthogonal projection of a point onto the affine principal subspace.
    pub fn project_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::shape("pca point", self.d_in(), x.len()));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut out = self.project_vector(&centered)?;
        axpy(1.0, &self.mean, &mut out);
        Ok(out)
    }

    /// Largest deviation of `C Cᵀ` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let k = self.n_components();
        let mut worst: f64 = 0.0;
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = dot(self.components.row(i), self.components.row(j));
                worst = worst.max((got - want).abs());
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(n, d, data).unwrap()
    }

    #[test]
    fn line_in_three_dimensions() {
        let dir = [1.0 / 3f64.sqrt(); 3];
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.1 - 2.0;
                vec![1.0 + t * dir[0], -2.0 + t * dir[1], 0.5 + t * dir[2]]
            })
            .collect();
        let m = fit_pca(&Tensor::from_rows(&rows).unwrap(), 1).unwrap();
        let c = m.components.row(0);
        let cos = dot(c, &dir).abs();
        assert!(cos >= 1.0 - 1e-8, "cos = {cos}");
        assert!(c[0] > 0.0);
        // a line has rank one
        assert!(matches!(
            fit_pca(&Tensor::from_rows(&rows).unwrap(), 2),
            Err(Error::RankDeficient { requested: 2, rank: 1 })
        ));
    }

    #[test]
    fn isotropic_pool_spreads_variance_evenly() {
        let d = 6;
        let m = fit_pca(&gaussian(20_000, d, 7), d).unwrap();
        for r in &m.explained_variance_ratio {
            assert!((r - 1.0 / d as f64).abs() < 0.01, "{r}");
        }
        assert!(m.orthonormality_error() < 1e-10);
    }

    #[test]
    fn refit_is_identical() {
        let pool = gaussian(200, 10, 1);
        assert_eq!(fit_pca(&pool, 4).unwrap(), fit_pca(&pool, 4).unwrap());
    }

    #[test]
    fn projection_on_and_off_span() {
        let m = fit_pca(&gaussian(300, 5, 2), 2).unwrap();
        let v: Vec<f64> = (0..5)
            .map(|j| 0.7 * m.components.row(0)[j] - 1.3 * m.components.row(1)[j])
            .collect();
        let p = m.project_vector(&v).unwrap();
        for (a, b) in p.iter().zip(&v) {
            assert!((a - b).abs() < 1e-10);
        }
        // remove the span component from an arbitrary vector
        let mut w = vec![1.0, -2.0, 0.5, 3.0, 0.25];
        let pw = m.project_vector(&w).unwrap();
        axpy(-1.0, &pw, &mut w);
        assert!(m.project_vector(&w).unwrap().iter().all(|x| x.abs() < 1e-10));
        assert!(m.project_vector(&[1.0]).is_err());
    }

    #[test]
    fn invalid_requests() {
        let pool = gaussian(3, 5, 0);
        assert!(fit_pca(&pool, 0).is_err());
        assert!(fit_pca(&pool, 4).is_err());
        assert!(fit_pca(&pool, 6).is_err());
    }

    #[test]
    fn retained_variance_picks_the_fewest_components() {
        let scales = [4.0, 2.0, 1.0, 1.0];
        let mut pool = gaussian(20_000, 4, 9);
        for row in pool.data_mut().chunks_mut(4) {
            row.iter_mut().zip(&scales).for_each(|(x, s)| *x *= s);
        }
        // variances 16, 4, 1, 1 of 22
        assert_eq!(fit_pca_variance(&pool, 0.7).unwrap().n_components(), 1);
        assert_eq!(fit_pca_variance(&pool, 0.85).unwrap().n_components(), 2);
        assert_eq!(fit_pca_variance(&pool, 1.0).unwrap().n_components(), 4);
        let m = fit_pca_variance(&pool, 0.85).unwrap();
        assert!(m.explained_variance_ratio.iter().sum::<f64>() >= 0.85);
        assert!(fit_pca_variance(&pool, 0.0).is_err());
        assert!(fit_pca_variance(&pool, 1.5).is_err());
    }

    #[test]
    fn projection_is_idempotent() {
        let m = fit_pca(&gaussian(300, 10, 4), 3).unwrap();
        let v: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let once = m.project_vector(&v).unwrap();
        let twice = m.project_vector(&once).unwrap();
        let err = once.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
        let x = gaussian(1, 10, 5);
        let p1 = m.project_point(x.row(0)).unwrap();
        let p2 = m.project_point(&p1).unwrap();
        let err = p1.iter().zip(&p2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
    }
}
