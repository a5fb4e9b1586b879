//! Accuracy, disagreement, the underspecification proxy and gradient
//! diversity diagnostics.

pub mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::math::{logits, MlpParams, MlpSpec, Tensor};
use crate::training::losses::cos_sq;
use crate::training::ModelSet;

pub use report::{build_report, EvalReport, ReportInputs};

/// Default minimum pairwise disagreement for models to count as distinct.
pub const DEFAULT_DELTA: f64 = 0.2;

/// Guard inside the logarithm of [`gradient_mi`].
pub const MI_GUARD: f64 = 1e-12;

/// Logit `≥ 0` predicts class 1.
#[inline]
pub fn predict(logit: f64) -> u8 {
    u8::from(logit >= 0.0)
}

pub fn accuracy(spec: &MlpSpec, params: &MlpParams, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("accuracy batch".into()));
    }
    let z = logits(spec, params, batch.inputs.data())?;
    let hits = z.iter().zip(&batch.labels).filter(|(&z, &y)| predict(z) == y).count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Fraction of pool points on which the two models predict different classes.
pub fn disagreement_rate(spec: &MlpSpec, a: &MlpParams, b: &MlpParams, pool: &Tensor) -> Result<f64> {
    if pool.rows() == 0 {
        return Err(Error::Empty("disagreement pool".into()));
    }
    let za = logits(spec, a, pool.data())?;
    let zb = logits(spec, b, pool.data())?;
    Ok(disagreement_of_logits(&za, &zb))
}

fn disagreement_of_logits(za: &[f64], zb: &[f64]) -> f64 {
    let diff = za.iter().zip(zb).filter(|(&a, &b)| predict(a) != predict(b)).count();
    diff as f64 / za.len() as f64
}

/// Pairwise disagreement matrix of a model set on a pool.
pub fn disagreement_matrix(set: &ModelSet, pool: &Tensor) -> Result<Vec<Vec<f64>>> {
    if pool.rows() == 0 {
        return Err(Error::Empty("disagreement pool".into()));
    }
    let z: Vec<Vec<f64>> = (0..set.len())
        .into_par_iter()
        .map(|m| set.logits(m, pool))
        .collect::<Result<_>>()?;
    let m = set.len();
    let mut out = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let d = disagreement_of_logits(&z[i], &z[j]);
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

/// Risk-based convergence and distinctness of a model set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnderspecReport {
    pub eps_tr: f64,
    pub eps_val: f64,
    pub delta: f64,
    pub train_risk: Vec<f64>,
    pub val_risk: Vec<f64>,
    pub n_converged: usize,
    pub converged: Vec<usize>,
    /// Disagreement of every converged pair `(i, j, rate)` with `i < j`.
    pub pairwise: Vec<(usize, usize, f64)>,
    pub min_disagreement: Option<f64>,
    pub mean_disagreement: Option<f64>,
    /// Whether every converged pair disagrees on at least `delta` of the pool.
    pub distinct: bool,
}

/// Counts models with train risk `< eps_tr` and validation risk `< eps_val`
/// (mean cross-entropy) and measures how differently they behave on `pool`.
pub fn underspec_report(
    set: &ModelSet,
    train: &Batch,
    val: &Batch,
    pool: &Tensor,
    eps_tr: f64,
    eps_val: f64,
    delta: f64,
) -> Result<UnderspecReport> {
    for (name, v) in [("eps_tr", eps_tr), ("eps_val", eps_val), ("delta", delta)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::config(name, format!("{v} is not a positive number")));
        }
    }
    let train_risk = (0..set.len())
        .map(|m| set.predictive_loss(m, train))
        .collect::<Result<Vec<_>>>()?;
    let val_risk = (0..set.len())
        .map(|m| set.predictive_loss(m, val))
        .collect::<Result<Vec<_>>>()?;
    let converged: Vec<usize> = (0..set.len())
        .filter(|&m| train_risk[m] < eps_tr && val_risk[m] < eps_val)
        .collect();
    let mut pairwise = Vec::new();
    if converged.len() >= 2 {
        let d = disagreement_matrix(set, pool)?;
        for (a, &i) in converged.iter().enumerate() {
            for &j in &converged[a + 1..] {
                pairwise.push((i, j, d[i][j]));
            }
        }
    }
    let rates = pairwise.iter().map(|p| p.2);
    let min_disagreement = rates.clone().reduce(f64::min);
    let mean_disagreement = (!pairwise.is_empty()).then(|| rates.sum::<f64>() / pairwise.len() as f64);
    let distinct = min_disagreement.map_or(false, |v| v >= delta);
    Ok(UnderspecReport {
        eps_tr,
        eps_val,
        delta,
        train_risk,
        val_risk,
        n_converged: converged.len(),
        converged,
        pairwise,
        min_disagreement,
        mean_disagreement,
        distinct,
    })
}

/// `−½ ln(1 − cos²(g1, g2) + 1e-12)`: the mutual information between the two
/// models' linearized outputs under small isotropic input noise.
pub fn gradient_mi(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::shape("gradient_mi", g1.len(), g2.len()));
    }
    let c = cos_sq(g1, g2).value;
    let inner = 1.0 - c + MI_GUARD;
    if inner < 1e-9 {
        log::debug!("gradient mutual information saturated at {:.3}", -0.5 * inner.ln());
    }
    Ok(-0.5 * inner.max(MI_GUARD).ln())
}

/// Input gradients of every model at every row, `[model][row][element]`.
pub fn all_input_gradients(set: &ModelSet, sample: &Tensor) -> Result<Vec<Vec<Vec<f64>>>> {
    (0..set.len())
        .into_par_iter()
        .map(|m| sample.iter_rows().map(|x| set.input_gradient(m, x)).collect())
        .collect()
}

/// Mean pairwise gradient mutual information over a sample.
pub fn mean_gradient_mi(set: &ModelSet, sample: &Tensor) -> Result<Option<f64>> {
    if set.len() < 2 || sample.rows() == 0 {
        return Ok(None);
    }
    let g = all_input_gradients(set, sample)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..sample.rows() {
        for a in 0..set.len() {
            for b in a + 1..set.len() {
                total += gradient_mi(&g[a][i], &g[b][i])?;
                count += 1;
            }
        }
    }
    Ok(Some(total / count as f64))
}

/// Ranks starting at 1 with ties assigned their mean rank.
pub fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Spearman correlation of two vectors; `None` when either is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (mid_ranks(a), mid_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanSummary {
    /// Mean correlation over all usable (point, pair) combinations.
    pub mean: Option<f64>,
    pub used: usize,
    /// Combinations skipped because a gradient magnitude vector was constant.
    pub skipped: usize,
}

/// Average pairwise Spearman correlation between the per-element gradient
/// magnitudes of the models, over the rows of `sample`.
pub fn spearman_grad_corr(set: &ModelSet, sample: &Tensor) -> Result<SpearmanSummary> {
    if set.len() < 2 {
        return Err(Error::config("models", "rank correlation needs at least two models"));
    }
    if sample.rows() == 0 {
        return Err(Error::Empty("rank correlation sample".into()));
    }
    let g = all_input_gradients(set, sample)?;
    let per_point: Vec<(f64, usize, usize)> = (0..sample.rows())
        .into_par_iter()
        .map(|i| {
            let mags: Vec<Vec<f64>> = g.iter().map(|gm| gm[i].iter().map(|v| v.abs()).collect()).collect();
            let (mut sum, mut used, mut skipped) = (0.0, 0, 0);
            for a in 0..mags.len() {
                for b in a + 1..mags.len() {
                    match spearman(&mags[a], &mags[b]) {
                        Some(r) => {
                            sum += r;
                            used += 1;
                        }
                        None => skipped += 1,
                    }
                }
            }
            (sum, used, skipped)
        })
        .collect();
    let (mut sum, mut used, mut skipped) = (0.0, 0, 0);
    for (s, u, k) in per_point {
        sum += s;
        used += u;
        skipped += k;
    }
    if skipped > 0 {
        log::info!("rank correlation skipped {skipped} constant-gradient comparisons");
    }
    Ok(SpearmanSummary {
        mean: (used > 0).then(|| sum / used as f64),
        used,
        skipped,
    })
}

/// Accuracy of every model on every test set, `[model][set]`.
pub fn accuracy_matrix(set: &ModelSet, test_sets: &[Batch]) -> Result<Vec<Vec<f64>>> {
    (0..set.len())
        .into_par_iter()
        .map(|m| {
            test_sets
                .iter()
                .map(|b| accuracy(&set.spec, &set.params[m], b))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestModelMatrix {
    /// Index of the most accurate model on each set (lowest index on ties).
    pub best: Vec<usize>,
    /// Row `r`: accuracies on every set of the model best on set `r`.
    pub rows: Vec<Vec<f64>>,
}

impl BestModelMatrix {
    pub fn from_accuracy(acc: &[Vec<f64>]) -> Result<Self> {
        let n_sets = acc.first().map_or(0, Vec::len);
        if acc.is_empty() || n_sets == 0 {
            return Err(Error::Empty("accuracy matrix".into()));
        }
        let best: Vec<usize> = (0..n_sets)
            .map(|s| {
                (0..acc.len()).fold(0, |b, m| if acc[m][s] > acc[b][s] { m } else { b })
            })
            .collect();
        let rows = best.iter().map(|&m| acc[m].clone()).collect();
        Ok(Self { best, rows })
    }

    pub fn diagonal_mean(&self) -> f64 {
        let n = self.rows.len();
        (0..n).map(|i| self.rows[i][i]).sum::<f64>() / n as f64
    }

    /// Mean of the off-diagonal entries; `None` for a single set.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let n = self.rows.len();
        if n < 2 {
            return None;
        }
        let total: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.rows[i][j])
            .sum();
        Some(total / (n * (n - 1)) as f64)
    }
}

pub fn best_model_matrix(set: &ModelSet, test_sets: &[Batch]) -> Result<BestModelMatrix> {
    if test_sets.is_empty() {
        return Err(Error::Empty("test sets".into()));
    }
    BestModelMatrix::from_accuracy(&accuracy_matrix(set, test_sets)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear(w: &[f64], b: f64) -> (MlpSpec, MlpParams) {
        let spec = MlpSpec::linear(w.len()).unwrap();
        let mut p = MlpParams::zeros(&spec);
        p.layers[0].weights.copy_from_slice(w);
        p.layers[0].bias[0] = b;
        (spec, p)
    }

    fn uniform(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn labeled_by(spec: &MlpSpec, p: &MlpParams, x: Tensor) -> Batch {
        let labels = logits(spec, p, x.data()).unwrap().into_iter().map(predict).collect();
        Batch::new(x, labels).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        let (spec, p) = linear(&[1.0, -1.0], 0.0);
        let b = labeled_by(&spec, &p, uniform(500, 2, 1));
        assert_eq!(accuracy(&spec, &p, &b).unwrap(), 1.0);
        let (_, c) = linear(&[0.0, 0.0], 0.3);
        let balanced = Batch::new(uniform(1000, 2, 2), (0..1000).map(|i| (i % 2) as u8).collect()).unwrap();
        assert_eq!(accuracy(&spec, &c, &balanced).unwrap(), 0.5);
        let empty = Batch::new(Tensor::matrix(0, 2, vec![]).unwrap(), vec![]).unwrap();
        assert!(accuracy(&spec, &p, &empty).is_err());
        // a zero logit predicts class 1
        let (_, z) = linear(&[0.0, 0.0], 0.0);
        let ones = Batch::new(uniform(3, 2, 3), vec![1, 1, 1]).unwrap();
        assert_eq!(accuracy(&spec, &z, &ones).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_of_negated_model_is_complement() {
        let (spec, p) = linear(&[0.7, -0.2, 1.1], 0.05);
        let b = Batch::new(uniform(301, 3, 4), (0..301).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let a = accuracy(&spec, &p, &b).unwrap();
        let n = accuracy(&spec, &p.negated_output(), &b).unwrap();
        assert_eq!(a + n, 1.0);
    }

    #[test]
    fn disagreement_cases() {
        let pool = uniform(4000, 2, 5);
        let (spec, p) = linear(&[1.0, 0.5], 0.1);
        assert_eq!(disagreement_rate(&spec, &p, &p, &pool).unwrap(), 0.0);
        assert_eq!(disagreement_rate(&spec, &p, &p.negated_output(), &pool).unwrap(), 1.0);
        assert!(disagreement_rate(&spec, &p, &p, &Tensor::matrix(0, 2, vec![]).unwrap()).is_err());
    }

    #[test]
    fn random_linear_models_disagree_half_the_time() {
        // isotropic pool: disagreement equals the angle between normals over π
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 8;
        let mut gauss = || -> Vec<f64> {
            (0..d)
                .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng))
                .collect()
        };
        let n = 2000;
        let pool = Tensor::matrix(n, d, (0..n).flat_map(|_| gauss()).collect()).unwrap();
        let mut total = 0.0;
        let trials = 200;
        for _ in 0..trials {
            let (spec, a) = linear(&gauss(), 0.0);
            let (_, b) = linear(&gauss(), 0.0);
            total += disagreement_rate(&spec, &a, &b, &pool).unwrap();
        }
        assert!((total / trials as f64 - 0.5).abs() < 0.03);
    }

    #[test]
    fn underspec_cases() {
        let (spec, p) = linear(&[2.0, -2.0], 0.0);
        let train = labeled_by(&spec, &p, uniform(200, 2, 7));
        let pool = uniform(300, 2, 8);
        let one = ModelSet::new(spec.clone(), vec![p.clone()]).unwrap();
        let r = underspec_report(&one, &train, &train, &pool, 0.5, 0.5, 0.2).unwrap();
        assert_eq!(r.n_converged, 1);
        assert!(r.pairwise.is_empty() && !r.distinct);
        let copies = ModelSet::new(spec, vec![p; 3]).unwrap();
        let r = underspec_report(&copies, &train, &train, &pool, 0.5, 0.5, 0.2).unwrap();
        assert_eq!(r.n_converged, 3);
        assert_eq!(r.pairwise.len(), 3);
        assert_eq!(r.mean_disagreement, Some(0.0));
        assert!(!r.distinct);
        assert!(underspec_report(&copies, &train, &train, &pool, 0.0, 0.5, 0.2).is_err());
    }

    #[test]
    fn mutual_information_cases() {
        assert!(gradient_mi(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-11);
        let half = gradient_mi(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((half - 0.346574).abs() < 1e-6, "{half}");
        let par = gradient_mi(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!(par.is_finite() && (par - 13.8155).abs() < 0.01, "{par}");
    }

    #[test]
    fn rank_correlation_cases() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_none());

        let (spec, p) = linear(&[0.3, -1.0, 2.0, 0.1], 0.0);
        let (_, q) = linear(&[1.0, -0.5, 0.2, 2.0], 0.0);
        let sample = uniform(5, 4, 9);
        let same = ModelSet::new(spec.clone(), vec![p.clone(), p.clone()]).unwrap();
        let s = spearman_grad_corr(&same, &sample).unwrap();
        assert_eq!((s.mean, s.used, s.skipped), (Some(1.0), 5, 0));
        let rev = ModelSet::new(spec.clone(), vec![p, q]).unwrap();
        assert!((spearman_grad_corr(&rev, &sample).unwrap().mean.unwrap() + 1.0).abs() < 1e-12);
        let (_, flat) = linear(&[1.0; 4], 0.0);
        let skip = ModelSet::new(spec, vec![flat.clone(), flat]).unwrap();
        let s = spearman_grad_corr(&skip, &sample).unwrap();
        assert_eq!((s.mean, s.used, s.skipped), (None, 0, 5));
    }

    #[test]
    fn best_model_matrix_cases() {
        let (spec, p) = linear(&[1.0, 0.0], 0.0);
        let (_, q) = linear(&[0.0, 1.0], 0.0);
        let x = uniform(400, 2, 10);
        let on_first = labeled_by(&spec, &p, x.clone());
        let on_second = labeled_by(&spec, &q, x);
        let one = ModelSet::new(spec.clone(), vec![p.clone()]).unwrap();
        let m = best_model_matrix(&one, std::slice::from_ref(&on_first)).unwrap();
        assert_eq!((m.best.clone(), m.rows.len()), (vec![0], 1));
        assert_eq!(m.off_diagonal_mean(), None);
        let set = ModelSet::new(spec, vec![q, p]).unwrap();
        let m = best_model_matrix(&set, &[on_first, on_second]).unwrap();
        assert_eq!(m.best, vec![1, 0]);
        assert_eq!(m.diagonal_mean(), 1.0);
        assert!((m.off_diagonal_mean().unwrap() - 0.5).abs() < 0.1);
        assert!(BestModelMatrix::from_accuracy(&[]).is_err());
        // ties go to the lowest index
        let tie = BestModelMatrix::from_accuracy(&[vec![0.7], vec![0.7]]).unwrap();
        assert_eq!(tie.best, vec![0]);
    }
}
