use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::ManifoldModel;
use crate::math::tensor::{axpy, dot};

/// Added to the cosine denominator.
pub const COS_GUARD: f64 = 1e-12;

/// How the manifold enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldMode {
    /// Penalize the distance between a gradient and its projection.
    #[default]
    Soft,
    /// Apply the independence loss to projected gradients; no distance term.
    HardProjection,
}

/// Extra regularizer used by the comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    #[default]
    None,
    GradL1 { weight: f64 },
    GradL2 { weight: f64 },
    SpectralDecoupling { weight: f64 },
    InputDropout { rate: f64 },
}

impl Baseline {
    /// Whether the penalty depends on the input gradient.
    pub fn uses_input_gradient(&self) -> bool {
        matches!(self, Baseline::GradL1 { weight } | Baseline::GradL2 { weight } if *weight != 0.0)
    }

    pub fn dropout_rate(&self) -> Option<f64> {
        match self {
            Baseline::InputDropout { rate } if *rate > 0.0 => Some(*rate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_indep: f64,
    pub lambda_manifold: f64,
    #[serde(default)]
    pub mode: ManifoldMode,
    #[serde(default)]
    pub baseline: Baseline,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::erm()
    }
}

impl LossWeights {
    /// Plain empirical risk minimization.
    pub fn erm() -> Self {
        Self {
            lambda_indep: 0.0,
            lambda_manifold: 0.0,
            mode: ManifoldMode::Soft,
            baseline: Baseline::None,
        }
    }

    pub fn soft(lambda_indep: f64, lambda_manifold: f64) -> Self {
        Self {
            lambda_indep,
            lambda_manifold,
            ..Self::erm()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_indep", self.lambda_indep),
            ("lambda_manifold", self.lambda_manifold),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("{v} is not finite and >= 0")));
            }
        }
        match self.baseline {
            Baseline::GradL1 { weight } | Baseline::GradL2 { weight } | Baseline::SpectralDecoupling { weight }
                if !(weight.is_finite() && weight >= 0.0) =>
            {
                Err(Error::config("baseline.weight", format!("{weight} is not finite and >= 0")))
            }
            Baseline::InputDropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(Error::config("baseline.rate", format!("{rate} is not in [0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// Whether any term needs a manifold model.
    pub fn needs_manifold(&self) -> bool {
        match self.mode {
            ManifoldMode::Soft => self.lambda_manifold > 0.0,
            ManifoldMode::HardProjection => self.lambda_indep > 0.0,
        }
    }
}

/// Squared cosine between two vectors with a guarded denominator.
pub fn indep_loss(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::shape("indep_loss", g1.len(), g2.len()));
    }
    Ok(cos_sq(g1, g2).value)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct CosSq {
    pub value: f64,
    pub dot: f64,
    pub n1: f64,
    pub n2: f64,
    pub denom: f64,
}

impl CosSq {
    /// Whether the guard dominates (a zero or vanishing gradient).
    pub fn degenerate(&self) -> bool {
        self.n1 * self.n2 < COS_GUARD
    }
}

#[inline]
pub(crate) fn cos_sq(a: &[f64], b: &[f64]) -> CosSq {
    let d = dot(a, b);
    let n1 = dot(a, a);
    let n2 = dot(b, b);
    let denom = n1 * n2 + COS_GUARD;
    CosSq {
        value: d * d / denom,
        dot: d,
        n1,
        n2,
        denom,
    }
}

/// Adds `scale · ∂cos²/∂a` to `ga` and `scale · ∂cos²/∂b` to `gb`.
#[inline]
pub(crate) fn cos_sq_grad(a: &[f64], b: &[f64], c: &CosSq, scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    // ∂/∂a [d²/(n1 n2 + ε)] = 2d b / D − d² · 2 n2 a / D²
    let k_cross = scale * 2.0 * c.dot / c.denom;
    let k_self_a = -scale * c.value * 2.0 * c.n2 / c.denom;
    let k_self_b = -scale * c.value * 2.0 * c.n1 / c.denom;
    axpy(k_cross, b, ga);
    axpy(k_self_a, a, ga);
    axpy(k_cross, a, gb);
    axpy(k_self_b, b, gb);
}

/// `‖proj_M(x, g) − g‖²`
pub fn manifold_loss(x: &[f64], g: &[f64], manifold: &ManifoldModel) -> Result<f64> {
    if g.len() != manifold.d_in() {
        return Err(Error::shape("manifold_loss gradient", manifold.d_in(), g.len()));
    }
    let p = manifold.project_vector(x, g)?;
    Ok(p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Penalty of a comparison baseline for one model at one point.
pub fn baseline_penalty(kind: &Baseline, logit: f64, g: &[f64]) -> f64 {
    match *kind {
        Baseline::GradL1 { .. } => g.iter().map(|v| v.abs()).sum(),
        Baseline::GradL2 { .. } => dot(g, g),
        Baseline::SpectralDecoupling { .. } => logit * logit,
        Baseline::None | Baseline::InputDropout { .. } => 0.0,
    }
}

pub(crate) fn baseline_weight(kind: &Baseline) -> f64 {
    match *kind {
        Baseline::GradL1 { weight } | Baseline::GradL2 { weight } | Baseline::SpectralDecoupling { weight } => weight,
        Baseline::None | Baseline::InputDropout { .. } => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::PcaModel;
    use crate::math::Tensor;
    use proptest::prelude::*;

    fn e1_pca() -> ManifoldModel {
        ManifoldModel::Pca(PcaModel {
            mean: vec![0.0, 0.0],
            components: Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
            explained_variance_ratio: vec![1.0],
        })
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(indep_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((indep_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-11);
        assert!((indep_loss(&[1.0, 0.0], &[-2.0, 0.0]).unwrap() - 1.0).abs() < 1e-11);
        assert!((indep_loss(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5).abs() < 1e-11);
        assert_eq!(indep_loss(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(indep_loss(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn manifold_loss_cases() {
        let m = e1_pca();
        assert_eq!(manifold_loss(&[0.0, 0.0], &[3.0, 4.0], &m).unwrap(), 16.0);
        assert_eq!(manifold_loss(&[0.0, 0.0], &[-2.5, 0.0], &m).unwrap(), 0.0);
        let full = ManifoldModel::Pca(PcaModel {
            mean: vec![0.0; 2],
            components: Tensor::matrix(2, 2, vec![0.6, 0.8, 0.8, -0.6]).unwrap(),
            explained_variance_ratio: vec![0.5, 0.5],
        });
        assert!(manifold_loss(&[0.0, 0.0], &[3.0, -7.0], &full).unwrap() < 1e-24);
        assert!(manifold_loss(&[0.0, 0.0], &[3.0], &m).is_err());
    }

    #[test]
    fn baseline_penalties() {
        let g = [3.0, 4.0];
        assert_eq!(baseline_penalty(&Baseline::GradL1 { weight: 1.0 }, 0.0, &g), 7.0);
        assert_eq!(baseline_penalty(&Baseline::GradL2 { weight: 1.0 }, 0.0, &g), 25.0);
        assert_eq!(baseline_penalty(&Baseline::SpectralDecoupling { weight: 1.0 }, 2.0, &g), 4.0);
        assert_eq!(baseline_penalty(&Baseline::GradL1 { weight: 1.0 }, 0.0, &[0.0; 2]), 0.0);
        assert_eq!(baseline_penalty(&Baseline::GradL2 { weight: 1.0 }, 0.0, &[0.0; 2]), 0.0);
        assert_eq!(baseline_penalty(&Baseline::InputDropout { rate: 0.5 }, 9.0, &g), 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::soft(-1.0, 0.0).validate().is_err());
        assert!(LossWeights::soft(f64::NAN, 0.0).validate().is_err());
        let mut w = LossWeights::erm();
        w.baseline = Baseline::InputDropout { rate: 1.0 };
        assert!(w.validate().is_err());
        w.baseline = Baseline::InputDropout { rate: 0.9 };
        assert!(w.validate().is_ok());
    }

    #[test]
    fn cos_sq_gradient_matches_finite_differences() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.1, 0.4, -0.5];
        let c = cos_sq(&a, &b);
        let (mut ga, mut gb) = ([0.0; 3], [0.0; 3]);
        cos_sq_grad(&a, &b, &c, 1.0, &mut ga, &mut gb);
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a;
            ap[i] += h;
            let mut am = a;
            am[i] -= h;
            let fd = (cos_sq(&ap, &b).value - cos_sq(&am, &b).value) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-8);
            let mut bp = b;
            bp[i] += h;
            let mut bm = b;
            bm[i] -= h;
            let fd = (cos_sq(&a, &bp).value - cos_sq(&a, &bm).value) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn indep_loss_symmetric_bounded_scale_free(
            a in prop::collection::vec(-10.0f64..10.0, 4),
            b in prop::collection::vec(-10.0f64..10.0, 4),
            s in prop_oneof![-50.0f64..-0.5, 0.5f64..50.0],
        ) {
            prop_assume!(dot(&a, &a) > 1e-2 && dot(&b, &b) > 1e-2);
            let l = indep_loss(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
            prop_assert!((l - indep_loss(&b, &a).unwrap()).abs() < 1e-15);
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            prop_assert!((l - indep_loss(&scaled, &b).unwrap()).abs() < 1e-9);
        }
    }
}
