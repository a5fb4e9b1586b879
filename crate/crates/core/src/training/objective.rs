//! The combined training objective and its exact parameter gradient.
//!
//! For each point `x` of a batch, with `g_m = ∇ₓf_m(x)`:
//!
//! ```text
//! (1/M) Σ_m BCE(y, σ(f_m(x)))
//!   + λ_indep (1/M²) Σ_{m1≠m2} cos²(g_m1, g_m2)
//!   + λ_manifold (1/M) Σ_m ‖P(x) g_m − g_m‖²
//!   + w_baseline (1/M) Σ_m penalty_m
//! ```
//!
//! averaged over the batch. Diagonal pairs are left out of the independence
//! sum: `cos²(v, v) ≡ 1` has zero gradient. In hard-projection mode the
//! cosine is taken between `P(x) g_m` and the distance term is dropped.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{baseline_weight, cos_sq, cos_sq_grad, Baseline, LossWeights, ManifoldMode};
use crate::data::Batch;
use crate::error::{Error, LossTerm, Result};
use crate::manifold::ManifoldModel;
use crate::math::tensor::axpy;
use crate::math::{bce_with_logit, sigmoid, MlpParams, MlpSpec, SampleTape, Tensor};

/// Weighted contribution of every term, averaged over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub predictive: f64,
    pub independence: f64,
    pub manifold: f64,
    pub baseline: f64,
    pub total: f64,
    /// Model pairs whose cosine denominator was dominated by the guard.
    pub zero_gradient_pairs: u64,
}

impl LossBreakdown {
    fn check_finite(&self) -> Result<()> {
        for (term, v) in [
            (LossTerm::Predictive, self.predictive),
            (LossTerm::Independence, self.independence),
            (LossTerm::Manifold, self.manifold),
            (LossTerm::Baseline, self.baseline),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    term,
                    detail: Some(format!("{self:?}")),
                });
            }
        }
        Ok(())
    }
}

/// Inputs seen by each model: shared, or one matrix per model (input dropout).
#[derive(Clone, Copy)]
pub enum ModelInputs<'a> {
    Shared(&'a Tensor),
    PerModel(&'a [Tensor]),
}

impl<'a> ModelInputs<'a> {
    fn for_model(&self, m: usize) -> &'a Tensor {
        match *self {
            ModelInputs::Shared(t) => t,
            ModelInputs::PerModel(ts) => &ts[m],
        }
    }
}

struct ModelPass {
    logits: Vec<f64>,
    /// `n × d` input gradients, empty when not needed.
    grads: Vec<f64>,
}

/// Evaluates the objective and, when `want_grads`, its gradient with respect
/// to every model's parameters. Per-model work runs on the ambient rayon
/// pool; the cross-model terms are reduced in fixed order.
pub fn evaluate_objective(
    spec: &MlpSpec,
    models: &[MlpParams],
    inputs: ModelInputs<'_>,
    labels: &[u8],
    manifold: Option<&ManifoldModel>,
    weights: &LossWeights,
    want_grads: bool,
) -> Result<(LossBreakdown, Option<Vec<MlpParams>>)> {
    weights.validate()?;
    spec.validate()?;
    let m_count = models.len();
    if m_count == 0 {
        return Err(Error::Empty("model set".into()));
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("batch".into()));
    }
    let d = spec.d_in();
    for (m, p) in models.iter().enumerate() {
        p.check(spec)?;
        let x = inputs.for_model(m);
        if x.rows() != n || x.cols() != d {
            return Err(Error::shape(
                format!("inputs of model {m}"),
                format!("{n}x{d}"),
                format!("{}x{}", x.rows(), x.cols()),
            ));
        }
    }
    if let ModelInputs::PerModel(ts) = inputs {
        if ts.len() != m_count {
            return Err(Error::shape("per-model inputs", m_count, ts.len()));
        }
    }
    if weights.needs_manifold() {
        match manifold {
            None => return Err(Error::config("manifold", "required by the loss weights")),
            Some(mf) if mf.d_in() != d => return Err(Error::shape("manifold width", d, mf.d_in())),
            Some(_) => {}
        }
    }

    let mf = manifold.filter(|_| weights.needs_manifold());
    let lambda_indep = if m_count >= 2 { weights.lambda_indep } else { 0.0 };
    let hard = weights.mode == ManifoldMode::HardProjection;
    let lambda_manifold = if hard { 0.0 } else { weights.lambda_manifold };
    let w_base = baseline_weight(&weights.baseline);
    let need_g = lambda_indep > 0.0 || lambda_manifold > 0.0 || weights.baseline.uses_input_gradient();

    // per-model forward passes and input gradients
    let passes: Vec<ModelPass> = (0..m_count)
        .into_par_iter()
        .map(|m| {
            let x = inputs.for_model(m);
            let mut tape = SampleTape::new(spec);
            let mut logits = Vec::with_capacity(n);
            let mut grads = if need_g { Vec::with_capacity(n * d) } else { Vec::new() };
            for row in x.iter_rows() {
                if need_g {
                    tape.run(spec, &models[m], row);
                    grads.extend_from_slice(&tape.input_grad);
                } else {
                    tape.forward(spec, &models[m], row);
                }
                logits.push(tape.logit);
            }
            ModelPass { logits, grads }
        })
        .collect();

    let inv_m = 1.0 / m_count as f64;
    let inv_n = 1.0 / n as f64;
    let pair_scale = lambda_indep * inv_m * inv_m;
    let mut bd = LossBreakdown::default();
    let mut dlogits = vec![vec![0.0; n]; m_count];
    let mut cotangents = if need_g && want_grads {
        vec![vec![0.0; n * d]; m_count]
    } else {
        Vec::new()
    };

    // buffers for the coupled per-point terms
    let mut projected = vec![vec![0.0; d]; m_count];
    let mut proj_cot = vec![vec![0.0; d]; m_count];
    let mut resid = vec![0.0; d];
    let mut tmp = vec![0.0; d];

    for i in 0..n {
        let y = f64::from(labels[i]);
        for m in 0..m_count {
            let z = passes[m].logits[i];
            bd.predictive += inv_m * bce_with_logit(z, y);
            dlogits[m][i] += inv_m * (sigmoid(z) - y);
            if let Baseline::SpectralDecoupling { .. } = weights.baseline {
                bd.baseline += w_base * inv_m * z * z;
                dlogits[m][i] += w_base * inv_m * 2.0 * z;
            }
        }
        if !need_g {
            continue;
        }
        let g = |m: usize| &passes[m].grads[i * d..(i + 1) * d];
        let x_shared = inputs.for_model(0).row(i);
        let mut projector = match mf {
            Some(mf) => Some(mf.projector(x_shared)?),
            None => None,
        };

        // baseline penalties on the raw gradient
        match weights.baseline {
            Baseline::GradL1 { .. } if w_base != 0.0 => {
                for m in 0..m_count {
                    bd.baseline += w_base * inv_m * g(m).iter().map(|v| v.abs()).sum::<f64>();
                    if want_grads {
                        let c = &mut cotangents[m][i * d..(i + 1) * d];
                        for (ci, gi) in c.iter_mut().zip(g(m)) {
                            *ci += w_base * inv_m * inv_n * signum0(*gi);
                        }
                    }
                }
            }
            Baseline::GradL2 { .. } if w_base != 0.0 => {
                for m in 0..m_count {
                    bd.baseline += w_base * inv_m * g(m).iter().map(|v| v * v).sum::<f64>();
                    if want_grads {
                        let c = &mut cotangents[m][i * d..(i + 1) * d];
                        axpy(w_base * inv_m * inv_n * 2.0, g(m), c);
                    }
                }
            }
            _ => {}
        }

        // distance to the manifold: r = P g − g, ∂/∂g = 2 (Pᵀ r − r)
        if lambda_manifold > 0.0 {
            let p = projector.as_mut().expect("manifold checked above");
            for m in 0..m_count {
                p.apply(g(m), &mut resid);
                axpy(-1.0, g(m), &mut resid);
                bd.manifold += lambda_manifold * inv_m * resid.iter().map(|v| v * v).sum::<f64>();
                if want_grads {
                    p.apply_transpose(&resid, &mut tmp);
                    axpy(-1.0, &resid, &mut tmp);
                    let c = &mut cotangents[m][i * d..(i + 1) * d];
                    axpy(2.0 * lambda_manifold * inv_m * inv_n, &tmp, c);
                }
            }
        }

        if lambda_indep > 0.0 {
            for m in 0..m_count {
                if hard {
                    let p = projector.as_mut().expect("manifold checked above");
                    p.apply(g(m), &mut projected[m]);
                } else {
                    projected[m].copy_from_slice(g(m));
                }
                proj_cot[m].iter_mut().for_each(|v| *v = 0.0);
            }
            for m1 in 0..m_count {
                for m2 in m1 + 1..m_count {
                    let c = cos_sq(&projected[m1], &projected[m2]);
                    if c.degenerate() {
                        bd.zero_gradient_pairs += 1;
                    }
                    // ordered pairs (m1, m2) and (m2, m1) are equal
                    bd.independence += 2.0 * pair_scale * c.value;
                    if want_grads {
                        let (lo, hi) = proj_cot.split_at_mut(m2);
                        cos_sq_grad(
                            &projected[m1],
                            &projected[m2],
                            &c,
                            2.0 * pair_scale * inv_n,
                            &mut lo[m1],
                            &mut hi[0],
                        );
                    }
                }
            }
            if want_grads {
                for m in 0..m_count {
                    let c = &mut cotangents[m][i * d..(i + 1) * d];
                    if hard {
                        let p = projector.as_mut().expect("manifold checked above");
                        p.apply_transpose(&proj_cot[m], &mut tmp);
                        axpy(1.0, &tmp, c);
                    } else {
                        axpy(1.0, &proj_cot[m], c);
                    }
                }
            }
        }
    }

    bd.predictive *= inv_n;
    bd.independence *= inv_n;
    bd.manifold *= inv_n;
    bd.baseline *= inv_n;
    bd.total = bd.predictive + bd.independence + bd.manifold + bd.baseline;
    bd.check_finite()?;

    if !want_grads {
        return Ok((bd, None));
    }

    let grads: Vec<MlpParams> = (0..m_count)
        .into_par_iter()
        .map(|m| {
            let x = inputs.for_model(m);
            let mut tape = SampleTape::new(spec);
            let mut out = models[m].zeros_like();
            for (i, row) in x.iter_rows().enumerate() {
                tape.run_adjoints(spec, &models[m], row);
                let cot = if need_g {
                    Some(&cotangents[m][i * d..(i + 1) * d])
                } else {
                    None
                };
                tape.accumulate_param_grad(spec, &models[m], row, dlogits[m][i] * inv_n, cot, 1.0, &mut out);
            }
            out
        })
        .collect();
    for (m, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                term: LossTerm::Predictive,
                detail: Some(format!("parameter gradient of model {m}")),
            });
        }
    }
    Ok((bd, Some(grads)))
}

#[inline]
fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Value of the objective on a batch.
pub fn batch_loss(
    spec: &MlpSpec,
    models: &[MlpParams],
    batch: &Batch,
    manifold: Option<&ManifoldModel>,
    weights: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    let (bd, _) = evaluate_objective(
        spec,
        models,
        ModelInputs::Shared(&batch.inputs),
        &batch.labels,
        manifold,
        weights,
        false,
    )?;
    Ok((bd.total, bd))
}

/// Exact gradient of the objective with respect to every model's parameters.
pub fn param_gradient(
    spec: &MlpSpec,
    models: &[MlpParams],
    batch: &Batch,
    manifold: Option<&ManifoldModel>,
    weights: &LossWeights,
) -> Result<(Vec<MlpParams>, LossBreakdown)> {
    let (bd, grads) = evaluate_objective(
        spec,
        models,
        ModelInputs::Shared(&batch.inputs),
        &batch.labels,
        manifold,
        weights,
        true,
    )?;
    Ok((grads.expect("requested gradients"), bd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{fit_pca, AeModel, AeSpec, PcaModel};
    use crate::math::mlp::bce_param_gradient_reference;
    use crate::training::init_model;
    use crate::training::losses::Baseline;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        Batch::new(Tensor::matrix(n, d, data).unwrap(), labels).unwrap()
    }

    fn models(spec: &MlpSpec, m: usize, seed: u64) -> Vec<MlpParams> {
        (0..m).map(|i| init_model(spec, seed, i)).collect()
    }

    fn pca(d: usize, k: usize) -> ManifoldModel {
        ManifoldModel::Pca(fit_pca(&random_batch(200, d, 99).inputs, k).unwrap())
    }

    /// Largest relative deviation between the analytic gradient and central
    /// differences of the scalar loss, over every parameter of every model.
    fn fd_error(
        spec: &MlpSpec,
        ms: &[MlpParams],
        batch: &Batch,
        mf: Option<&ManifoldModel>,
        w: &LossWeights,
    ) -> f64 {
        let (grads, _) = param_gradient(spec, ms, batch, mf, w).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for m in 0..ms.len() {
            let flat = ms[m].flatten();
            let analytic = grads[m].flatten();
            for k in 0..flat.len() {
                let eval = |delta: f64| {
                    let mut moved = ms.to_vec();
                    let mut f = flat.clone();
                    f[k] += delta;
                    moved[m].assign_flat(&f).unwrap();
                    batch_loss(spec, &moved, batch, mf, w).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[k];
                let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn full_objective_matches_finite_differences_with_pca() {
        let spec = MlpSpec::with_hidden(6, &[4]).unwrap();
        let ms = models(&spec, 2, 3);
        let batch = random_batch(5, 6, 4);
        let mf = pca(6, 3);
        let err = fd_error(&spec, &ms, &batch, Some(&mf), &LossWeights::soft(1.0, 1.0));
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn hard_projection_matches_finite_differences() {
        let spec = MlpSpec::with_hidden(5, &[4]).unwrap();
        let ms = models(&spec, 3, 5);
        let batch = random_batch(4, 5, 6);
        let mf = pca(5, 2);
        let w = LossWeights {
            mode: ManifoldMode::HardProjection,
            ..LossWeights::soft(1.5, 0.7)
        };
        assert!(fd_error(&spec, &ms, &batch, Some(&mf), &w) <= 1e-5);
    }

    #[test]
    fn autoencoder_manifold_matches_finite_differences() {
        let spec = MlpSpec::with_hidden(5, &[3]).unwrap();
        let ms = models(&spec, 2, 8);
        let batch = random_batch(4, 5, 9);
        let mut ae = AeSpec::new(5, 2);
        ae.hidden = vec![4];
        let mf = ManifoldModel::Ae(AeModel::init(&ae, 2).unwrap());
        for mode in [ManifoldMode::Soft, ManifoldMode::HardProjection] {
            let w = LossWeights {
                mode,
                ..LossWeights::soft(1.0, 1.0)
            };
            assert!(fd_error(&spec, &ms, &batch, Some(&mf), &w) <= 1e-5, "{mode:?}");
        }
    }

    #[test]
    fn baselines_match_finite_differences() {
        let spec = MlpSpec::with_hidden(4, &[5, 3]).unwrap();
        let ms = models(&spec, 2, 10);
        let batch = random_batch(6, 4, 11);
        for baseline in [
            Baseline::GradL1 { weight: 0.3 },
            Baseline::GradL2 { weight: 0.8 },
            Baseline::SpectralDecoupling { weight: 0.05 },
        ] {
            let w = LossWeights {
                baseline,
                ..LossWeights::soft(0.5, 0.0)
            };
            assert!(fd_error(&spec, &ms, &batch, None, &w) <= 1e-5, "{baseline:?}");
        }
    }

    #[test]
    fn regularizers_off_reduce_to_cross_entropy_backprop() {
        let spec = MlpSpec::with_hidden(4, &[3]).unwrap();
        let ms = models(&spec, 3, 1);
        let batch = random_batch(7, 4, 2);
        let (grads, _) = param_gradient(&spec, &ms, &batch, None, &LossWeights::erm()).unwrap();
        for (m, g) in grads.iter().enumerate() {
            let mut want = ms[m].zeros_like();
            for (x, &y) in batch.inputs.iter_rows().zip(&batch.labels) {
                let r = bce_param_gradient_reference(&spec, &ms[m], x, f64::from(y)).unwrap();
                want.add_scaled(1.0 / (3.0 * 7.0), &r);
            }
            for (a, b) in g.flatten().iter().zip(want.flatten()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_model_has_no_independence_term() {
        let spec = MlpSpec::with_hidden(4, &[3]).unwrap();
        let ms = models(&spec, 1, 1);
        let batch = random_batch(7, 4, 2);
        let (g0, b0) = param_gradient(&spec, &ms, &batch, None, &LossWeights::erm()).unwrap();
        let (g1, b1) = param_gradient(&spec, &ms, &batch, None, &LossWeights::soft(5.0, 0.0)).unwrap();
        assert_eq!(b1.independence, 0.0);
        assert_eq!(b0.total, b1.total);
        assert_eq!(g0, g1);
    }

    #[test]
    fn identical_models_pay_half_for_two() {
        let spec = MlpSpec::linear(4).unwrap();
        let mut p = MlpParams::zeros(&spec);
        p.layers[0].weights.copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        let batch = random_batch(9, 4, 3);
        let (_, bd) = batch_loss(&spec, &[p.clone(), p], &batch, None, &LossWeights::soft(1.0, 0.0)).unwrap();
        assert!((bd.independence - 0.5).abs() < 1e-12, "{}", bd.independence);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let spec = MlpSpec::with_hidden(6, &[4]).unwrap();
        let ms = models(&spec, 4, 7);
        let batch = random_batch(10, 6, 8);
        let mf = pca(6, 2);
        let w = LossWeights {
            baseline: Baseline::GradL2 { weight: 0.1 },
            ..LossWeights::soft(2.0, 3.0)
        };
        let (total, bd) = batch_loss(&spec, &ms, &batch, Some(&mf), &w).unwrap();
        let sum = bd.predictive + bd.independence + bd.manifold + bd.baseline;
        assert!((total - sum).abs() <= 1e-12);
    }

    #[test]
    fn hard_projection_on_full_rank_pca_equals_soft_without_manifold() {
        let spec = MlpSpec::with_hidden(4, &[3]).unwrap();
        let ms = models(&spec, 3, 2);
        let batch = random_batch(8, 4, 5);
        let full = pca(4, 4);
        let hard = LossWeights {
            mode: ManifoldMode::HardProjection,
            ..LossWeights::soft(1.0, 0.0)
        };
        let (a, _) = batch_loss(&spec, &ms, &batch, Some(&full), &hard).unwrap();
        let (b, _) = batch_loss(&spec, &ms, &batch, None, &LossWeights::soft(1.0, 0.0)).unwrap();
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn missing_manifold_is_rejected() {
        let spec = MlpSpec::with_hidden(4, &[3]).unwrap();
        let ms = models(&spec, 2, 2);
        let batch = random_batch(3, 4, 5);
        assert!(batch_loss(&spec, &ms, &batch, None, &LossWeights::soft(1.0, 1.0)).is_err());
        let wrong = ManifoldModel::Pca(PcaModel {
            mean: vec![0.0; 3],
            components: Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap(),
            explained_variance_ratio: vec![1.0],
        });
        assert!(batch_loss(&spec, &ms, &batch, Some(&wrong), &LossWeights::soft(1.0, 1.0)).is_err());
    }

    #[test]
    fn zero_gradients_are_counted_not_fatal() {
        let spec = MlpSpec::linear(3).unwrap();
        let ms = vec![MlpParams::zeros(&spec); 2];
        let batch = random_batch(4, 3, 1);
        let (_, bd) = batch_loss(&spec, &ms, &batch, None, &LossWeights::soft(1.0, 0.0)).unwrap();
        assert_eq!(bd.independence, 0.0);
        assert_eq!(bd.zero_gradient_pairs, 4);
    }
}
