use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::LossWeights;
use super::objective::{evaluate_objective, LossBreakdown, ModelInputs};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::manifold::ManifoldModel;
use crate::math::{bce_with_logit, input_gradient, logits, AdamConfig, AdamState, MlpParams, MlpSpec, Tensor};

fn default_lr() -> f64 {
    0.002
}
fn default_batch_size() -> usize {
    256
}
fn default_n_updates() -> usize {
    10_000
}
fn default_eps() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub n_models: usize,
    pub spec: MlpSpec,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_n_updates")]
    pub n_updates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Train risk (mean BCE) below which a model counts as converged.
    #[serde(default = "default_eps")]
    pub eps_tr: f64,
    #[serde(default = "default_eps")]
    pub eps_val: f64,
    /// Start every model from the same draw instead of one draw per model.
    #[serde(default)]
    pub shared_init: bool,
}

impl TrainConfig {
    pub fn new(n_models: usize, spec: MlpSpec, weights: LossWeights) -> Self {
        Self {
            n_models,
            spec,
            weights,
            lr: default_lr(),
            batch_size: default_batch_size(),
            n_updates: default_n_updates(),
            seed: 0,
            eps_tr: default_eps(),
            eps_val: default_eps(),
            shared_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 {
            return Err(Error::config("n_models", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("{} is not a positive number", self.lr)));
        }
        for (name, v) in [("eps_tr", self.eps_tr), ("eps_val", self.eps_val)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("{v} is not a positive number")));
            }
        }
        self.spec.validate()?;
        self.weights.validate()
    }
}

/// Initial parameters of model `m` under `seed`.
pub fn init_model(spec: &MlpSpec, seed: u64, m: usize) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + m as u64);
    MlpParams::init(spec, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub spec: MlpSpec,
    pub params: Vec<MlpParams>,
}

impl ModelSet {
    pub fn new(spec: MlpSpec, params: Vec<MlpParams>) -> Result<Self> {
        spec.validate()?;
        for p in &params {
            p.check(&spec)?;
        }
        Ok(Self { spec, params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.spec.d_in()
    }

    /// Logits of model `m` on every row.
    pub fn logits(&self, m: usize, inputs: &Tensor) -> Result<Vec<f64>> {
        logits(&self.spec, &self.params[m], inputs.data())
    }

    pub fn input_gradient(&self, m: usize, x: &[f64]) -> Result<Vec<f64>> {
        input_gradient(&self.spec, &self.params[m], x)
    }

    /// Mean binary cross-entropy of model `m`.
    pub fn predictive_loss(&self, m: usize, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let z = self.logits(m, &batch.inputs)?;
        let total: f64 = z
            .iter()
            .zip(&batch.labels)
            .map(|(&z, &y)| bce_with_logit(z, f64::from(y)))
            .sum();
        Ok(total / batch.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub model: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-model predictive losses recorded at epoch boundaries (epoch 0 is the
/// initialization).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub records: Vec<LogRecord>,
    /// Minibatch model pairs whose gradients were too small for a cosine.
    pub zero_gradient_pairs: u64,
}

impl ConvergenceLog {
    /// Records of one model in epoch order.
    pub fn model(&self, m: usize) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(move |r| r.model == m)
    }

    pub fn last(&self, m: usize) -> Option<&LogRecord> {
        self.model(m).last()
    }

    fn record(&mut self, set: &ModelSet, epoch: usize, train: &Batch, val: &Batch) -> Result<()> {
        for m in 0..set.len() {
            let train_loss = set.predictive_loss(m, train)?;
            let val_loss = if val.is_empty() {
                f64::NAN
            } else {
                set.predictive_loss(m, val)?
            };
            self.records.push(LogRecord {
                model: m,
                epoch,
                train_loss,
                val_loss,
            });
        }
        Ok(())
    }
}

/// Trains `cfg.n_models` models jointly on `train`, sharing minibatches.
/// Per-model work uses the ambient rayon pool; results do not depend on its
/// size.
pub fn train_models(
    cfg: &TrainConfig,
    train: &Batch,
    val: &Batch,
    manifold: Option<&ManifoldModel>,
) -> Result<(ModelSet, ConvergenceLog)> {
    let init: Vec<MlpParams> = (0..cfg.n_models)
        .map(|m| init_model(&cfg.spec, cfg.seed, if cfg.shared_init { 0 } else { m }))
        .collect();
    train_from(cfg, init, train, val, manifold)
}

/// As [`train_models`], starting from the given parameters.
pub fn train_from(
    cfg: &TrainConfig,
    init: Vec<MlpParams>,
    train: &Batch,
    val: &Batch,
    manifold: Option<&ManifoldModel>,
) -> Result<(ModelSet, ConvergenceLog)> {
    cfg.validate()?;
    if init.len() != cfg.n_models {
        return Err(Error::shape("initial model count", cfg.n_models, init.len()));
    }
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if train.d_in() != cfg.spec.d_in() {
        return Err(Error::shape("training inputs", cfg.spec.d_in(), train.d_in()));
    }
    if !val.is_empty() && val.d_in() != cfg.spec.d_in() {
        return Err(Error::shape("validation inputs", cfg.spec.d_in(), val.d_in()));
    }
    if let Some(mf) = manifold {
        if mf.d_in() != cfg.spec.d_in() {
            return Err(Error::shape("manifold width", cfg.spec.d_in(), mf.d_in()));
        }
    }
    let mut set = ModelSet::new(cfg.spec.clone(), init)?;
    let mut log = ConvergenceLog::default();
    log.record(&set, 0, train, val)?;

    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut opts: Vec<AdamState> = set.params.iter().map(|p| AdamState::for_mlp(adam_cfg, p)).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(0);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(u64::MAX);
    let dropout = cfg.weights.baseline.dropout_rate();

    let n = train.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut epoch = 0;
    let mut last = LossBreakdown::default();

    for update in 0..cfg.n_updates {
        if cursor + bs > n {
            if update > 0 {
                epoch += 1;
                log.record(&set, epoch, train, val)?;
            }
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let mb = train.select(&order[cursor..cursor + bs]);
        cursor += bs;

        let dropped: Vec<Tensor>;
        let inputs = match dropout {
            Some(rate) => {
                dropped = (0..set.len())
                    .map(|_| drop_inputs(&mb.inputs, rate, &mut dropout_rng))
                    .collect();
                ModelInputs::PerModel(&dropped)
            }
            None => ModelInputs::Shared(&mb.inputs),
        };
        let (bd, grads) =
            evaluate_objective(&set.spec, &set.params, inputs, &mb.labels, manifold, &cfg.weights, true)
                .map_err(|e| diverged(e, update, &last))?;
        last = bd;
        log.zero_gradient_pairs += bd.zero_gradient_pairs;
        let grads = grads.expect("requested gradients");
        for ((p, g), opt) in set.params.iter_mut().zip(&grads).zip(opts.iter_mut()) {
            opt.step_mlp(p, g).map_err(|e| diverged(e, update, &last))?;
        }
        if !set.params.iter().all(MlpParams::all_finite) {
            return Err(diverged(
                Error::NonFiniteInput("parameters after update".into()),
                update,
                &last,
            ));
        }
    }
    if cfg.n_updates > 0 {
        log.record(&set, epoch + 1, train, val)?;
    }
    if log.zero_gradient_pairs > 0 {
        log::info!(
            "{} model pairs had vanishing gradients in the cosine guard",
            log.zero_gradient_pairs
        );
    }
    Ok((set, log))
}

fn diverged(e: Error, update: usize, last: &LossBreakdown) -> Error {
    match e {
        Error::NonFinite { term, detail } => Error::NonFinite {
            term,
            detail: Some(format!(
                "at update {update}{}; last finite breakdown {last:?}",
                detail.map(|d| format!(" ({d})")).unwrap_or_default()
            )),
        },
        other => other,
    }
}

/// Zeroes each entry with probability `rate` and rescales the survivors.
fn drop_inputs<R: Rng>(x: &Tensor, rate: f64, rng: &mut R) -> Tensor {
    let keep = 1.0 / (1.0 - rate);
    let data = x
        .data()
        .iter()
        .map(|&v| if rng.gen::<f64>() < rate { 0.0 } else { v * keep })
        .collect();
    Tensor::matrix(x.rows(), x.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::losses::{indep_loss, Baseline};
    use rand::Rng;

    fn two_axis_data(n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y: u8 = rng.gen_range(0..2);
            let s = 2.0 * f64::from(y) - 1.0;
            data.push(s * rng.gen_range(0.5..1.5));
            data.push(s * rng.gen_range(0.5..1.5));
            labels.push(y);
        }
        Batch::new(Tensor::matrix(n, 2, data).unwrap(), labels).unwrap()
    }

    fn small_cfg(m: usize, weights: LossWeights) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            n_updates: 300,
            lr: 0.01,
            seed: 5,
            ..TrainConfig::new(m, MlpSpec::with_hidden(2, &[8]).unwrap(), weights)
        }
    }

    #[test]
    fn shared_init_without_regularizers_gives_identical_models() {
        let data = two_axis_data(128, 1);
        let cfg = TrainConfig {
            shared_init: true,
            ..small_cfg(3, LossWeights::erm())
        };
        let (set, _) = train_models(&cfg, &data, &data, None).unwrap();
        assert_eq!(set.params[0], set.params[1]);
        assert_eq!(set.params[0], set.params[2]);
    }

    #[test]
    fn independence_makes_gradients_orthogonal() {
        let data = two_axis_data(256, 2);
        let cfg = TrainConfig {
            n_updates: 1500,
            ..small_cfg(2, LossWeights::soft(1.0, 0.0))
        };
        let (set, _) = train_models(&cfg, &data, &data, None).unwrap();
        let ok = data
            .inputs
            .iter_rows()
            .filter(|x| {
                let g1 = set.input_gradient(0, x).unwrap();
                let g2 = set.input_gradient(1, x).unwrap();
                indep_loss(&g1, &g2).unwrap() <= 0.05
            })
            .count();
        assert!(ok as f64 >= 0.95 * data.len() as f64, "{ok} of {}", data.len());
    }

    #[test]
    fn joint_erm_tracks_single_model_runs() {
        let data = two_axis_data(96, 3);
        let cfg = small_cfg(2, LossWeights::erm());
        let (joint, _) = train_models(&cfg, &data, &data, None).unwrap();
        for m in 0..2 {
            let single_cfg = TrainConfig {
                n_models: 1,
                ..cfg.clone()
            };
            let init = vec![init_model(&cfg.spec, cfg.seed, m)];
            let (single, _) = train_from(&single_cfg, init, &data, &data, None).unwrap();
            // the 1/M weighting only interacts with Adam's epsilon
            for (a, b) in joint.params[m].flatten().iter().zip(single.params[0].flatten()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn predictive_loss_decreases_and_is_logged_per_epoch() {
        let data = two_axis_data(128, 4);
        let cfg = small_cfg(2, LossWeights::soft(0.5, 0.0));
        let (set, log) = train_models(&cfg, &data, &data, None).unwrap();
        let epochs = 300 / 4;
        for m in 0..2 {
            let recs: Vec<_> = log.model(m).collect();
            assert_eq!(recs.len(), epochs + 1);
            assert!(recs.windows(2).all(|w| w[1].epoch > w[0].epoch));
            assert!(recs.last().unwrap().train_loss < recs[0].train_loss);
            assert_eq!(recs.last().unwrap().train_loss, set.predictive_loss(m, &data).unwrap());
        }
    }

    #[test]
    fn same_seed_same_result() {
        let data = two_axis_data(64, 5);
        let mut cfg = small_cfg(3, LossWeights::soft(1.0, 0.0));
        cfg.weights.baseline = Baseline::InputDropout { rate: 0.2 };
        let a = train_models(&cfg, &data, &data, None).unwrap();
        let b = train_models(&cfg, &data, &data, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_updates_keep_initialization() {
        let data = two_axis_data(16, 6);
        let cfg = TrainConfig {
            n_updates: 0,
            ..small_cfg(2, LossWeights::erm())
        };
        let (set, log) = train_models(&cfg, &data, &data, None).unwrap();
        assert_eq!(set.params[1], init_model(&cfg.spec, cfg.seed, 1));
        assert_eq!(log.records.len(), 2);
    }

    #[test]
    fn divergence_names_the_term() {
        let data = two_axis_data(16, 7);
        let cfg = TrainConfig {
            lr: 1e300,
            n_updates: 50,
            ..small_cfg(1, LossWeights::erm())
        };
        let err = train_models(&cfg, &data, &data, None).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn invalid_config_fields_are_named() {
        let data = two_axis_data(16, 7);
        let mut cfg = small_cfg(0, LossWeights::erm());
        let msg = train_models(&cfg, &data, &data, None).unwrap_err().to_string();
        assert!(msg.contains("n_models"), "{msg}");
        cfg.n_models = 1;
        cfg.batch_size = 0;
        let msg = train_models(&cfg, &data, &data, None).unwrap_err().to_string();
        assert!(msg.contains("batch_size"), "{msg}");
    }
}
