//! Run configuration for the end-to-end pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io::read_file;
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::evaluate::DEFAULT_DELTA;
use crate::manifold::{Activation, AeTrainConfig, DEFAULT_NEIGHBORS};
use crate::specialize::{DistillConfig, FinetuneConfig, MaskMode};
use crate::training::{LossWeights, ManifoldMode};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that overrides [`RunConfig::seed`].
pub const SEED_ENV: &str = "UDS_SEED";

fn default_hidden() -> Vec<usize> {
    vec![8]
}

/// Classifier architecture and optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_weights")]
    pub weights: LossWeights,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_updates")]
    pub n_updates: usize,
    #[serde(default = "default_eps")]
    pub eps_tr: f64,
    #[serde(default = "default_eps")]
    pub eps_val: f64,
}

fn default_weights() -> LossWeights {
    LossWeights {
        mode: ManifoldMode::HardProjection,
        ..LossWeights::soft(DEFAULT_LAMBDA_INDEP, DEFAULT_LAMBDA_MANIFOLD)
    }
}
fn default_lr() -> f64 {
    0.002
}
fn default_batch() -> usize {
    256
}
fn default_updates() -> usize {
    DEFAULT_UPDATES
}
fn default_eps() -> f64 {
    0.3
}

pub const DEFAULT_LAMBDA_INDEP: f64 = 10.0;
pub const DEFAULT_LAMBDA_MANIFOLD: f64 = 0.0;
pub const DEFAULT_UPDATES: usize = 4000;
pub const DEFAULT_RETAINED_VARIANCE: f64 = 0.85;

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            weights: default_weights(),
            lr: default_lr(),
            batch_size: default_batch(),
            n_updates: default_updates(),
            eps_tr: default_eps(),
            eps_val: default_eps(),
        }
    }
}

/// Generative model of the data manifold. Unset sizes follow the estimated
/// intrinsic dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldChoice {
    Pca {
        #[serde(default)]
        n_components: Option<usize>,
        /// Keep the fewest components reaching this fraction of the variance.
        #[serde(default)]
        retained_variance: Option<f64>,
    },
    Ae {
        #[serde(default)]
        d_latent: Option<usize>,
        #[serde(default = "default_ae_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_true")]
        variational: bool,
        #[serde(default = "default_kl")]
        kl_weight: f64,
        #[serde(default = "default_ae_output")]
        output_activation: Activation,
        #[serde(default)]
        train: AeTrainConfig,
    },
}

fn default_ae_hidden() -> Vec<usize> {
    vec![64]
}
fn default_true() -> bool {
    true
}
fn default_kl() -> f64 {
    0.01
}
fn default_ae_output() -> Activation {
    Activation::Identity
}

impl Default for ManifoldChoice {
    fn default() -> Self {
        ManifoldChoice::Pca {
            n_components: None,
            retained_variance: Some(DEFAULT_RETAINED_VARIANCE),
        }
    }
}

/// Which held-out data ranks candidates during distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorChoice {
    /// One distillation per test distribution, scored on its validation split.
    #[default]
    OodValPerTile,
    /// A single distillation scored on in-domain validation data.
    IdVal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Pool rows used for the gradient diagnostics.
    #[serde(default = "default_diag")]
    pub diagnostic_points: usize,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}
fn default_diag() -> usize {
    200
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            delta: default_delta(),
            diagnostic_points: default_diag(),
        }
    }
}

fn default_finetune() -> Option<FinetuneConfig> {
    Some(FinetuneConfig::default())
}
fn default_distill() -> Option<DistillConfig> {
    Some(DistillConfig::default())
}

fn default_neighbors() -> usize {
    DEFAULT_NEIGHBORS
}

/// Complete description of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: GenConfig,
    /// Number of models; the rounded dimension estimate when unset.
    #[serde(default)]
    pub models: Option<usize>,
    #[serde(default = "default_neighbors")]
    pub dim_neighbors: usize,
    #[serde(default)]
    pub manifold: ManifoldChoice,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub mask_mode: MaskMode,
    /// Masked fine-tuning; `null` skips it.
    #[serde(default = "default_finetune")]
    pub finetune: Option<FinetuneConfig>,
    /// Greedy distillation; `null` skips it.
    #[serde(default = "default_distill")]
    pub distill: Option<DistillConfig>,
    #[serde(default)]
    pub selector: SelectorChoice,
    #[serde(default)]
    pub evaluate: EvalSettings,
    #[serde(default)]
    pub output_dir: Option<std::path::PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            data: GenConfig::default(),
            models: None,
            dim_neighbors: DEFAULT_NEIGHBORS,
            manifold: ManifoldChoice::default(),
            train: TrainSettings::default(),
            mask_mode: MaskMode::default(),
            finetune: default_finetune(),
            distill: default_distill(),
            selector: SelectorChoice::default(),
            evaluate: EvalSettings::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        Self::from_json(text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `UDS_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// The data configuration with the run seed applied.
    pub fn seeded_data(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        self.data.validate()?;
        if self.models == Some(0) {
            return Err(Error::config("models", "must be at least 1"));
        }
        if self.dim_neighbors < 2 {
            return Err(Error::config("dim_neighbors", "must be at least 2"));
        }
        match &self.manifold {
            ManifoldChoice::Pca { n_components: Some(0), .. } => {
                return Err(Error::config("manifold.n_components", "must be at least 1"))
            }
            ManifoldChoice::Pca { n_components: Some(_), retained_variance: Some(_) } => {
                return Err(Error::config("manifold.retained_variance", "cannot be combined with n_components"))
            }
            ManifoldChoice::Pca { retained_variance: Some(f), .. } if !(*f > 0.0 && *f <= 1.0) => {
                return Err(Error::config("manifold.retained_variance", format!("{f} is not in (0, 1]")))
            }
            ManifoldChoice::Ae { d_latent: Some(0), .. } => {
                return Err(Error::config("manifold.d_latent", "must be at least 1"))
            }
            _ => {}
        }
        let t = &self.train;
        t.weights.validate()?;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(Error::config("train.lr", format!("{} is not a positive number", t.lr)));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if let Some(f) = &self.finetune {
            f.validate()?;
        }
        if let Some(d) = &self.distill {
            d.finetune.validate()?;
            if self.finetune.is_none() {
                return Err(Error::config("distill", "needs fine-tuning to be enabled"));
            }
        }
        if !(self.evaluate.delta > 0.0 && self.evaluate.delta <= 1.0) {
            return Err(Error::config("evaluate.delta", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let again = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"schema_version": 1, "lambda_indep": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("lambda_indep"), "{err}");
        let err = RunConfig::from_json(
            r#"{"schema_version": 1, "train": {"weights": {"lambda_indep": 1, "lambda_manifod": 1}}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("lambda_manifod"), "{err}");
    }

    #[test]
    fn wrong_schema_version() {
        let err = RunConfig::from_json(r#"{"schema_version": 7}"#).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref field, .. } if field == "schema_version"));
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = RunConfig::from_json(
            r#"{
                "schema_version": 1,
                "seed": 4,
                "models": 3,
                "manifold": {"kind": "ae", "d_latent": 5, "train": {"lr": 0.001, "batch_size": 64, "epochs": 2, "seed": 0}},
                "train": {"weights": {"lambda_indep": 2, "lambda_manifold": 0.5, "mode": "hard_projection"}},
                "finetune": {"n_updates": 10},
                "distill": {"max_combinations": 2},
                "selector": "id_val"
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.models, Some(3));
        assert!(matches!(cfg.manifold, ManifoldChoice::Ae { d_latent: Some(5), .. }));
        assert_eq!(cfg.finetune.as_ref().unwrap().n_updates, 10);
        let d = cfg.distill.as_ref().unwrap();
        assert_eq!(d.max_combinations, 2);
        assert!(d.finetune.from_scratch);
        assert_eq!(cfg.selector, SelectorChoice::IdVal);
        assert_eq!(cfg.seeded_data().seed, 4);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_json(r#"{"schema_version": 1, "models": 0}"#).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref field, .. } if field == "models"));
        let err = RunConfig::from_json(r#"{"schema_version": 1, "finetune": null}"#).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref field, .. } if field == "distill"));
        let cfg = RunConfig::from_json(r#"{"schema_version": 1, "finetune": null, "distill": null}"#).unwrap();
        assert!(cfg.finetune.is_none());
        let err = RunConfig::from_json(r#"{"schema_version": 1, "train": {"lr": -1}}"#).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { ref field, .. } if field == "train.lr"));
    }
}
