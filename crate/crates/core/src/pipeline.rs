//! End-to-end run: data, dimension estimate, manifold, training, masks,
//! fine-tuning, distillation and evaluation, with every artifact written to
//! an output directory and hashed into a manifest.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ManifoldChoice, RunConfig, SelectorChoice, SCHEMA_VERSION};
use crate::data::io::{read_file, save_bundle, write_file};
use crate::data::{gen_collages, DatasetBundle};
use crate::error::{Error, Result};
use crate::evaluate::{accuracy, build_report, EvalReport, ReportInputs};
use crate::manifold::{estimate_intrinsic_dim, fit_pca, fit_pca_variance, train_autoencoder, AeSpec, ManifoldModel};
use crate::math::{MlpParams, MlpSpec, Tensor};
use crate::specialize::{compute_masks, finetune_all, greedy_distill, AuditTrail, MaskSet, SelectorStrategy};
use crate::training::{train_models, ConvergenceLog, ModelSet, TrainConfig};

/// Number of models or manifold dimensions implied by a dimension estimate.
pub fn dims_from_estimate(estimate: f64) -> usize {
    (estimate.round() as usize).max(1)
}

pub fn fit_manifold(choice: &ManifoldChoice, pool: &Tensor, d_manifold: usize, seed: u64) -> Result<ManifoldModel> {
    match choice {
        ManifoldChoice::Pca { n_components, retained_variance } => Ok(ManifoldModel::Pca(match retained_variance {
            Some(f) => fit_pca_variance(pool, *f)?,
            None => fit_pca(pool, n_components.unwrap_or(d_manifold))?,
        })),
        ManifoldChoice::Ae {
            d_latent,
            hidden,
            variational,
            kl_weight,
            output_activation,
            train,
        } => {
            let spec = AeSpec {
                hidden: hidden.clone(),
                variational: *variational,
                kl_weight: *kl_weight,
                output_activation: *output_activation,
                ..AeSpec::new(pool.cols(), d_latent.unwrap_or(d_manifold))
            };
            let train = crate::manifold::AeTrainConfig {
                seed,
                ..train.clone()
            };
            Ok(ManifoldModel::Ae(train_autoencoder(pool, &spec, &train)?))
        }
    }
}

pub fn train_config(cfg: &RunConfig, n_models: usize, d_in: usize) -> Result<TrainConfig> {
    let t = &cfg.train;
    Ok(TrainConfig {
        lr: t.lr,
        batch_size: t.batch_size,
        n_updates: t.n_updates,
        seed: cfg.seed,
        eps_tr: t.eps_tr,
        eps_val: t.eps_val,
        ..TrainConfig::new(n_models, MlpSpec::with_hidden(d_in, &t.hidden)?, t.weights)
    })
}

/// One distilled model and how it was chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledModel {
    /// Test set the selector targets, or `None` for in-domain selection.
    pub target: Option<usize>,
    /// `[test set]`
    pub accuracy: Vec<f64>,
    pub audit: AuditTrail,
}

/// Runs greedy distillation once per selector implied by `cfg.selector`.
pub fn distill_stage(
    cfg: &RunConfig,
    set: &ModelSet,
    masks: &MaskSet,
    data: &DatasetBundle,
) -> Result<Vec<(DistilledModel, MlpParams)>> {
    let Some(dcfg) = &cfg.distill else {
        return Ok(Vec::new());
    };
    let mut dcfg = dcfg.clone();
    dcfg.finetune.seed = cfg.seed;
    let targets: Vec<(Option<usize>, &crate::data::Batch, String)> = match cfg.selector {
        SelectorChoice::OodValPerTile => data
            .ood_val
            .iter()
            .enumerate()
            .map(|(t, b)| (Some(t), b, format!("ood_val_{t} accuracy")))
            .collect(),
        SelectorChoice::IdVal => vec![(None, &data.val_id, "val_id accuracy".to_string())],
    };
    let mut out = Vec::with_capacity(targets.len());
    for (target, batch, label) in targets {
        info!("distilling for {label}");
        let selector = SelectorStrategy::accuracy_on(label, batch);
        let outcome = greedy_distill(set, masks, &data.train, &selector, &dcfg)?;
        let accuracy = data
            .test_sets
            .iter()
            .map(|b| accuracy(&set.spec, &outcome.model, b))
            .collect::<Result<Vec<_>>>()?;
        out.push((
            DistilledModel {
                target,
                accuracy,
                audit: outcome.audit,
            },
            outcome.model,
        ));
    }
    Ok(out)
}

pub fn test_set_names(n: usize) -> Vec<String> {
    (0..n).map(|t| format!("tile {}", t + 1)).collect()
}

pub fn evaluate_stage(cfg: &RunConfig, set: &ModelSet, data: &DatasetBundle) -> Result<EvalReport> {
    let n_diag = cfg.evaluate.diagnostic_points.min(data.ood_pool.rows());
    let diag = data.ood_pool.select_rows(&(0..n_diag).collect::<Vec<_>>());
    build_report(&ReportInputs {
        set,
        train: &data.train,
        val: &data.val_id,
        pool: &data.ood_pool,
        test_sets: &data.test_sets,
        test_names: test_set_names(data.test_sets.len()),
        diagnostic_sample: &diag,
        eps_tr: cfg.train.eps_tr,
        eps_val: cfg.train.eps_val,
        delta: cfg.evaluate.delta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub seed: u64,
    pub true_intrinsic_dim: usize,
    pub dim_estimate: f64,
    pub n_models: usize,
    pub manifold_kind: String,
    pub manifold_dim: usize,
    pub zero_gradient_pairs: u64,
    pub trained: EvalReport,
    pub finetuned: Option<EvalReport>,
    pub distilled: Vec<DistilledModel>,
}

impl PipelineReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "seed {}  models {}  manifold {} ({} dims)\nintrinsic dimension estimate {:.3} (generator: {})\nzero-gradient pairs during training: {}\n",
            self.seed,
            self.n_models,
            self.manifold_kind,
            self.manifold_dim,
            self.dim_estimate,
            self.true_intrinsic_dim,
            self.zero_gradient_pairs
        );
        out.push_str("\n== Trained models ==\n");
        out.push_str(&self.trained.to_text());
        if let Some(ft) = &self.finetuned {
            out.push_str("\n== Fine-tuned models ==\n");
            out.push_str(&ft.to_text());
        }
        if !self.distilled.is_empty() {
            out.push_str("\n== Distilled models ==\n");
            for d in &self.distilled {
                let target = d.target.map_or_else(|| "in-domain".to_string(), |t| format!("tile {}", t + 1));
                let acc: Vec<String> = d.accuracy.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
                out.push_str(&format!(
                    "{target}: accuracy [{}] after {} combination(s), candidate {}\n",
                    acc.join(", "),
                    d.audit.entries.len(),
                    d.audit.best
                ));
            }
        }
        out
    }
}

pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub data: DatasetBundle,
    pub manifold: ManifoldModel,
    pub trained: ModelSet,
    pub log: ConvergenceLog,
    pub masks: Option<MaskSet>,
    pub finetuned: Option<ModelSet>,
    pub distilled: Vec<MlpParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub artifacts: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = read_file(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// Writes `<dir>/manifest.json` listing every file with its hash, paths
/// relative to `dir`.
pub fn write_manifest(dir: &Path, command: &str, config: serde_json::Value, files: &[PathBuf]) -> Result<PathBuf> {
    let mut artifacts = files
        .iter()
        .map(|p| {
            let (sha256, bytes) = sha256_file(p)?;
            let file = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
            Ok(ManifestEntry { file, sha256, bytes })
        })
        .collect::<Result<Vec<_>>>()?;
    artifacts.sort_by(|a, b| a.file.cmp(&b.file));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        config,
        artifacts,
    };
    let path = dir.join("manifest.json");
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Writes `bytes` under `dir` and records the path.
struct Sink<'a> {
    dir: Option<&'a Path>,
    files: Vec<PathBuf>,
}

impl Sink<'_> {
    fn put(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if let Some(dir) = self.dir {
            let p = dir.join(name);
            f(&p)?;
            self.files.push(p);
        }
        Ok(())
    }
}

/// Runs every stage. With `out`, artifacts, `report.json`, `report.txt` and
/// `manifest.json` are written there; `models` overrides the model count.
pub fn run_pipeline(cfg: &RunConfig, models: Option<usize>, out: Option<&Path>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut sink = Sink { dir: out, files: Vec::new() };

    let data = gen_collages(&cfg.seeded_data())?;
    if let Some(dir) = out {
        sink.files.extend(save_bundle(&dir.join("data"), &data)?);
    }

    let dim_estimate = estimate_intrinsic_dim(&data.ood_pool, cfg.dim_neighbors)?;
    let d_manifold = dims_from_estimate(dim_estimate);
    let n_models = models.or(cfg.models).unwrap_or(d_manifold);
    info!("intrinsic dimension {dim_estimate:.3}; training {n_models} models");

    let manifold = fit_manifold(&cfg.manifold, &data.ood_pool, d_manifold, cfg.seed)?;
    sink.put("manifold.bin", |p| crate::manifold::io::save(p, &manifold))?;

    let tcfg = train_config(cfg, n_models, data.train.d_in())?;
    let needs = tcfg.weights.needs_manifold();
    let (trained, log) = train_models(&tcfg, &data.train, &data.val_id, needs.then_some(&manifold))?;
    sink.put("models.bin", |p| crate::training::io::save(p, &trained))?;
    sink.put("convergence.csv", |p| crate::training::io::save_log(p, &log))?;

    let (masks, finetuned) = match &cfg.finetune {
        Some(fcfg) => {
            let masks = compute_masks(&trained, &data.train.inputs, cfg.mask_mode)?;
            let fcfg = crate::specialize::FinetuneConfig {
                seed: cfg.seed,
                ..fcfg.clone()
            };
            let ft = finetune_all(&trained, &data.train, &masks, &fcfg)?;
            sink.put("masks.bin", |p| crate::specialize::io::save(p, &masks))?;
            sink.put("finetuned.bin", |p| crate::training::io::save(p, &ft))?;
            (Some(masks), Some(ft))
        }
        None => (None, None),
    };

    let mut distilled_reports = Vec::new();
    let mut distilled = Vec::new();
    if let (Some(masks), Some(ft)) = (&masks, &finetuned) {
        if ft.len() >= 2 {
            for (k, (report, model)) in distill_stage(cfg, ft, masks, &data)?.into_iter().enumerate() {
                sink.put(&format!("distill_audit_{k}.json"), |p| {
                    crate::specialize::io::save_audit(p, &report.audit)
                })?;
                distilled_reports.push(report);
                distilled.push(model);
            }
            if !distilled.is_empty() {
                let set = ModelSet::new(ft.spec.clone(), distilled.clone())?;
                sink.put("distilled.bin", |p| crate::training::io::save(p, &set))?;
            }
        }
    }

    let report = PipelineReport {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        true_intrinsic_dim: data.meta.true_intrinsic_dim,
        dim_estimate,
        n_models,
        manifold_kind: manifold.kind().to_string(),
        manifold_dim: manifold.d_manifold(),
        zero_gradient_pairs: log.zero_gradient_pairs,
        trained: evaluate_stage(cfg, &trained, &data)?,
        finetuned: finetuned.as_ref().map(|ft| evaluate_stage(cfg, ft, &data)).transpose()?,
        distilled: distilled_reports,
    };
    let json = serde_json::to_string_pretty(&report)?;
    sink.put("report.json", |p| write_file(p, json.as_bytes()))?;
    let text = report.to_text();
    sink.put("report.txt", |p| write_file(p, text.as_bytes()))?;
    if let Some(dir) = out {
        let mut echo = serde_json::to_value(cfg)?;
        echo["models"] = serde_json::json!(n_models);
        write_manifest(dir, "pipeline", echo, &sink.files)?;
    }

    Ok(PipelineOutcome {
        report,
        data,
        manifold,
        trained,
        log,
        masks,
        finetuned,
        distilled,
    })
}
