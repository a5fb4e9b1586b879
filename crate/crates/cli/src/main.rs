use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use underspec::config::RunConfig;
use underspec::data::io::{load, load_bundle, save_bundle};
use underspec::data::{gen_collages, DatasetBundle};
use underspec::manifold::estimate_intrinsic_dim;
use underspec::pipeline::{
    dims_from_estimate, distill_stage, evaluate_stage, fit_manifold, run_pipeline, train_config, write_manifest,
};
use underspec::specialize::{compute_masks, finetune_all, FinetuneConfig};
use underspec::training::{train_models, ModelSet};
use underspec::Error;

#[derive(Parser)]
#[command(name = "underspec", version, about = "Train sets of locally independent, on-manifold predictors")]
struct Cli {
    /// Worker threads for per-model work; 1 gives bit-reproducible runs.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic collage splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the intrinsic dimension of the unlabeled pool.
    EstimateDim {
        /// Dataset directory written by `gen-data`.
        #[arg(long, conflicts_with = "pool")]
        data: Option<PathBuf>,
        /// Any dataset file; its inputs are used.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value_t = underspec::manifold::DEFAULT_NEIGHBORS)]
        neighbors: usize,
    },
    /// Fit the manifold model on the pool.
    FitManifold {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Manifold dimension when the config leaves it unset; estimated otherwise.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train a set of models with the configured objective.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifold: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of models; defaults to the config value, then the manifold dimension.
        #[arg(long)]
        models: Option<usize>,
    },
    /// Compute per-instance masks on the training set.
    Masks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune every model on its own masked data.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedily combine models into one per selector.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy, disagreement and gradient diagnostics of a model set.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Every stage end to end.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the number of models derived from the dimension estimate.
        #[arg(long)]
        models: Option<usize>,
    },
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            4
        } else if e.is_file_error() {
            3
        } else {
            2
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

/// Reads a run config; unreadable files are file errors, bad contents are
/// invalid arguments.
fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure {
        code: 3,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    cfg.apply_seed_env()?;
    Ok(cfg)
}

fn out_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| Failure {
        code: 3,
        message: format!("cannot create {}: {e}", path.display()),
    })
}

fn load_data(dir: &Path, cfg: &RunConfig) -> CliResult<DatasetBundle> {
    let data = load_bundle(dir)?;
    if data.meta.config.d_in() != cfg.data.d_in() {
        return Err(invalid(format!(
            "dataset in {} has {} inputs but the config describes {}",
            dir.display(),
            data.meta.config.d_in(),
            cfg.data.d_in()
        )));
    }
    Ok(data)
}

fn load_models(path: &Path, data: &DatasetBundle) -> CliResult<ModelSet> {
    let set = underspec::training::io::load(path)?;
    if set.d_in() != data.train.d_in() {
        return Err(invalid(format!(
            "models in {} take {} inputs, data has {}",
            path.display(),
            set.d_in(),
            data.train.d_in()
        )));
    }
    Ok(set)
}

fn manifest(dir: &Path, command: &str, cfg: &RunConfig, files: &[PathBuf]) -> CliResult<()> {
    let echo = serde_json::to_value(cfg).map_err(Error::from)?;
    write_manifest(dir, command, echo, files)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = read_config(&config)?;
            let data = gen_collages(&cfg.seeded_data())?;
            out_dir(&out)?;
            let files = save_bundle(&out, &data)?;
            manifest(&out, "gen-data", &cfg, &files)?;
            println!(
                "wrote {} files to {} (d_in {}, intrinsic dimension {})",
                files.len(),
                out.display(),
                data.train.d_in(),
                data.meta.true_intrinsic_dim
            );
        }
        Command::EstimateDim { data, pool, neighbors } => {
            let pool = match (data, pool) {
                (Some(dir), None) => load(&dir.join("ood_pool.uds"))?.into_inputs(),
                (None, Some(file)) => load(&file)?.into_inputs(),
                _ => return Err(invalid("pass exactly one of --data or --pool")),
            };
            let d = estimate_intrinsic_dim(&pool, neighbors)?;
            println!("intrinsic dimension estimate: {d:.3}");
        }
        Command::FitManifold { config, data, out, dim } => {
            let cfg = read_config(&config)?;
            let data = load_data(&data, &cfg)?;
            let d = match dim {
                Some(0) => return Err(invalid("--dim must be at least 1")),
                Some(d) => d,
                None => {
                    let e = estimate_intrinsic_dim(&data.ood_pool, cfg.dim_neighbors)?;
                    info!("intrinsic dimension estimate {e:.3}");
                    dims_from_estimate(e)
                }
            };
            let mf = fit_manifold(&cfg.manifold, &data.ood_pool, d, cfg.seed)?;
            out_dir(&out)?;
            let path = out.join("manifold.bin");
            underspec::manifold::io::save(&path, &mf)?;
            manifest(&out, "fit-manifold", &cfg, &[path])?;
            println!("{} manifold with {} dimensions", mf.kind(), mf.d_manifold());
        }
        Command::Train {
            config,
            data,
            manifold,
            out,
            models,
        } => {
            let cfg = read_config(&config)?;
            let data = load_data(&data, &cfg)?;
            let mf = manifold.as_deref().map(underspec::manifold::io::load).transpose()?;
            let n_models = models
                .or(cfg.models)
                .or(mf.as_ref().map(|m| m.d_manifold()))
                .ok_or_else(|| invalid("set --models, `models` in the config, or pass --manifold"))?;
            if n_models == 0 {
                return Err(invalid("--models must be at least 1"));
            }
            let tcfg = train_config(&cfg, n_models, data.train.d_in())?;
            if tcfg.weights.needs_manifold() && mf.is_none() {
                return Err(invalid("these loss weights need --manifold"));
            }
            let (set, log) = train_models(&tcfg, &data.train, &data.val_id, mf.as_ref())?;
            out_dir(&out)?;
            let models_path = out.join("models.bin");
            let log_path = out.join("convergence.csv");
            underspec::training::io::save(&models_path, &set)?;
            underspec::training::io::save_log(&log_path, &log)?;
            manifest(&out, "train", &cfg, &[models_path, log_path])?;
            for m in 0..set.len() {
                if let Some(r) = log.last(m) {
                    println!("model {m}: train {:.4} val {:.4}", r.train_loss, r.val_loss);
                }
            }
        }
        Command::Masks {
            config,
            data,
            models,
            out,
        } => {
            let cfg = read_config(&config)?;
            let data = load_data(&data, &cfg)?;
            let set = load_models(&models, &data)?;
            let masks = compute_masks(&set, &data.train.inputs, cfg.mask_mode)?;
            out_dir(&out)?;
            let path = out.join("masks.bin");
            underspec::specialize::io::save(&path, &masks)?;
            manifest(&out, "masks", &cfg, &[path])?;
            let ranges: Vec<_> = (0..cfg.data.n_tiles).map(|t| cfg.data.tile_range(t)).collect();
            for m in 0..set.len() {
                let cov: Vec<String> = masks.coverage(m, &ranges).iter().map(|c| format!("{:.2}", c)).collect();
                println!("model {m}: share of each tile [{}]", cov.join(", "));
            }
        }
        Command::Finetune {
            config,
            data,
            models,
            masks,
            out,
        } => {
            let cfg = read_config(&config)?;
            let data = load_data(&data, &cfg)?;
            let set = load_models(&models, &data)?;
            let masks = underspec::specialize::io::load(&masks)?;
            let fcfg = FinetuneConfig {
                seed: cfg.seed,
                ..cfg.finetune.clone().unwrap_or_default()
            };
            let ft = finetune_all(&set, &data.train, &masks, &fcfg)?;
            out_dir(&out)?;
            let path = out.join("finetuned.bin");
            underspec::training::io::save(&path, &ft)?;
            manifest(&out, "finetune", &cfg, &[path])?;
        }
        Command::Distill {
            config,
            data,
            models,
            masks,
            out,
        } => {
            let mut cfg = read_config(&config)?;
            let data = load_data(&data, &cfg)?;
            let set = load_models(&models, &data)?;
            let masks = underspec::specialize::io::load(&masks)?;
            if cfg.distill.is_none() {
                cfg.distill = Some(Default::default());
            }
            let results = distill_stage(&cfg, &set, &masks, &data)?;
            out_dir(&out)?;
            let mut files = Vec::new();
            let mut params = Vec::new();
            for (k, (report, model)) in results.into_iter().enumerate() {
                let p = out.join(format!("distill_audit_{k}.json"));
                underspec::specialize::io::save_audit(&p, &report.audit)?;
                files.push(p);
                let acc: Vec<String> = report.accuracy.iter().map(|a| format!("{:.1}", 100.0 * a)).collect();
                println!("{}: [{}]", report.audit.selector, acc.join(", "));
                params.push(model);
            }
            let path = out.join("distilled.bin");
            underspec::training::io::save(&path, &ModelSet::new(set.spec.clone(), params)?)?;
            files.push(path);
            manifest(&out, "distill", &cfg, &files)?;
        }
        Command::Evaluate {
            config,
            data,
            models,
            out,
        } => {
            let cfg = read_config(&config)?;
            let data = load_data(&data, &cfg)?;
            let set = load_models(&models, &data)?;
            let report = evaluate_stage(&cfg, &set, &data)?;
            out_dir(&out)?;
            let json = out.join("report.json");
            let txt = out.join("report.txt");
            let body = serde_json::to_string_pretty(&report).map_err(Error::from)?;
            write(&json, body.as_bytes())?;
            let text = report.to_text();
            write(&txt, text.as_bytes())?;
            manifest(&out, "evaluate", &cfg, &[json, txt])?;
            print!("{text}");
        }
        Command::Pipeline { config, out, models } => {
            let cfg = read_config(&config)?;
            if models == Some(0) {
                return Err(invalid("--models must be at least 1"));
            }
            let outcome = run_pipeline(&cfg, models, Some(&out))?;
            print!("{}", outcome.report.to_text());
        }
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Failure {
        code: 3,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: cannot start {} workers: {e}", cli.workers);
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
