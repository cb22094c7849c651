//! Experiment driver around the detection library.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 numerical
//! failure (diverged training, failed gradient check).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tadet_core::checkpoint;
use tadet_core::checks;
use tadet_core::config::ExperimentConfig;
use tadet_core::data;
use tadet_core::diversity;
use tadet_core::error::Error;
use tadet_core::eval;
use tadet_core::feedback::GuidanceMode;
use tadet_core::train;

#[derive(Parser)]
#[command(name = "tadet", version, about = "Temporal action detection with self-feedback transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; defaults to $TADET_OUTPUT_ROOT or ./runs.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn output_root(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| {
            std::env::var_os("TADET_OUTPUT_ROOT").map_or_else(|| PathBuf::from("runs"), PathBuf::from)
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    GenData {
        #[command(flatten)]
        common: ConfigArgs,
        /// Overwrite an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: ConfigArgs,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Guidance mode: cross_attention, identity, diversity_max or off.
        #[arg(long)]
        feedback: Option<String>,
        #[arg(long)]
        lambda_e: Option<f64>,
        #[arg(long)]
        lambda_d: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Remove the encoder entirely (collapse ablation).
        #[arg(long)]
        no_encoder: bool,
        /// Remove decoder self-attention (collapse ablation).
        #[arg(long)]
        no_decoder_sa: bool,
        /// Resume from a checkpoint written by an identical config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or re-score a results file) against a dataset.
    Eval {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "results")]
        checkpoint: Option<PathBuf>,
        /// Score an existing results JSON instead of running a model.
        #[arg(long)]
        results: Option<PathBuf>,
        /// tIoU thresholds, comma separated.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Per-layer self-attention diversity of a trained model.
    Diversity {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation videos to sample.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Also dump attention maps of the first sampled video as CSV.
        #[arg(long)]
        export_attention: bool,
    },
    /// Finite-difference checks for every differentiable operation.
    GradCheck,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err
                .downcast_ref::<Error>()
                .map(|e| matches!(e, Error::NonFinite(_)))
                .unwrap_or(false);
            if numerical {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData { common, force } => gen_data(&common, force),
        Command::Train {
            common,
            data,
            feedback,
            lambda_e,
            lambda_d,
            epochs,
            batch_size,
            no_encoder,
            no_decoder_sa,
            resume,
        } => {
            let mut cfg = common.load()?;
            if let Some(mode) = feedback {
                cfg.feedback.guidance = parse_guidance(&mode)?;
            }
            if let Some(v) = lambda_e {
                cfg.feedback.lambda_e = v;
            }
            if let Some(v) = lambda_d {
                cfg.feedback.lambda_d = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if no_encoder {
                cfg.model.num_encoder_layers = 0;
            }
            if no_decoder_sa {
                cfg.model.decoder_self_attention = false;
            }
            run_train(&cfg, &data, &common.output_root(), resume.as_deref())
        }
        Command::Eval { common, data, checkpoint, results, thresholds } => {
            run_eval(&common, &data, checkpoint.as_deref(), results.as_deref(), thresholds)
        }
        Command::Diversity { common, data, checkpoint, samples, export_attention } => {
            run_diversity(&common, &data, &checkpoint, samples, export_attention)
        }
        Command::GradCheck => grad_check_table(),
    }
}

fn parse_guidance(mode: &str) -> anyhow::Result<GuidanceMode> {
    match mode {
        "cross_attention" | "cross-attention" => Ok(GuidanceMode::CrossAttention),
        "identity" => Ok(GuidanceMode::Identity),
        "diversity_max" | "diversity-max" => Ok(GuidanceMode::DiversityMax),
        "off" => Ok(GuidanceMode::Off),
        other => anyhow::bail!(Error::Config(format!("unknown guidance mode {other}"))),
    }
}

fn gen_data(common: &ConfigArgs, force: bool) -> anyhow::Result<ExitCode> {
    let cfg = common.load()?;
    cfg.validate()?;
    let dir = data::dataset_dir(&common.output_root());
    if dir.exists() && dir.read_dir()?.next().is_some() && !force {
        anyhow::bail!(Error::Config(format!(
            "{} exists and is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    let dataset = data::generate_synthetic(&cfg.data.synth)?;
    let manifest = data::save_dataset(&dir, &dataset, cfg.data.synth.seq_len, &cfg.hash(), cfg.data.synth.seed)?;
    println!(
        "dataset written to {} ({} train / {} test videos, {} classes, hash {})",
        dir.display(),
        manifest.train.len(),
        manifest.test.len(),
        manifest.num_classes,
        manifest.config_hash,
    );
    Ok(ExitCode::SUCCESS)
}

fn run_train(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_root: &Path,
    resume: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    cfg.validate()?;
    let (dataset, _manifest) = data::load_dataset(data_dir)?;
    let out_dir = out_root.join(format!("train_{}_seed{}", cfg.hash(), cfg.seed));
    let summary = train::train(cfg, &dataset, &out_dir, resume)?;
    println!(
        "trained {} epochs (hash {}); final epoch loss {:.6}",
        summary.epochs_run, summary.config_hash, summary.final_epoch_loss
    );
    println!("checkpoint: {}", summary.checkpoint.display());
    println!("log: {}", summary.log.display());
    Ok(ExitCode::SUCCESS)
}

fn run_eval(
    common: &ConfigArgs,
    data_dir: &Path,
    ckpt: Option<&Path>,
    results_path: Option<&Path>,
    thresholds: Option<Vec<f64>>,
) -> anyhow::Result<ExitCode> {
    let (dataset, _manifest) = data::load_dataset(data_dir)?;
    let out_root = common.output_root();
    std::fs::create_dir_all(&out_root)?;

    let (results, cfg, label) = match (ckpt, results_path) {
        (Some(ckpt_path), None) => {
            let restored = checkpoint::restore(ckpt_path)?;
            let cfg = restored.header.config.clone();
            if let Some(user_cfg) = &common.config {
                let user = ExperimentConfig::from_json_file(user_cfg)?;
                if user.hash() != restored.header.config_hash {
                    eprintln!(
                        "warning: config hash {} differs from checkpoint hash {}; using the checkpoint's config",
                        user.hash(),
                        restored.header.config_hash
                    );
                }
            }
            let results = eval::run_detection(
                &restored.model,
                &dataset.test,
                &cfg.data.windowing,
                &cfg.eval,
            )?;
            (results, cfg, ckpt_path.display().to_string())
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            let results: Vec<eval::VideoResult> = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("results file: {e}")))?;
            (results, common.load()?, path.display().to_string())
        }
        _ => anyhow::bail!(Error::Config("pass exactly one of --checkpoint or --results".into())),
    };

    let thresholds = thresholds.unwrap_or_else(|| cfg.eval.thresholds.clone());
    let report = eval::mean_ap(&results, &dataset.test, &thresholds)?;

    println!("evaluated {label}");
    for (t, m) in report.thresholds.iter().zip(&report.map_per_threshold) {
        println!("  mAP@{t:.2} = {m:.4}");
    }
    println!("  average = {:.4}", report.average_map);

    let results_file = out_root.join("results.json");
    std::fs::write(&results_file, serde_json::to_string_pretty(&results)?)?;
    let metrics = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "source": label,
        "map": report,
    });
    let metrics_file = out_root.join("metrics.json");
    std::fs::write(&metrics_file, serde_json::to_string_pretty(&metrics)?)?;
    println!("results: {}", results_file.display());
    println!("metrics: {}", metrics_file.display());
    Ok(ExitCode::SUCCESS)
}

fn run_diversity(
    common: &ConfigArgs,
    data_dir: &Path,
    ckpt_path: &Path,
    samples: usize,
    export: bool,
) -> anyhow::Result<ExitCode> {
    let (dataset, _manifest) = data::load_dataset(data_dir)?;
    let restored = checkpoint::restore(ckpt_path)?;
    let report = diversity::diversity_report(
        &restored.model,
        &dataset.test,
        samples,
        restored.header.config.seed,
        &restored.header.config_hash,
    )?;
    println!("diversity over {} samples (hash {})", report.sample_count, report.config_hash);
    for (i, d) in report.enc_self.iter().enumerate() {
        println!("  enc_self layer {i}: d = {d:.6}");
    }
    for (i, d) in report.dec_self.iter().enumerate() {
        println!("  dec_self layer {i}: d = {d:.6}");
    }
    let out_root = common.output_root();
    std::fs::create_dir_all(&out_root)?;
    let path = out_root.join("diversity.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!("report: {}", path.display());

    if export {
        let target = dataset.test.first().ok_or_else(|| Error::Config("empty test split".into()))?;
        let dir = out_root.join("attention");
        let manifest = diversity::export_attention(&restored.model, target, &dir)?;
        println!("exported {} attention maps to {}", manifest.maps.len(), dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check_table() -> anyhow::Result<ExitCode> {
    let results = checks::run_all()?;
    let mut all_pass = true;
    println!("{:<40} {:>14} {:>10} {:>6}", "operation", "max rel err", "tolerance", "state");
    for r in &results {
        all_pass &= r.pass();
        println!(
            "{:<40} {:>14.3e} {:>10.1e} {:>6}",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.pass() { "pass" } else { "FAIL" }
        );
    }
    if all_pass {
        println!("all {} checks passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient checks failed");
        Ok(ExitCode::from(2))
    }
}
