use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gliomaseg::models::UNet;
use gliomaseg::pipeline::{
    self, evaluate, gradcheck, load_cases, percentile_report, phantom_generate, split_cases,
    write_prediction, EpochRecord, EvaluationReport, PipelineConfig, PipelineError, Scale,
    Segmenter, TrainOutcome,
};
use gliomaseg::volume::{DatasetManifest, MultiModalCase};

const THREADS_VAR: &str = "GLIOMASEG_THREADS";

#[derive(Parser)]
#[command(
    name = "gliomaseg",
    version,
    about = "Two-stage brain-tumor segmentation"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration; keys missing from it come from the preset
    /// named by its `scale` field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no configuration file is given.
    #[arg(long, global = true, default_value = "toy")]
    scale: Scale,
    /// Override one setting, e.g. `--set multiclass.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Multiclass loss/optimizer row, e.g. `LC+A+LH` or `DL+CE+A`.
    #[arg(long, global = true)]
    row: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    All,
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the tumor detector; writes binary.ckpt and binary_log.jsonl.
    TrainBinary {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multiclass segmenter; writes multiclass.ckpt and
    /// multiclass_log.jsonl.
    TrainMulticlass {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full inference pipeline and store masks and confidence maps.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        multiclass: PathBuf,
        /// Required unless `use_roi` is off.
        #[arg(long)]
        binary: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
    },
    /// Score stored predictions against the manifest labels.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Where to write the JSON report; printed to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw percentile montages from an evaluation report.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let base = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::preset(self.scale),
        };
        let cfg = base.with_overrides(self.sets.iter().map(String::as_str))?;
        match &self.row {
            Some(row) => cfg.with_row(row),
            None => Ok(cfg),
        }
    }
}

fn init_threads() -> Result<(), PipelineError> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        PipelineError::Config(format!(
            "{THREADS_VAR} must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| PipelineError::Config(e.to_string()))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, PipelineError> {
    Ok(DatasetManifest::load(path)?)
}

/// Labelled cases split into training and validation by the config seed.
fn split_labelled(
    cfg: &PipelineConfig,
    manifest: &DatasetManifest,
) -> Result<(Vec<MultiModalCase>, Vec<MultiModalCase>), PipelineError> {
    let cases = load_cases(manifest, true)?;
    if cases.is_empty() {
        return Err(PipelineError::Data("manifest has no labelled cases".into()));
    }
    let (t, v) = split_cases(cases.len(), cfg.val_fraction, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| cases[i].clone()).collect::<Vec<_>>();
    Ok((pick(&t), pick(&v)))
}

fn log_epoch(r: &EpochRecord) {
    log::info!(
        "{} epoch {:>3}  loss {}  val dice {:.4}{}",
        r.stage.name(),
        r.epoch,
        r.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
        r.val_dice,
        if r.best { "  *" } else { "" }
    );
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(PipelineError::data)?;
    std::fs::write(path, text)?;
    Ok(())
}

type Trainer = fn(
    &PipelineConfig,
    &[MultiModalCase],
    &[MultiModalCase],
    Option<&Path>,
    &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, PipelineError>;

fn train(
    cfg: &PipelineConfig,
    manifest: &Path,
    out: &Path,
    trainer: Trainer,
) -> Result<(), PipelineError> {
    let manifest = load_manifest(manifest)?;
    let (train, val) = split_labelled(cfg, &manifest)?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(
        &out.join("split.json"),
        &serde_json::json!({
            "train": train.iter().map(|c| &c.case_id).collect::<Vec<_>>(),
            "val": val.iter().map(|c| &c.case_id).collect::<Vec<_>>(),
        }),
    )?;
    let outcome = trainer(cfg, &train, &val, Some(out), &mut log_epoch)?;
    println!(
        "{}",
        serde_json::json!({"best_epoch": outcome.best_epoch, "best_val_dice": outcome.best_val_dice})
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    init_threads()?;
    let cfg = cli.config.resolve()?;
    match cli.command {
        Command::Phantom { out } => {
            let m = phantom_generate(&cfg.phantom, &out)?;
            println!("{}", out.join("manifest.json").display());
            log::info!("wrote {} cases", m.cases.len());
        }
        Command::TrainBinary { manifest, out } => {
            train(&cfg, &manifest, &out, pipeline::train_binary)?
        }
        Command::TrainMulticlass { manifest, out } => {
            train(&cfg, &manifest, &out, pipeline::train_multiclass)?
        }
        Command::Predict {
            manifest,
            multiclass,
            binary,
            out,
            split,
        } => {
            let manifest = load_manifest(&manifest)?;
            let binary = match (&binary, cfg.use_roi) {
                (Some(p), true) => Some(UNet::load_for(&cfg.binary.model, p)?),
                (None, true) => {
                    return Err(PipelineError::Config(
                        "--binary is required when use_roi is on".into(),
                    ));
                }
                (_, false) => None,
            };
            let model = UNet::load_for(&cfg.multiclass.model, &multiclass)?;
            let segmenter = Segmenter::new(cfg.clone(), binary, model)?;
            let cases = match split {
                Split::All => load_cases(&manifest, false)?,
                Split::Train => split_labelled(&cfg, &manifest)?.0,
                Split::Val => split_labelled(&cfg, &manifest)?.1,
            };
            for case in &cases {
                let pred = segmenter.predict(case, cfg.tta)?;
                if pred.roi.as_ref().is_some_and(|r| r.fell_back) {
                    log::warn!(
                        "{}: no voxel above threshold, using the brain box",
                        case.case_id
                    );
                }
                write_prediction(&out, &pred)?;
                log::info!("{}: done", case.case_id);
            }
        }
        Command::Evaluate {
            manifest,
            predictions,
            out,
        } => {
            let report = evaluate(&load_manifest(&manifest)?, &predictions)?;
            match out {
                Some(path) => {
                    report.save(&path)?;
                    println!(
                        "{}",
                        serde_json::to_string(&report.aggregate).map_err(PipelineError::data)?
                    );
                }
                None => println!(
                    "{}",
                    serde_json::to_string_pretty(&report).map_err(PipelineError::data)?
                ),
            }
        }
        Command::Report {
            manifest,
            predictions,
            report,
            out,
        } => {
            let report = EvaluationReport::load(&report)?;
            for path in percentile_report(&report, &load_manifest(&manifest)?, &predictions, &out)?
            {
                println!("{}", path.display());
            }
        }
        Command::Gradcheck => {
            let entries = gradcheck::run_suite()?;
            for e in &entries {
                println!(
                    "{:<28} {:>10.3e}  {:>6} coords  {}",
                    e.name,
                    e.max_rel_error,
                    e.coordinates,
                    if e.passed { "ok" } else { "FAIL" }
                );
            }
            if !gradcheck::all_passed(&entries) {
                let worst = entries
                    .iter()
                    .filter(|e| !e.passed)
                    .map(|e| e.name.as_str())
                    .collect::<Vec<_>>()
                    .join(",");
                return Err(PipelineError::Numeric(format!(
                    "gradient check failed: {worst}"
                )));
            }
        }
    }
    Ok(())
}

fn fail(e: &PipelineError) -> ExitCode {
    let msg = e.to_string().replace('\n', " ");
    eprintln!("error[{}]: {msg}", e.kind());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ")
                .to_string();
            return fail(&PipelineError::Config(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
