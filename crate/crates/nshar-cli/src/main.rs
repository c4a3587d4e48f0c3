//! `nshar` — train and evaluate IMU activity-recognition models.
//!
//! Verbs: `synth` (generate a labeled dataset), `pretrain` (masked
//! reconstruction), `finetune` (classifier on a frozen encoder), `evaluate`
//! (test-split metrics), `experiment` (all arms on one shared split).
//!
//! Exit codes: 0 success; 1 usage, config, or data error; 2 numerical
//! failure (divergence or non-finite gradients).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Parser, Subcommand};

use nshar::config::ExperimentConfig;
use nshar::data;
use nshar::evaluation::curves_text;
use nshar::experiment::{self, ExperimentError};
use nshar::training::{self, TrainError};

#[derive(Parser)]
#[command(name = "nshar", version, about = "IMU activity recognition: pretrain, finetune, compare")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration file (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for run artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// How many experiment arms run concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset (CSV recordings + labels.txt).
    Synth {
        /// Number of activity classes (2–10).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Windows' worth of samples per class.
        #[arg(long = "per-class", default_value_t = 500)]
        per_class: usize,
    },
    /// Pretrain the encoder by masked reconstruction; writes encoder.ckpt.
    Pretrain,
    /// Train a classifier on a pretrained encoder; writes classifier.ckpt.
    Finetune {
        /// Encoder checkpoint to start from [default: <out>/encoder.ckpt].
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Keep the encoder frozen (=false trains it jointly).
        #[arg(long, action = ArgAction::Set)]
        freeze_encoder: Option<bool>,
    },
    /// Score a finetuned classifier on the held-out test split.
    Evaluate {
        /// Classifier checkpoint [default: <out>/classifier.ckpt].
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Run every configured arm on one shared split and compare them.
    Experiment,
}

enum CliError {
    /// Usage, config, or data problem → exit 1.
    Usage(String),
    /// Training blew up numerically → exit 2.
    Numerical(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

/// Divergence and gradient blow-ups are numerical failures; everything else
/// is the user's configuration or data.
fn is_numerical(e: &ExperimentError) -> bool {
    match e {
        ExperimentError::ArmFailed { source, .. } => is_numerical(source),
        ExperimentError::Train(TrainError::Diverged { .. } | TrainError::NonFiniteGrad(_)) => true,
        _ => false,
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        if is_numerical(&e) {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGrad(_) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let cfg = match path {
        Some(p) => ExperimentConfig::from_file(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("creating {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("writing {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = &cli.out;
    match cli.command {
        Command::Synth { classes, per_class } => {
            let recordings =
                data::synth_recordings(classes, per_class, data::TARGET_HZ, cfg.seed)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
            ensure_dir(out)?;
            data::write_labels(&data::synth_label_names(classes), &out.join("labels.txt"))
                .map_err(|e| CliError::Usage(e.to_string()))?;
            for rec in &recordings {
                data::write_recording_csv(rec, &out.join(format!("{}.csv", rec.source_id)))
                    .map_err(|e| CliError::Usage(e.to_string()))?;
            }
            println!(
                "wrote {} recordings ({} windows per class) to {}",
                recordings.len(),
                per_class,
                out.display()
            );
        }
        Command::Pretrain => {
            let (ckpt, report) = experiment::run_pretrain(&cfg)?;
            ensure_dir(out)?;
            training::save_checkpoint(&ckpt, &out.join("encoder.ckpt"))?;
            write_text(&out.join("curves.csv"), &curves_text(&[&report]))?;
            write_text(&out.join("summary.txt"), &report.summary_text())?;
            println!(
                "pretrained {}: best epoch {}, final val loss {:.6} -> {}",
                report.arm,
                report.best_epoch,
                report.val_loss.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Finetune { encoder, freeze_encoder } => {
            if let Some(freeze) = freeze_encoder {
                cfg.finetune.freeze_encoder = freeze;
            }
            let enc_path = encoder.unwrap_or_else(|| out.join("encoder.ckpt"));
            let enc = training::load_checkpoint(&enc_path)?;
            let (ckpt, report) = experiment::run_finetune(&cfg, &enc)?;
            ensure_dir(out)?;
            training::save_checkpoint(&ckpt, &out.join("classifier.ckpt"))?;
            write_text(&out.join("curves.csv"), &curves_text(&[&report]))?;
            write_text(&out.join("summary.txt"), &report.summary_text())?;
            println!(
                "finetuned {}: test accuracy {:.4}, macro-F1 {:.4} -> {}",
                report.arm,
                report.test_accuracy.unwrap_or(f64::NAN),
                report.macro_f1.unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Evaluate { classifier } => {
            let cls_path = classifier.unwrap_or_else(|| out.join("classifier.ckpt"));
            let cls = training::load_checkpoint(&cls_path)?;
            let eval = experiment::run_evaluate(&cfg, &cls)?;
            ensure_dir(out)?;
            let mut text = String::new();
            text.push_str(&format!("arm={}\n", eval.arm));
            text.push_str(&format!("windows={}\n", eval.windows));
            text.push_str(&format!("test_accuracy={:.8e}\n", eval.accuracy));
            text.push_str(&format!("macro_f1={:.8e}\n", eval.macro_f1));
            text.push_str(&format!("split_fingerprint={:016x}\n", eval.split_fingerprint));
            text.push_str(&format!("\n{}", eval.confusion));
            write_text(&out.join("summary.txt"), &text)?;
            print!("{text}");
        }
        Command::Experiment => {
            let output = experiment::run_experiment(&cfg, cli.threads)?;
            ensure_dir(out)?;
            for arm in &output.arms {
                let dir = out.join(&arm.name);
                ensure_dir(&dir)?;
                training::save_checkpoint(&arm.encoder, &dir.join("encoder.ckpt"))?;
                training::save_checkpoint(&arm.classifier, &dir.join("classifier.ckpt"))?;
                write_text(
                    &dir.join("curves.csv"),
                    &curves_text(&[&arm.pretrain_report, &arm.finetune_report]),
                )?;
                write_text(&dir.join("summary.txt"), &arm.finetune_report.summary_text())?;
            }
            write_text(&out.join("comparison.txt"), &output.comparison)?;
            write_text(&out.join("comparison.csv"), &output.comparison_csv)?;
            write_text(&out.join("curves.csv"), &output.curves)?;
            print!("{}", output.comparison);
        }
    }
    Ok(())
}
