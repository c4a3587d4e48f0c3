//! End-to-end arm orchestration: one stratified split shared by every arm,
//! per-arm feature construction + normalization, pretraining, finetuning,
//! and the cross-arm comparison table.
//!
//! An *arm* pairs an attention variant (`ns` or `vanilla`) with a feature
//! set (`fm` or `plain`); the four combinations make up the default
//! experiment. All arms see identical window splits (same fingerprint) so
//! accuracy differences come from the arms themselves, and each arm fits its
//! normalization on the training split only.

use thiserror::Error;

use crate::augment::{self, AugmentArm, FeatureWindow};
use crate::config::{ConfigError, DataSpec, ExperimentConfig};
use crate::data::{self, DataError, Window, TARGET_HZ, WINDOW_LEN};
use crate::evaluation::{
    accuracy, compare_arms, compare_arms_csv, curves_text, macro_f1, ConfusionMatrix, EvalError,
    RunReport,
};
use crate::model::ModelArm;
use crate::training::{classify_windows, finetune, pretrain, Checkpoint, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("arm '{arm}': {source}")]
    ArmFailed { arm: String, source: Box<ExperimentError> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] augment::AugmentError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Setup(String),
}

/// One experiment arm: attention variant × feature set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmSpec {
    pub model: ModelArm,
    pub augment: AugmentArm,
}

impl ArmSpec {
    /// The four canonical arms in report order.
    pub fn all() -> [ArmSpec; 4] {
        let (ns, va) = (ModelArm::Ns, ModelArm::Vanilla);
        let (fm, pl) = (AugmentArm::Fm, AugmentArm::Plain);
        [
            ArmSpec { model: ns, augment: fm },
            ArmSpec { model: ns, augment: pl },
            ArmSpec { model: va, augment: fm },
            ArmSpec { model: va, augment: pl },
        ]
    }

    /// Display name: `ns+fm`, `ns`, `vanilla+fm`, `vanilla`.
    pub fn name(&self) -> String {
        match self.augment {
            AugmentArm::Fm => format!("{}+fm", self.model.as_str()),
            AugmentArm::Plain => self.model.as_str().to_string(),
        }
    }

    /// Parse an arm name as written by [`ArmSpec::name`]; `+plain` may be
    /// spelled out.
    pub fn parse(text: &str) -> Result<ArmSpec, String> {
        let (model_part, augment_part) = match text.split_once('+') {
            Some((m, a)) => (m, Some(a)),
            None => (text, None),
        };
        let model = match model_part {
            "ns" => ModelArm::Ns,
            "vanilla" => ModelArm::Vanilla,
            other => return Err(format!("unknown arm '{text}': bad model part '{other}'")),
        };
        let augment = match augment_part {
            None | Some("plain") => AugmentArm::Plain,
            Some("fm") => AugmentArm::Fm,
            Some(other) => return Err(format!("unknown arm '{text}': bad feature part '{other}'")),
        };
        Ok(ArmSpec { model, augment })
    }
}

/// The shared raw-window split every arm trains on.
#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    /// Hash of (part, index, label) across the whole split; equal
    /// fingerprints mean arms saw identical data.
    pub fingerprint: u64,
    pub num_classes: usize,
}

/// Load or synthesize windows per the config and split them once,
/// stratified by class.
pub fn prepare_windows(cfg: &ExperimentConfig) -> Result<SplitWindows, ExperimentError> {
    let windows = match &cfg.data {
        DataSpec::Synth { classes, per_class } => {
            data::synth_dataset(*classes, *per_class, cfg.seed)?
        }
        DataSpec::Dir(dir) => {
            let (recordings, _names) = data::load_dataset(dir)?;
            let mut windows = Vec::new();
            for rec in &recordings {
                let rec = data::downsample(rec, TARGET_HZ)?;
                windows.extend(data::make_windows(&rec, WINDOW_LEN, WINDOW_LEN)?);
            }
            windows
        }
    };
    if windows.is_empty() {
        return Err(ExperimentError::Setup("dataset produced no windows".into()));
    }
    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let num_classes = labels.iter().max().unwrap() + 1;
    if num_classes < 2 {
        return Err(ExperimentError::Setup(format!(
            "dataset has {num_classes} class(es); need at least 2"
        )));
    }
    let parts = data::split_indices(&labels, cfg.split, cfg.seed)?;
    let fingerprint = data::split_fingerprint(&parts, &labels);
    let take = |idx: &[usize]| -> Vec<Window> { idx.iter().map(|&i| windows[i].clone()).collect() };
    let [train, val, test] = [take(&parts[0]), take(&parts[1]), take(&parts[2])];
    for (part, name) in [(&train, "train"), (&val, "val"), (&test, "test")] {
        if part.is_empty() {
            return Err(ExperimentError::Setup(format!(
                "{name} split is empty; dataset too small for fractions {:?}",
                cfg.split
            )));
        }
    }
    Ok(SplitWindows { train, val, test, fingerprint, num_classes })
}

/// One arm's artifacts: both checkpoints and both phase reports.
#[derive(Debug, Clone)]
pub struct ArmOutput {
    pub name: String,
    pub encoder: Checkpoint,
    pub classifier: Checkpoint,
    pub pretrain_report: RunReport,
    pub finetune_report: RunReport,
}

/// Featurize one split with the arm's feature map and the training split's
/// normalization.
fn featurize(
    windows: &SplitWindows,
    arm: AugmentArm,
) -> Result<([Vec<FeatureWindow>; 3], augment::NormStats), ExperimentError> {
    let train = arm.apply(&windows.train)?;
    let val = arm.apply(&windows.val)?;
    let test = arm.apply(&windows.test)?;
    let norm = augment::zscore_fit(&train)?;
    let apply = |part: &[FeatureWindow]| -> Result<Vec<FeatureWindow>, ExperimentError> {
        part.iter().map(|w| augment::zscore_apply(w, &norm)).collect::<Result<_, _>>().map_err(Into::into)
    };
    Ok(([apply(&train)?, apply(&val)?, apply(&test)?], norm))
}

/// Run one arm end-to-end on the shared split: features → pretrain →
/// frozen-encoder finetune.
pub fn run_arm(
    windows: &SplitWindows,
    spec: ArmSpec,
    cfg: &ExperimentConfig,
) -> Result<ArmOutput, ExperimentError> {
    let name = spec.name();
    let ([train, val, test], norm) = featurize(windows, spec.augment)?;
    let mcfg = cfg.encoder_for(spec);
    let (encoder, mut pretrain_report) = pretrain(&train, &val, &cfg.pretrain, &mcfg, &norm)?;
    let (classifier, mut finetune_report) =
        finetune(&train, &val, &test, &encoder, &cfg.finetune, windows.num_classes)?;
    pretrain_report.arm = format!("{name}:pretrain");
    pretrain_report.split_fingerprint = windows.fingerprint;
    finetune_report.arm = name.clone();
    finetune_report.split_fingerprint = windows.fingerprint;
    Ok(ArmOutput { name, encoder, classifier, pretrain_report, finetune_report })
}

/// Pretrain one encoder on the config's single arm (the pretrain command).
pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<(Checkpoint, RunReport), ExperimentError> {
    cfg.validate()?;
    let windows = prepare_windows(cfg)?;
    let spec = cfg.single_arm();
    let ([train, val, _], norm) = featurize(&windows, spec.augment)?;
    let mcfg = cfg.encoder_for(spec);
    let (ckpt, mut report) = pretrain(&train, &val, &cfg.pretrain, &mcfg, &norm)?;
    report.arm = format!("{}:pretrain", spec.name());
    report.split_fingerprint = windows.fingerprint;
    Ok((ckpt, report))
}

/// Check that a feature arm produces what a checkpoint's encoder expects.
fn check_features(spec_arm: AugmentArm, ckpt: &Checkpoint) -> Result<(), ExperimentError> {
    let want = ckpt.config.input_features;
    let have = spec_arm.channels();
    if want != have {
        return Err(ExperimentError::Setup(format!(
            "checkpoint encoder expects {want} input features but arm '{}' produces {have}",
            spec_arm.as_str()
        )));
    }
    Ok(())
}

/// Featurize the shared split for use with an existing checkpoint: the
/// checkpoint's stored normalization is applied, not a refit, so the encoder
/// sees the distribution it was trained on.
fn featurize_for_checkpoint(
    windows: &SplitWindows,
    arm: AugmentArm,
    ckpt: &Checkpoint,
) -> Result<[Vec<FeatureWindow>; 3], ExperimentError> {
    check_features(arm, ckpt)?;
    let apply = |part: &[Window]| -> Result<Vec<FeatureWindow>, ExperimentError> {
        arm.apply(part)?
            .iter()
            .map(|w| augment::zscore_apply(w, &ckpt.norm))
            .collect::<Result<_, _>>()
            .map_err(Into::into)
    };
    Ok([apply(&windows.train)?, apply(&windows.val)?, apply(&windows.test)?])
}

/// Finetune a classifier on an existing encoder (the finetune command). The
/// architecture comes from the checkpoint; the config only picks data,
/// feature arm, and the finetuning schedule.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    encoder: &Checkpoint,
) -> Result<(Checkpoint, RunReport), ExperimentError> {
    cfg.validate()?;
    let windows = prepare_windows(cfg)?;
    let [train, val, test] = featurize_for_checkpoint(&windows, cfg.augment, encoder)?;
    let (ckpt, mut report) =
        finetune(&train, &val, &test, encoder, &cfg.finetune, windows.num_classes)?;
    report.arm = ArmSpec { model: encoder.config.arm, augment: cfg.augment }.name();
    report.split_fingerprint = windows.fingerprint;
    Ok((ckpt, report))
}

/// Test-split metrics of a finetuned classifier (the evaluate command).
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub arm: String,
    pub windows: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub split_fingerprint: u64,
}

/// Re-derive the shared split and score a classifier checkpoint on its test
/// part.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    classifier: &Checkpoint,
) -> Result<EvalOutput, ExperimentError> {
    cfg.validate()?;
    let windows = prepare_windows(cfg)?;
    let [_, _, test] = featurize_for_checkpoint(&windows, cfg.augment, classifier)?;
    let preds = classify_windows(classifier, &test)?;
    let labels: Vec<usize> = test.iter().map(|w| w.label).collect();
    let num_classes = windows.num_classes.max(labels.iter().max().map_or(0, |m| m + 1));
    Ok(EvalOutput {
        arm: ArmSpec { model: classifier.config.arm, augment: cfg.augment }.name(),
        windows: test.len(),
        accuracy: accuracy(&preds, &labels)?,
        macro_f1: macro_f1(&preds, &labels, num_classes)?,
        confusion: ConfusionMatrix::from_preds(&preds, &labels, num_classes)?,
        split_fingerprint: windows.fingerprint,
    })
}

/// Everything the experiment command writes out.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub split_fingerprint: u64,
    pub arms: Vec<ArmOutput>,
    /// Aligned accuracy/macro-F1 table over the finetune reports.
    pub comparison: String,
    pub comparison_csv: String,
    /// Long-format loss curves for every arm and phase.
    pub curves: String,
}

/// Run every configured arm on one shared split, up to `threads` arms at a
/// time. Any arm failure aborts the experiment and names the arm.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    threads: usize,
) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    let specs = &cfg.arms;
    if specs.len() < 2 {
        return Err(ExperimentError::Setup(
            "an experiment needs at least two arms to compare".into(),
        ));
    }
    let windows = prepare_windows(cfg)?;
    let mut results: Vec<Option<Result<ArmOutput, ExperimentError>>> =
        specs.iter().map(|_| None).collect();
    let threads = threads.max(1);
    if threads == 1 {
        for (i, &spec) in specs.iter().enumerate() {
            results[i] = Some(run_arm(&windows, spec, cfg));
        }
    } else {
        for chunk_start in (0..specs.len()).step_by(threads) {
            let chunk: Vec<usize> =
                (chunk_start..(chunk_start + threads).min(specs.len())).collect();
            let chunk_results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&i| {
                        let (windows, cfg) = (&windows, &*cfg);
                        s.spawn(move || run_arm(windows, cfg.arms[i], cfg))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("arm thread panicked")).collect()
            });
            for (&i, r) in chunk.iter().zip(chunk_results) {
                results[i] = Some(r);
            }
        }
    }
    let mut arms = Vec::with_capacity(specs.len());
    for (spec, result) in specs.iter().zip(results) {
        match result.expect("every arm index was filled") {
            Ok(out) => arms.push(out),
            Err(e) => {
                return Err(ExperimentError::ArmFailed {
                    arm: spec.name(),
                    source: Box::new(e),
                });
            }
        }
    }
    let finetune_reports: Vec<&RunReport> = arms.iter().map(|a| &a.finetune_report).collect();
    let comparison = compare_arms(&finetune_reports)?;
    let comparison_csv = compare_arms_csv(&finetune_reports)?;
    let mut all_reports = Vec::with_capacity(arms.len() * 2);
    for arm in &arms {
        all_reports.push(&arm.pretrain_report);
        all_reports.push(&arm.finetune_report);
    }
    let curves = curves_text(&all_reports);
    Ok(ExperimentOutput {
        split_fingerprint: windows.fingerprint,
        arms,
        comparison,
        comparison_csv,
        curves,
    })
}

// ── tests ───────────────────────────────────────────────────────────────────
