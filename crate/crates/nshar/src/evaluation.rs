//! Metrics and reporting: accuracy, macro-F1, confusion matrices, loss-curve
//! CSV export, and the arm-comparison table.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::rng::fnv1a_64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {preds} predictions vs {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("need at least two reports to compare")]
    TooFewReports,
    #[error("report '{0}' carries no test metrics")]
    MissingMetrics(String),
    #[error("reports cover different test splits ('{0}' vs '{1}')")]
    SplitMismatch(String, String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Fraction of predictions matching labels.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Row-major class-confusion counts; rows index the true label, columns the
/// prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn from_preds(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Self, EvalError> {
        if preds.is_empty() {
            return Err(EvalError::Empty);
        }
        if preds.len() != labels.len() {
            return Err(EvalError::LengthMismatch { preds: preds.len(), labels: labels.len() });
        }
        let mut counts = vec![0usize; num_classes * num_classes];
        for (&p, &l) in preds.iter().zip(labels) {
            for v in [p, l] {
                if v >= num_classes {
                    return Err(EvalError::LabelOutOfRange { label: v, num_classes });
                }
            }
            counts[l * num_classes + p] += 1;
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> usize {
        self.counts[true_class * self.num_classes + predicted]
    }

    pub fn trace(&self) -> usize {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Per-true-class test counts.
    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.num_classes)
            .map(|i| (0..self.num_classes).map(|j| self.get(i, j)).sum())
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Per-class F1; a class absent from both rows and columns scores 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let row: f64 = (0..self.num_classes).map(|j| self.get(c, j)).sum::<usize>() as f64;
                let col: f64 = (0..self.num_classes).map(|i| self.get(i, c)).sum::<usize>() as f64;
                if row + col == 0.0 {
                    return 0.0;
                }
                let precision = if col > 0.0 { tp / col } else { 0.0 };
                let recall = if row > 0.0 { tp / row } else { 0.0 };
                if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let f1 = self.per_class_f1();
        f1.iter().sum::<f64>() / f1.len() as f64
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.counts.iter().max().copied().unwrap_or(0).to_string().len().max(4);
        write!(f, "true\\pred")?;
        for j in 0..self.num_classes {
            write!(f, " {j:>width$}")?;
        }
        writeln!(f)?;
        for i in 0..self.num_classes {
            write!(f, "{i:>9}")?;
            for j in 0..self.num_classes {
                write!(f, " {:>width$}", self.get(i, j))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Unweighted mean of per-class F1 scores.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64, EvalError> {
    Ok(ConfusionMatrix::from_preds(preds, labels, num_classes)?.macro_f1())
}

/// Everything one training run reports: loss/accuracy series plus final test
/// metrics (absent on pretraining runs).
#[derive(Debug, Clone)]
pub struct RunReport {
    pub arm: String,
    pub seed: u64,
    /// Per-epoch series; index 0 is the pre-update state.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Per-epoch validation accuracy (finetuning only; empty for pretraining).
    pub val_accuracy: Vec<f64>,
    /// Epoch whose parameters the returned checkpoint carries.
    pub best_epoch: usize,
    pub test_accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub confusion: Option<ConfusionMatrix>,
    /// Flat key=value echo of the configuration that produced the run.
    pub config_echo: String,
    /// Fingerprint of the train/val/test partition the run used.
    pub split_fingerprint: u64,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn config_hash(&self) -> u64 {
        fnv1a_64(self.config_echo.as_bytes())
    }

    pub fn initial_train_loss(&self) -> Option<f64> {
        self.train_loss.first().copied()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_loss.last().copied()
    }

    /// Cross-checks the redundant fields; used by tests and the CLI.
    pub fn check_invariants(&self) -> Result<(), String> {
        if let (Some(acc), Some(cm)) = (self.test_accuracy, &self.confusion) {
            if (cm.accuracy() - acc).abs() > 1e-12 {
                return Err(format!("accuracy {} != confusion trace ratio {}", acc, cm.accuracy()));
            }
        }
        if let (Some(f1), Some(cm)) = (self.macro_f1, &self.confusion) {
            if (cm.macro_f1() - f1).abs() > 1e-12 {
                return Err(format!("macro_f1 {} != confusion-derived {}", f1, cm.macro_f1()));
            }
        }
        for series in [&self.train_loss, &self.val_loss] {
            if series.iter().any(|v| !v.is_finite()) {
                return Err("non-finite loss in series".into());
            }
        }
        Ok(())
    }

    /// Deterministic key=value summary (no wall-clock entries).
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("arm={}\n", self.arm));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("config_hash={:016x}\n", self.config_hash()));
        out.push_str(&format!("split_fingerprint={:016x}\n", self.split_fingerprint));
        out.push_str(&format!("best_epoch={}\n", self.best_epoch));
        if let Some(v) = self.initial_train_loss() {
            out.push_str(&format!("initial_train_loss={}\n", sig9(v)));
        }
        if let Some(v) = self.final_train_loss() {
            out.push_str(&format!("final_train_loss={}\n", sig9(v)));
        }
        if let Some(v) = self.val_loss.last() {
            out.push_str(&format!("final_val_loss={}\n", sig9(*v)));
        }
        if let Some(acc) = self.test_accuracy {
            out.push_str(&format!("test_accuracy={:.6}\n", acc));
        }
        if let Some(f1) = self.macro_f1 {
            out.push_str(&format!("macro_f1={:.6}\n", f1));
        }
        out
    }
}

/// Nine significant digits, round-trip parseable.
fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Loss curves as `epoch,arm,split,loss` CSV text.
pub fn curves_text(reports: &[&RunReport]) -> String {
    let mut out = String::from("epoch,arm,split,loss\n");
    for r in reports {
        for (split, series) in [("train", &r.train_loss), ("val", &r.val_loss)] {
            for (epoch, loss) in series.iter().enumerate() {
                out.push_str(&format!("{epoch},{},{split},{}\n", r.arm, sig9(*loss)));
            }
        }
    }
    out
}

/// Write the loss curves of several runs to one CSV file.
pub fn export_curves(reports: &[&RunReport], path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, curves_text(reports))
        .map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

/// Aligned text table comparing finetuned arms; best column values flagged
/// with `*` (ties flag every winner).
pub fn compare_arms(reports: &[&RunReport]) -> Result<String, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports);
    }
    let mut rows = Vec::new();
    for r in reports {
        let acc = r.test_accuracy.ok_or_else(|| EvalError::MissingMetrics(r.arm.clone()))?;
        let f1 = r.macro_f1.ok_or_else(|| EvalError::MissingMetrics(r.arm.clone()))?;
        rows.push((r.arm.clone(), acc, f1));
    }
    for pair in reports.windows(2) {
        if pair[0].split_fingerprint != pair[1].split_fingerprint {
            return Err(EvalError::SplitMismatch(pair[0].arm.clone(), pair[1].arm.clone()));
        }
    }
    let best_acc = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let best_f1 = rows.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let arm_w = rows.iter().map(|r| r.0.len()).chain(std::iter::once(3)).max().unwrap();
    let mut out = format!("{:<arm_w$}  {:>10}  {:>10}\n", "arm", "accuracy", "macro_f1");
    for (arm, acc, f1) in &rows {
        let acc_cell = format!("{:.4}{}", acc, if *acc == best_acc { " *" } else { "  " });
        let f1_cell = format!("{:.4}{}", f1, if *f1 == best_f1 { " *" } else { "  " });
        out.push_str(&format!("{arm:<arm_w$}  {acc_cell:>10}  {f1_cell:>10}\n"));
    }
    Ok(out)
}

/// Machine-readable companion to [`compare_arms`].
pub fn compare_arms_csv(reports: &[&RunReport]) -> Result<String, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewReports);
    }
    let best_acc = reports
        .iter()
        .filter_map(|r| r.test_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::from("arm,accuracy,macro_f1,best\n");
    for r in reports {
        let acc = r.test_accuracy.ok_or_else(|| EvalError::MissingMetrics(r.arm.clone()))?;
        let f1 = r.macro_f1.ok_or_else(|| EvalError::MissingMetrics(r.arm.clone()))?;
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.arm,
            acc,
            f1,
            if acc == best_acc { 1 } else { 0 }
        ));
    }
    Ok(out)
}

/// First epoch (1-based series index) whose value reaches `threshold`;
/// `series.len()` when never reached (one past the final epoch, since index 0
/// is the pre-update entry).
pub fn epochs_to_threshold(series: &[f64], threshold: f64) -> usize {
    series
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, &v)| v >= threshold)
        .map(|(i, _)| i)
        .unwrap_or(series.len())
}

// ── tests ───────────────────────────────────────────────────────────────────
