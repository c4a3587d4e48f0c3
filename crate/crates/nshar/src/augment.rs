//! Cross-sensor FM feature construction and dataset-level z-score
//! normalization: 6-channel raw windows become 15-feature windows by taking
//! all acc_j * gyro_k products per timestep.

use thiserror::Error;

use crate::data::{Window, RAW_CHANNELS};
use crate::numerics::Array;

/// Feature count after FM augmentation: 6 raw + 9 cross products.
pub const FM_CHANNELS: usize = 15;

/// Channel order of augmented windows: raw six, then fm_jk = acc_j * gyro_k
/// with the acc axis major.
pub const FM_CHANNEL_NAMES: [&str; FM_CHANNELS] = [
    "acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z", "fm_xx", "fm_xy", "fm_xz", "fm_yx",
    "fm_yy", "fm_yz", "fm_zx", "fm_zy", "fm_zz",
];

#[derive(Debug, Clone, Error)]
pub enum AugmentError {
    #[error("expected {want} channels, got {have}")]
    WrongChannelCount { have: usize, want: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("windows have differing channel counts ({0} vs {1})")]
    NonUniform(usize, usize),
}

/// A window whose feature count may be 6 (plain) or 15 (FM-augmented).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub values: Array<f64>,
    pub label: usize,
    pub source_id: String,
}

impl FeatureWindow {
    pub fn features(&self) -> usize {
        self.values.cols()
    }
}

/// Per-channel normalization statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population std, floored at 1e-8.
    pub std: Vec<f64>,
}

/// Std floor: constant channels normalize to zero instead of NaN.
pub const STD_FLOOR: f64 = 1e-8;

/// Expand a raw 6-channel window to 15 features: the six raw channels
/// unchanged, then fm_jk[i] = acc_j[i] * gyro_k[i].
pub fn fm_augment(w: &Window) -> Result<FeatureWindow, AugmentError> {
    if w.values.cols() != RAW_CHANNELS {
        return Err(AugmentError::WrongChannelCount { have: w.values.cols(), want: RAW_CHANNELS });
    }
    let steps = w.values.rows();
    let mut out = Array::zeros(steps, FM_CHANNELS);
    for i in 0..steps {
        for c in 0..RAW_CHANNELS {
            out.set(i, c, w.values.get(i, c));
        }
        for j in 0..3 {
            for k in 0..3 {
                out.set(i, RAW_CHANNELS + 3 * j + k, w.values.get(i, j) * w.values.get(i, 3 + k));
            }
        }
    }
    Ok(FeatureWindow { values: out, label: w.label, source_id: w.source_id.clone() })
}

/// Pass a raw window through unchanged (the no-augmentation arm).
pub fn plain_features(w: &Window) -> FeatureWindow {
    FeatureWindow { values: w.values.clone(), label: w.label, source_id: w.source_id.clone() }
}

/// Which feature set a run uses: FM cross products or the raw channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AugmentArm {
    Fm,
    Plain,
}

impl AugmentArm {
    pub fn as_str(&self) -> &'static str {
        match self {
            AugmentArm::Fm => "fm",
            AugmentArm::Plain => "plain",
        }
    }

    /// Feature count this arm produces per timestep.
    pub fn channels(&self) -> usize {
        match self {
            AugmentArm::Fm => FM_CHANNELS,
            AugmentArm::Plain => RAW_CHANNELS,
        }
    }

    /// Apply the arm's feature map to every window.
    pub fn apply(&self, windows: &[Window]) -> Result<Vec<FeatureWindow>, AugmentError> {
        match self {
            AugmentArm::Fm => windows.iter().map(fm_augment).collect(),
            AugmentArm::Plain => Ok(windows.iter().map(plain_features).collect()),
        }
    }
}

/// Fit per-channel mean/std pooled over all timesteps of all training
/// windows (population variance, std floored at [`STD_FLOOR`]).
pub fn zscore_fit(train: &[FeatureWindow]) -> Result<NormStats, AugmentError> {
    let first = train.first().ok_or(AugmentError::EmptyTrainingSet)?;
    let f = first.features();
    let mut count = 0usize;
    let mut mean = vec![0.0; f];
    for w in train {
        if w.features() != f {
            return Err(AugmentError::NonUniform(f, w.features()));
        }
        for i in 0..w.values.rows() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += w.values.get(i, c);
            }
        }
        count += w.values.rows();
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    let mut var = vec![0.0; f];
    for w in train {
        for i in 0..w.values.rows() {
            for (c, v) in var.iter_mut().enumerate() {
                let d = w.values.get(i, c) - mean[c];
                *v += d * d;
            }
        }
    }
    let std = var.iter().map(|v| (v / count as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats { mean, std })
}

/// Normalize one window with fitted stats: (value - mean) / std per channel.
pub fn zscore_apply(w: &FeatureWindow, stats: &NormStats) -> Result<FeatureWindow, AugmentError> {
    if w.features() != stats.mean.len() {
        return Err(AugmentError::WrongChannelCount { have: w.features(), want: stats.mean.len() });
    }
    let mut values = w.values.clone();
    for i in 0..values.rows() {
        for c in 0..values.cols() {
            values.set(i, c, (values.get(i, c) - stats.mean[c]) / stats.std[c]);
        }
    }
    Ok(FeatureWindow { values, label: w.label, source_id: w.source_id.clone() })
}

/// Invert [`zscore_apply`] with the same stats (test/diagnostic helper).
pub fn zscore_invert(w: &FeatureWindow, stats: &NormStats) -> Result<FeatureWindow, AugmentError> {
    if w.features() != stats.mean.len() {
        return Err(AugmentError::WrongChannelCount { have: w.features(), want: stats.mean.len() });
    }
    let mut values = w.values.clone();
    for i in 0..values.rows() {
        for c in 0..values.cols() {
            values.set(i, c, values.get(i, c) * stats.std[c] + stats.mean[c]);
        }
    }
    Ok(FeatureWindow { values, label: w.label, source_id: w.source_id.clone() })
}

// ── tests ───────────────────────────────────────────────────────────────────
