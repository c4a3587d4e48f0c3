//! Two-phase training: masked-reconstruction pretraining of encoder+decoder
//! under MSE, then supervised finetuning of the GRU classifier with the
//! encoder frozen. Includes span masking, Adam, and the binary checkpoint
//! format that hands the encoder from the pretraining side to the
//! classification side.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::augment::{FeatureWindow, NormStats};
use crate::evaluation::{accuracy, macro_f1, ConfusionMatrix, EvalError, RunReport};
use crate::model::{
    self, build_feature_graph, build_finetune_graph, build_head_graph, build_pretrain_graph,
    init_for_graph, is_classifier_param, EncoderConfig, ModelError, ParamSet,
};
use crate::numerics::{Array, Evaluator, Graph, NumericsError, Scalar};
use crate::rng;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Checkpoint magic; the trailing digit is the format version.
pub const CKPT_MAGIC: &[u8; 6] = b"NSIMU1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("label {label} outside the {num_classes}-class head")]
    ClassMismatch { label: usize, num_classes: usize },
    #[error("non-finite gradient for '{0}'")]
    NonFiniteGrad(String),
    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version '{found}' (this build reads '{expected}')")]
    Version { found: char, expected: char },
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

// ── configs ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub mask_span: usize,
    /// Reconstruct the full unmasked sequence instead (ablation mode).
    pub autoencode: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-4,
            batch_size: 128,
            mask_ratio: 0.15,
            mask_span: 5,
            autoencode: false,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 0.5) {
            return Err(TrainError::BadConfig(format!(
                "mask_ratio {} outside (0, 0.5]",
                self.mask_ratio
            )));
        }
        if self.mask_span == 0 {
            return Err(TrainError::BadConfig("mask_span must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 1e-3, batch_size: 128, freeze_encoder: true, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::BadConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

// ── span masking ────────────────────────────────────────────────────────────

/// Zero out disjoint spans of `span` timesteps, chosen uniformly, until at
/// least `ratio * S` timesteps are masked. Returns the masked copy and the
/// boolean mask (true = masked). Deterministic per seed.
pub fn mask_spans<T: Scalar>(
    x: &Array<T>,
    ratio: f64,
    span: usize,
    seed: u64,
) -> Result<(Array<T>, Vec<bool>), TrainError> {
    let s = x.rows();
    if !(ratio > 0.0 && ratio <= 0.5) {
        return Err(TrainError::BadConfig(format!("mask_ratio {ratio} outside (0, 0.5]")));
    }
    if span == 0 || span > s {
        return Err(TrainError::BadConfig(format!(
            "mask_span {span} outside [1, {s}] for a {s}-step window"
        )));
    }
    if ratio * (s as f64) < 1.0 {
        return Err(TrainError::BadConfig(format!(
            "mask_ratio {ratio} * seq_len {s} masks less than one timestep"
        )));
    }
    let target = (ratio * s as f64).ceil() as usize;
    let mut masked = vec![false; s];
    let mut count = 0usize;
    let mut r = rng::stream(seed, "mask-spans");
    while count < target {
        let starts: Vec<usize> = (0..=s.saturating_sub(span))
            .filter(|&st| (st..st + span).all(|i| !masked[i]))
            .collect();
        if starts.is_empty() {
            break;
        }
        let st = starts[r.gen_range(0..starts.len())];
        for m in masked.iter_mut().skip(st).take(span) {
            *m = true;
        }
        count += span;
    }
    // Fragmented leftovers (possible only for pathological span/ratio
    // combinations): top up with single positions so the target is met.
    for m in masked.iter_mut() {
        if count >= target {
            break;
        }
        if !*m {
            *m = true;
            count += 1;
        }
    }
    let mut xm = x.clone();
    for (i, &m) in masked.iter().enumerate() {
        if m {
            for c in 0..x.cols() {
                xm.set(i, c, T::zero());
            }
        }
    }
    Ok((xm, masked))
}

/// Per-row loss weights: masked rows get 1/(masked * cols) so the weighted
/// sum of squared errors is the mean over masked cells.
fn mask_weights<T: Scalar>(mask: &[bool], cols: usize) -> Array<T> {
    let masked = mask.iter().filter(|&&m| m).count().max(1);
    let w = T::from_f64(1.0 / (masked * cols) as f64);
    Array::from_fn(mask.len(), 1, |i, _| if mask[i] { w } else { T::zero() })
}

fn uniform_weights<T: Scalar>(rows: usize, cols: usize) -> Array<T> {
    Array::filled(rows, 1, T::from_f64(1.0 / (rows * cols) as f64))
}

// ── Adam ────────────────────────────────────────────────────────────────────

/// First/second moment estimates per parameter plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    t: u64,
    m: BTreeMap<String, Array<T>>,
    v: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over every parameter present in `grads` (β₁ 0.9, β₂
/// 0.999, ε 1e-8, bias correction). Parameters without gradients stay put.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Array<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
    let (nb1, nb2) = (T::from_f64(1.0 - ADAM_BETA1), T::from_f64(1.0 - ADAM_BETA2));
    let eps = T::from_f64(ADAM_EPS);
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGrad(name.clone()));
        }
        let p = params
            .0
            .get_mut(name)
            .ok_or_else(|| TrainError::BadConfig(format!("gradient for unknown param '{name}'")))?;
        if p.shape() != g.shape() {
            return Err(TrainError::BadConfig(format!("gradient shape mismatch for '{name}'")));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.rows(), g.cols()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Array::zeros(g.rows(), g.cols()));
        let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
        let step1 = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        for i in 0..gd.len() {
            md[i] = b1 * md[i] + nb1 * gd[i];
            vd[i] = b2 * vd[i] + nb2 * gd[i] * gd[i];
            let vhat = vd[i] * inv_bc2;
            pd[i] = pd[i] - step1 * md[i] / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

// ── checkpoints ─────────────────────────────────────────────────────────────

/// Trained parameters plus everything needed to reuse them: architecture and
/// the dataset normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub norm: NormStats,
    pub params: ParamSet<f32>,
}

/// Fresh random-weights checkpoint (untrained baseline / test fixture).
pub fn init_encoder_checkpoint(cfg: &EncoderConfig, norm: &NormStats, seed: u64) -> Checkpoint {
    let g = build_pretrain_graph(cfg, false);
    Checkpoint { config: cfg.clone(), norm: norm.clone(), params: init_for_graph(&g, seed) }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serialize to the `NSIMU1` binary layout: magic, architecture block,
/// normalization stats, parameter name table, then raw f32 payloads.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    let c = &ckpt.config;
    for v in [
        c.seq_len, c.input_features, c.hidden, c.layers, c.heads, c.ffn, c.projector_hidden,
        c.gru_hidden,
    ] {
        put_u32(&mut out, v as u32);
    }
    put_f64(&mut out, c.dropout);
    out.push(match c.arm {
        model::ModelArm::Ns => 0,
        model::ModelArm::Vanilla => 1,
    });
    put_u32(&mut out, ckpt.norm.mean.len() as u32);
    for &v in &ckpt.norm.mean {
        put_f64(&mut out, v);
    }
    for &v in &ckpt.norm.std {
        put_f64(&mut out, v);
    }
    put_u32(&mut out, ckpt.params.0.len() as u32);
    for (name, arr) in &ckpt.params.0 {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, arr.rows() as u32);
        put_u32(&mut out, arr.cols() as u32);
    }
    for arr in ckpt.params.0.values() {
        for &v in arr.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Bounded little-endian reader over untrusted checkpoint bytes.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        if self.buf.len() - self.pos < n {
            return Err(TrainError::Corrupt(format!("truncated reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8, TrainError> {
        Ok(self.take(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

const MAX_PARAMS: u32 = 16_384;
const MAX_NAME: u32 = 256;
const MAX_DIM: u32 = 1 << 20;
const MAX_NUMEL: u64 = 1 << 26;
const MAX_NORM_LEN: u32 = 4_096;

/// Decode a checkpoint from raw bytes (hardened against malformed input;
/// every length is checked before allocation and the payload must end the
/// file exactly).
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(CKPT_MAGIC.len(), "magic")?;
    if &magic[..5] != &CKPT_MAGIC[..5] {
        return Err(TrainError::Corrupt("bad magic (not a checkpoint file)".into()));
    }
    if magic[5] != CKPT_MAGIC[5] {
        return Err(TrainError::Version {
            found: magic[5] as char,
            expected: CKPT_MAGIC[5] as char,
        });
    }
    let mut dims = [0usize; 8];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = r.u32("architecture")?;
        if v == 0 || v > MAX_DIM {
            return Err(TrainError::Corrupt(format!("architecture field {i} = {v} out of range")));
        }
        *d = v as usize;
    }
    let dropout = r.f64("dropout")?;
    let arm = match r.u8("arm")? {
        0 => model::ModelArm::Ns,
        1 => model::ModelArm::Vanilla,
        other => return Err(TrainError::Corrupt(format!("unknown arm code {other}"))),
    };
    let config = EncoderConfig {
        seq_len: dims[0],
        input_features: dims[1],
        hidden: dims[2],
        layers: dims[3],
        heads: dims[4],
        ffn: dims[5],
        projector_hidden: dims[6],
        gru_hidden: dims[7],
        dropout,
        arm,
    };
    config.validate().map_err(|e| TrainError::Corrupt(format!("stored config invalid: {e}")))?;

    let norm_len = r.u32("norm length")?;
    if norm_len == 0 || norm_len > MAX_NORM_LEN {
        return Err(TrainError::Corrupt(format!("norm length {norm_len} out of range")));
    }
    let mut mean = Vec::with_capacity(norm_len as usize);
    for _ in 0..norm_len {
        mean.push(r.f64("norm mean")?);
    }
    let mut std = Vec::with_capacity(norm_len as usize);
    for _ in 0..norm_len {
        std.push(r.f64("norm std")?);
    }
    if mean.iter().chain(&std).any(|v| !v.is_finite()) || std.iter().any(|&v| v <= 0.0) {
        return Err(TrainError::Corrupt("non-finite or non-positive normalization stats".into()));
    }

    let count = r.u32("param count")?;
    if count > MAX_PARAMS {
        return Err(TrainError::Corrupt(format!("param count {count} exceeds cap")));
    }
    let mut table = Vec::with_capacity(count as usize);
    let mut total: u64 = 0;
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        if name_len == 0 || name_len > MAX_NAME {
            return Err(TrainError::Corrupt(format!("name length {name_len} out of range")));
        }
        let name = std::str::from_utf8(r.take(name_len as usize, "param name")?)
            .map_err(|_| TrainError::Corrupt("param name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32("rows")?;
        let cols = r.u32("cols")?;
        if rows == 0 || cols == 0 || rows > MAX_DIM || cols > MAX_DIM {
            return Err(TrainError::Corrupt(format!("shape {rows}x{cols} for '{name}'")));
        }
        let numel = rows as u64 * cols as u64;
        total += numel;
        if numel > MAX_NUMEL || total > MAX_NUMEL {
            return Err(TrainError::Corrupt("parameter payload exceeds size cap".into()));
        }
        table.push((name, rows as usize, cols as usize));
    }
    if r.remaining() as u64 != total * 4 {
        return Err(TrainError::Corrupt(format!(
            "payload length {} does not match shape table ({} values)",
            r.remaining(),
            total
        )));
    }
    let mut params = ParamSet::new();
    for (name, rows, cols) in table {
        if params.0.contains_key(&name) {
            return Err(TrainError::Corrupt(format!("duplicate param '{name}'")));
        }
        let raw = r.take(rows * cols * 4, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Corrupt(format!("non-finite value in parameter '{name}'")));
        }
        params.insert(&name, Array::new(rows, cols, data).expect("checked shape"));
    }
    Ok(Checkpoint { config, norm: NormStats { mean, std }, params })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, encode_checkpoint(ckpt))
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
    parse_checkpoint(&bytes)
}

// ── shared loop machinery ───────────────────────────────────────────────────

fn check_window_shapes(
    windows: &[&[FeatureWindow]],
    cfg: &EncoderConfig,
) -> Result<(), TrainError> {
    for split in windows {
        for w in *split {
            if w.values.shape() != (cfg.seq_len, cfg.input_features) {
                return Err(TrainError::Incompatible(format!(
                    "window '{}' is {}x{} but the encoder expects {}x{}",
                    w.source_id,
                    w.values.rows(),
                    w.values.cols(),
                    cfg.seq_len,
                    cfg.input_features
                )));
            }
        }
    }
    Ok(())
}

fn cast_windows(windows: &[FeatureWindow]) -> Vec<Array<f32>> {
    windows.iter().map(|w| w.values.cast()).collect()
}

fn bind_params(ev: &mut Evaluator<f32>, params: &ParamSet<f32>) -> Result<(), TrainError> {
    params.bind_into(ev)?;
    Ok(())
}

/// Mean of a slice (empty -> 0, callers guarantee non-empty splits).
fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inside a training epoch, a non-finite value in any graph node means the
/// optimization blew up; report it as divergence rather than a numerics bug.
fn diverged_on_nonfinite(e: TrainError, epoch: usize) -> TrainError {
    match e {
        TrainError::Numerics(NumericsError::NonFinite { .. }) => TrainError::Diverged { epoch },
        other => other,
    }
}

fn echo(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn model_echo(c: &EncoderConfig) -> Vec<(&'static str, String)> {
    vec![
        ("model.arm", c.arm.as_str().to_string()),
        ("model.seq_len", c.seq_len.to_string()),
        ("model.input_features", c.input_features.to_string()),
        ("model.hidden", c.hidden.to_string()),
        ("model.layers", c.layers.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.ffn", c.ffn.to_string()),
        ("model.projector_hidden", c.projector_hidden.to_string()),
        ("model.gru_hidden", c.gru_hidden.to_string()),
        ("model.dropout", c.dropout.to_string()),
    ]
}

// ── pretraining ─────────────────────────────────────────────────────────────

/// Masked-reconstruction pretraining. Windows must already be augmented and
/// z-scored for the experiment arm; `norm` is embedded in the checkpoint so
/// downstream users normalize identically.
pub fn pretrain(
    train: &[FeatureWindow],
    val: &[FeatureWindow],
    cfg: &PretrainConfig,
    mcfg: &EncoderConfig,
    norm: &NormStats,
) -> Result<(Checkpoint, RunReport), TrainError> {
    let started = Instant::now();
    cfg.validate()?;
    mcfg.validate().map_err(TrainError::Model)?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::BadConfig("empty train or val split".into()));
    }
    check_window_shapes(&[&train, &val], mcfg)?;
    if !cfg.autoencode && cfg.mask_ratio * (mcfg.seq_len as f64) < 1.0 {
        return Err(TrainError::BadConfig("mask_ratio masks less than one timestep".into()));
    }

    let g_train = build_pretrain_graph(mcfg, true);
    let g_eval = build_pretrain_graph(mcfg, false);
    let plan = g_train.plan("loss", None)?;
    let mut params: ParamSet<f32> = init_for_graph(&g_train, cfg.seed);
    let mut ev_t = Evaluator::new(&g_train);
    let mut ev_e = Evaluator::new(&g_eval);

    let xs: Vec<Array<f32>> = cast_windows(train);
    let xs_val: Vec<Array<f32>> = cast_windows(val);
    let cols = mcfg.input_features;

    // fixed masks for every evaluation pass (val always; train at epoch 0)
    let masked_input = |x: &Array<f32>, seed: u64| -> Result<(Array<f32>, Array<f32>), TrainError> {
        if cfg.autoencode {
            Ok((x.clone(), uniform_weights(x.rows(), cols)))
        } else {
            let (xm, mask) = mask_spans(x, cfg.mask_ratio, cfg.mask_span, seed)?;
            Ok((xm, mask_weights(&mask, cols)))
        }
    };
    let val_masked: Vec<(Array<f32>, Array<f32>)> = xs_val
        .iter()
        .enumerate()
        .map(|(i, x)| masked_input(x, rng::derive(cfg.seed, "val-mask", i as u64)))
        .collect::<Result<_, _>>()?;

    let eval_loss = |ev: &mut Evaluator<f32>,
                     params: &ParamSet<f32>,
                     set: &[Array<f32>],
                     masked: &[(Array<f32>, Array<f32>)]|
     -> Result<f64, TrainError> {
        bind_params(ev, params)?;
        let mut losses = Vec::with_capacity(set.len());
        for (x, (xm, mw)) in set.iter().zip(masked) {
            ev.bind("x", xm)?;
            ev.bind("target", x)?;
            ev.bind("mask_w", mw)?;
            ev.forward()?;
            losses.push(ev.output_scalar("loss")? as f64);
        }
        Ok(mean(&losses))
    };

    let n = xs.len() as u64;
    let mseed = |epoch: usize, i: usize| rng::derive(cfg.seed, "mask", epoch as u64 * n + i as u64);

    // epoch 0: pre-update losses
    let train0: Vec<(Array<f32>, Array<f32>)> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| masked_input(x, mseed(0, i)))
        .collect::<Result<_, _>>()?;
    let mut train_loss = vec![eval_loss(&mut ev_e, &params, &xs, &train0)?];
    let mut val_loss = vec![eval_loss(&mut ev_e, &params, &xs_val, &val_masked)?];
    if !(train_loss[0].is_finite() && val_loss[0].is_finite()) {
        return Err(TrainError::Diverged { epoch: 0 });
    }
    let mut best = (val_loss[0], params.clone(), 0usize);

    let mut adam = AdamState::new();
    let mut grads: BTreeMap<String, Array<f32>> = params
        .0
        .iter()
        .map(|(k, v)| (k.clone(), Array::zeros(v.rows(), v.cols())))
        .collect();
    let use_dropout = mcfg.dropout > 0.0;
    let mut order: Vec<usize> = (0..xs.len()).collect();

    for epoch in 1..=cfg.epochs {
        (|| -> Result<(), TrainError> {
            order.shuffle(&mut rng::substream(cfg.seed, "shuffle", epoch as u64));
            let mut epoch_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                for g in grads.values_mut() {
                    g.data_mut().fill(0.0);
                }
                bind_params(&mut ev_t, &params)?;
                for &i in batch {
                    let (xm, mw) = masked_input(&xs[i], mseed(epoch, i))?;
                    ev_t.bind("x", &xm)?;
                    ev_t.bind("target", &xs[i])?;
                    ev_t.bind("mask_w", &mw)?;
                    if use_dropout {
                        let mut dr =
                            rng::substream(cfg.seed, "dropout", epoch as u64 * n + i as u64);
                        for (name, mask) in
                            model::dropout_masks::<f32>(&g_train, mcfg.dropout, &mut dr)
                        {
                            ev_t.bind(&name, &mask)?;
                        }
                    }
                    ev_t.forward()?;
                    let loss = ev_t.output_scalar("loss")? as f64;
                    if !loss.is_finite() {
                        return Err(TrainError::Diverged { epoch });
                    }
                    epoch_sum += loss;
                    ev_t.backward_with(&plan)?;
                    for (name, acc) in grads.iter_mut() {
                        let g = ev_t.param_grad_slice(name)?;
                        let a = acc.data_mut();
                        for (av, gv) in a.iter_mut().zip(g) {
                            *av += gv;
                        }
                    }
                }
                let inv = 1.0 / batch.len() as f32;
                for g in grads.values_mut() {
                    for v in g.data_mut() {
                        *v *= inv;
                    }
                }
                adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
            }
            train_loss.push(epoch_sum / xs.len() as f64);
            let vl = eval_loss(&mut ev_e, &params, &xs_val, &val_masked)?;
            if !vl.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            val_loss.push(vl);
            if vl < best.0 {
                best = (vl, params.clone(), epoch);
            }
            Ok(())
        })()
        .map_err(|e| diverged_on_nonfinite(e, epoch))?;
    }

    let ckpt = Checkpoint { config: mcfg.clone(), norm: norm.clone(), params: best.1 };
    let mut pairs = vec![("phase", "pretrain".to_string())];
    pairs.extend(model_echo(mcfg));
    pairs.extend([
        ("pretrain.epochs", cfg.epochs.to_string()),
        ("pretrain.learning_rate", cfg.learning_rate.to_string()),
        ("pretrain.batch_size", cfg.batch_size.to_string()),
        ("pretrain.mask_ratio", cfg.mask_ratio.to_string()),
        ("pretrain.mask_span", cfg.mask_span.to_string()),
        ("pretrain.autoencode", cfg.autoencode.to_string()),
        ("pretrain.seed", cfg.seed.to_string()),
    ]);
    let report = RunReport {
        arm: mcfg.arm.as_str().to_string(),
        seed: cfg.seed,
        train_loss,
        val_loss,
        val_accuracy: vec![],
        best_epoch: best.2,
        test_accuracy: None,
        macro_f1: None,
        confusion: None,
        config_echo: echo(&pairs),
        split_fingerprint: 0,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((ckpt, report))
}

// ── finetuning ──────────────────────────────────────────────────────────────

fn one_hot(label: usize, num_classes: usize) -> Array<f32> {
    Array::from_fn(1, num_classes, |_, j| if j == label { 1.0 } else { 0.0 })
}

fn check_labels(splits: &[&[FeatureWindow]], num_classes: usize) -> Result<(), TrainError> {
    for split in splits {
        for w in *split {
            if w.label >= num_classes {
                return Err(TrainError::ClassMismatch { label: w.label, num_classes });
            }
        }
    }
    Ok(())
}

/// Supervised finetuning of the GRU head on a pretrained encoder. With
/// `freeze_encoder` the encoder parameters are excluded from the optimizer
/// and (when dropout is off) encoder features are computed once per window
/// and cached — bit-identical to the unfused path.
pub fn finetune(
    train: &[FeatureWindow],
    val: &[FeatureWindow],
    test: &[FeatureWindow],
    encoder_ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
    num_classes: usize,
) -> Result<(Checkpoint, RunReport), TrainError> {
    let fast = cfg.freeze_encoder && encoder_ckpt.config.dropout == 0.0;
    if fast {
        finetune_cached(train, val, test, encoder_ckpt, cfg, num_classes)
    } else {
        finetune_full(train, val, test, encoder_ckpt, cfg, num_classes)
    }
}

fn finetune_prologue(
    train: &[FeatureWindow],
    val: &[FeatureWindow],
    test: &[FeatureWindow],
    encoder_ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
    num_classes: usize,
) -> Result<(), TrainError> {
    cfg.validate()?;
    encoder_ckpt.config.validate().map_err(TrainError::Model)?;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(TrainError::BadConfig("empty train, val, or test split".into()));
    }
    if num_classes < 2 {
        return Err(TrainError::BadConfig("need at least two classes".into()));
    }
    check_window_shapes(&[&train, &val, &test], &encoder_ckpt.config)?;
    check_labels(&[&train, &val, &test], num_classes)
}

struct FinetuneLoopOut {
    head: ParamSet<f32>,
    train_loss: Vec<f64>,
    val_loss: Vec<f64>,
    val_accuracy: Vec<f64>,
    best_epoch: usize,
}

/// The head-training loop shared by both paths. `forward_loss` must bind
/// everything except the label, run forward, and expose `loss`/`probs`.
#[allow(clippy::too_many_arguments)]
fn head_loop(
    ev: &mut Evaluator<f32>,
    plan: &crate::numerics::BackwardPlan,
    bind_example: &mut dyn FnMut(&mut Evaluator<f32>, usize, usize, bool) -> Result<(), TrainError>,
    labels: &[usize],
    val_labels: &[usize],
    tracked: &[String],
    mut params: ParamSet<f32>,
    full_params_graph: &Graph,
    cfg: &FinetuneConfig,
    num_classes: usize,
) -> Result<FinetuneLoopOut, TrainError> {
    let n_train = labels.len();
    let onehots: Vec<Array<f32>> = (0..num_classes).map(|c| one_hot(c, num_classes)).collect();

    // evaluation pass over a split: (mean loss, accuracy)
    let eval_split = |ev: &mut Evaluator<f32>,
                      params: &ParamSet<f32>,
                      labels: &[usize],
                      is_val: bool,
                      bind_example: &mut dyn FnMut(
        &mut Evaluator<f32>,
        usize,
        usize,
        bool,
    ) -> Result<(), TrainError>|
     -> Result<(f64, f64), TrainError> {
        bind_params(ev, params)?;
        let mut losses = Vec::with_capacity(labels.len());
        let mut correct = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            bind_example(ev, i, 0, is_val)?;
            ev.bind("label", &onehots[y])?;
            ev.forward()?;
            losses.push(ev.output_scalar("loss")? as f64);
            let probs = ev.output("probs")?;
            if argmax(probs.data()) == y {
                correct += 1;
            }
        }
        Ok((mean(&losses), correct as f64 / labels.len() as f64))
    };

    let (tl0, _) = eval_split(ev, &params, labels, false, bind_example)?;
    let (vl0, va0) = eval_split(ev, &params, val_labels, true, bind_example)?;
    if !(tl0.is_finite() && vl0.is_finite()) {
        return Err(TrainError::Diverged { epoch: 0 });
    }
    let mut train_loss = vec![tl0];
    let mut val_loss = vec![vl0];
    let mut val_accuracy = vec![va0];
    let mut best = (va0, params.clone(), 0usize);

    let mut adam = AdamState::new();
    let mut grads: BTreeMap<String, Array<f32>> = tracked
        .iter()
        .map(|name| {
            let id = full_params_graph.param_node(name).expect("tracked param exists");
            let (r, c) = full_params_graph.shape(id);
            (name.clone(), Array::zeros(r, c))
        })
        .collect();
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=cfg.epochs {
        (|| -> Result<(), TrainError> {
            order.shuffle(&mut rng::substream(cfg.seed, "shuffle", epoch as u64));
            let mut epoch_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                for g in grads.values_mut() {
                    g.data_mut().fill(0.0);
                }
                bind_params(ev, &params)?;
                for &i in batch {
                    bind_example(ev, i, epoch, false)?;
                    ev.bind("label", &onehots[labels[i]])?;
                    ev.forward()?;
                    let loss = ev.output_scalar("loss")? as f64;
                    if !loss.is_finite() {
                        return Err(TrainError::Diverged { epoch });
                    }
                    epoch_sum += loss;
                    ev.backward_with(plan)?;
                    for (name, acc) in grads.iter_mut() {
                        let g = ev.param_grad_slice(name)?;
                        let a = acc.data_mut();
                        for (av, gv) in a.iter_mut().zip(g) {
                            *av += gv;
                        }
                    }
                }
                let inv = 1.0 / batch.len() as f32;
                for g in grads.values_mut() {
                    for v in g.data_mut() {
                        *v *= inv;
                    }
                }
                adam_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
            }
            train_loss.push(epoch_sum / n_train as f64);
            let (vl, va) = eval_split(ev, &params, val_labels, true, bind_example)?;
            if !vl.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            val_loss.push(vl);
            val_accuracy.push(va);
            if va > best.0 {
                best = (va, params.clone(), epoch);
            }
            Ok(())
        })()
        .map_err(|e| diverged_on_nonfinite(e, epoch))?;
    }

    Ok(FinetuneLoopOut {
        head: best.1,
        train_loss,
        val_loss,
        val_accuracy,
        best_epoch: best.2,
    })
}

/// Frozen encoder + no dropout: extract features once, train the head on the
/// cached features.
fn finetune_cached(
    train: &[FeatureWindow],
    val: &[FeatureWindow],
    test: &[FeatureWindow],
    encoder_ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
    num_classes: usize,
) -> Result<(Checkpoint, RunReport), TrainError> {
    let started = Instant::now();
    finetune_prologue(train, val, test, encoder_ckpt, cfg, num_classes)?;
    let mcfg = &encoder_ckpt.config;

    let g_feat = build_feature_graph(mcfg);
    let mut ev_f = Evaluator::new(&g_feat);
    encoder_ckpt
        .params
        .bind_into(&mut ev_f)
        .map_err(|e| TrainError::Incompatible(format!("encoder checkpoint: {e}")))?;
    let mut features = |windows: &[FeatureWindow]| -> Result<Vec<Array<f32>>, TrainError> {
        let mut out = Vec::with_capacity(windows.len());
        for x in cast_windows(windows) {
            ev_f.bind("x", &x)?;
            ev_f.forward()?;
            out.push(ev_f.output("hidden")?);
        }
        Ok(out)
    };
    let feat_train = features(train)?;
    let feat_val = features(val)?;
    let feat_test = features(test)?;

    let g_head = build_head_graph(mcfg, num_classes);
    let plan = g_head.plan("loss", None)?;
    let head_init: ParamSet<f32> = init_for_graph(&g_head, cfg.seed);
    let tracked: Vec<String> = g_head.param_names().map(|s| s.to_string()).collect();
    let mut ev = Evaluator::new(&g_head);

    let labels: Vec<usize> = train.iter().map(|w| w.label).collect();
    let val_labels: Vec<usize> = val.iter().map(|w| w.label).collect();
    let mut bind_example =
        |ev: &mut Evaluator<f32>, i: usize, _epoch: usize, is_val: bool| -> Result<(), TrainError> {
            let feat = if is_val { &feat_val[i] } else { &feat_train[i] };
            ev.bind("hidden", feat)?;
            Ok(())
        };
    let out = head_loop(
        &mut ev,
        &plan,
        &mut bind_example,
        &labels,
        &val_labels,
        &tracked,
        head_init,
        &g_head,
        cfg,
        num_classes,
    )?;

    // test pass with the best head (loss output needs some label bound;
    // only probs are read)
    bind_params(&mut ev, &out.head)?;
    let dummy = one_hot(0, num_classes);
    let mut preds = Vec::with_capacity(test.len());
    for feat in &feat_test {
        ev.bind("hidden", feat)?;
        ev.bind("label", &dummy)?;
        ev.forward()?;
        preds.push(argmax(ev.output("probs")?.data()));
    }
    finetune_epilogue(started, preds, test, encoder_ckpt, cfg, num_classes, out)
}

/// General path: full graph per step (needed when the encoder trains or
/// dropout is active).
fn finetune_full(
    train: &[FeatureWindow],
    val: &[FeatureWindow],
    test: &[FeatureWindow],
    encoder_ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
    num_classes: usize,
) -> Result<(Checkpoint, RunReport), TrainError> {
    let started = Instant::now();
    finetune_prologue(train, val, test, encoder_ckpt, cfg, num_classes)?;
    let mcfg = &encoder_ckpt.config;

    let g_train = build_finetune_graph(mcfg, num_classes, true);
    let g_eval = build_finetune_graph(mcfg, num_classes, false);
    // encoder weights from the checkpoint, fresh head
    let mut params: ParamSet<f32> = init_for_graph(&g_train, cfg.seed);
    for name in g_train.param_names() {
        if !is_classifier_param(name) {
            let arr = encoder_ckpt
                .params
                .get(name)
                .map_err(|_| {
                    TrainError::Incompatible(format!("encoder checkpoint lacks '{name}'"))
                })?
                .clone();
            params.insert(name, arr);
        }
    }
    let tracked: Vec<String> = if cfg.freeze_encoder {
        g_train.param_names().filter(|n| is_classifier_param(n)).map(|s| s.to_string()).collect()
    } else {
        g_train.param_names().map(|s| s.to_string()).collect()
    };
    let plan = g_train.plan("loss", Some(&tracked))?;

    let xs = cast_windows(train);
    let xs_val = cast_windows(val);
    let labels: Vec<usize> = train.iter().map(|w| w.label).collect();
    let val_labels: Vec<usize> = val.iter().map(|w| w.label).collect();
    let use_dropout = mcfg.dropout > 0.0;
    let n = xs.len() as u64;
    let seed = cfg.seed;

    // Training binds into the train-mode evaluator; eval passes into the
    // eval-mode one. head_loop drives a single evaluator, so both modes fold
    // into one graph here: dropout inputs exist only in the train graph, and
    // eval passes bind all-ones masks to make it deterministic.
    let ones: Vec<(String, Array<f32>)> = g_train
        .input_names()
        .filter(|n| n.starts_with("drop."))
        .map(|name| {
            let id = g_train.input_node(name).expect("listed input");
            let (r, c) = g_train.shape(id);
            (name.to_string(), Array::filled(r, c, 1.0f32))
        })
        .collect();
    let _ = &g_eval;
    let mut ev = Evaluator::new(&g_train);
    let mut bind_example =
        |ev: &mut Evaluator<f32>, i: usize, epoch: usize, is_val: bool| -> Result<(), TrainError> {
            let x = if is_val { &xs_val[i] } else { &xs[i] };
            ev.bind("x", x)?;
            if use_dropout {
                if epoch == 0 || is_val {
                    for (name, mask) in &ones {
                        ev.bind(name, mask)?;
                    }
                } else {
                    let mut dr = rng::substream(seed, "dropout", epoch as u64 * n + i as u64);
                    for (name, mask) in
                        model::dropout_masks::<f32>(ev.graph(), encoder_ckpt.config.dropout, &mut dr)
                    {
                        ev.bind(&name, &mask)?;
                    }
                }
            }
            Ok(())
        };
    let out = head_loop(
        &mut ev,
        &plan,
        &mut bind_example,
        &labels,
        &val_labels,
        &tracked,
        params,
        &g_train,
        cfg,
        num_classes,
    )?;

    // test pass with the best params on the eval graph
    let mut ev_e = Evaluator::new(&g_eval);
    bind_params(&mut ev_e, &out.head)?;
    let dummy = one_hot(0, num_classes);
    let mut preds = Vec::with_capacity(test.len());
    for x in cast_windows(test) {
        ev_e.bind("x", &x)?;
        ev_e.bind("label", &dummy)?;
        ev_e.forward()?;
        preds.push(argmax(ev_e.output("probs")?.data()));
    }
    finetune_epilogue(started, preds, test, encoder_ckpt, cfg, num_classes, out)
}

fn finetune_epilogue(
    started: Instant,
    preds: Vec<usize>,
    test: &[FeatureWindow],
    encoder_ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
    num_classes: usize,
    out: FinetuneLoopOut,
) -> Result<(Checkpoint, RunReport), TrainError> {
    let test_labels: Vec<usize> = test.iter().map(|w| w.label).collect();
    let acc = accuracy(&preds, &test_labels)?;
    let f1 = macro_f1(&preds, &test_labels, num_classes)?;
    let confusion = ConfusionMatrix::from_preds(&preds, &test_labels, num_classes)?;

    // classifier checkpoint = untouched encoder params + best head
    let mut params = encoder_ckpt.params.clone();
    for (name, arr) in &out.head.0 {
        if is_classifier_param(name) {
            params.insert(name, arr.clone());
        } else {
            // unfrozen path: the loop's best params include updated encoder
            params.insert(name, arr.clone());
        }
    }
    let ckpt =
        Checkpoint { config: encoder_ckpt.config.clone(), norm: encoder_ckpt.norm.clone(), params };

    let mut pairs = vec![("phase", "finetune".to_string())];
    pairs.extend(model_echo(&encoder_ckpt.config));
    pairs.extend([
        ("finetune.epochs", cfg.epochs.to_string()),
        ("finetune.learning_rate", cfg.learning_rate.to_string()),
        ("finetune.batch_size", cfg.batch_size.to_string()),
        ("finetune.freeze_encoder", cfg.freeze_encoder.to_string()),
        ("finetune.seed", cfg.seed.to_string()),
        ("classes", num_classes.to_string()),
    ]);
    let report = RunReport {
        arm: encoder_ckpt.config.arm.as_str().to_string(),
        seed: cfg.seed,
        train_loss: out.train_loss,
        val_loss: out.val_loss,
        val_accuracy: out.val_accuracy,
        best_epoch: out.best_epoch,
        test_accuracy: Some(acc),
        macro_f1: Some(f1),
        confusion: Some(confusion),
        config_echo: echo(&pairs),
        split_fingerprint: 0,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((ckpt, report))
}

/// Predict labels for windows with a finetuned classifier checkpoint.
pub fn classify_windows(
    ckpt: &Checkpoint,
    windows: &[FeatureWindow],
) -> Result<Vec<usize>, TrainError> {
    ckpt.config.validate().map_err(TrainError::Model)?;
    check_window_shapes(&[&windows], &ckpt.config)?;
    let num_classes = ckpt
        .params
        .get("cls.out.w")
        .map_err(|_| TrainError::Incompatible("checkpoint lacks a classifier head".into()))?
        .cols();
    let g_feat = build_feature_graph(&ckpt.config);
    let g_head = build_head_graph(&ckpt.config, num_classes);
    let mut ev_f = Evaluator::new(&g_feat);
    let mut ev_h = Evaluator::new(&g_head);
    ckpt.params
        .bind_into(&mut ev_f)
        .and_then(|()| ckpt.params.bind_into(&mut ev_h))
        .map_err(|e| TrainError::Incompatible(format!("classifier checkpoint: {e}")))?;
    let dummy = one_hot(0, num_classes);
    let mut preds = Vec::with_capacity(windows.len());
    for x in cast_windows(windows) {
        ev_f.bind("x", &x)?;
        ev_f.forward()?;
        let hidden = ev_f.output("hidden")?;
        ev_h.bind("hidden", &hidden)?;
        ev_h.bind("label", &dummy)?;
        ev_h.forward()?;
        preds.push(argmax(ev_h.output("probs")?.data()));
    }
    Ok(preds)
}

// ── tests ───────────────────────────────────────────────────────────────────
