//! Raw IMU recordings: CSV ingest, 20 Hz downsampling, fixed 120-step
//! windowing, stratified splits, and a synthetic labeled generator.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::numerics::Array;
use crate::rng;

/// Timesteps per window: 6 seconds at 20 Hz.
pub const WINDOW_LEN: usize = 120;
/// Raw IMU channels.
pub const RAW_CHANNELS: usize = 6;
/// Working sample rate after downsampling.
pub const TARGET_HZ: u32 = 20;
/// Labels above this are rejected at parse time (keeps label-indexed tables
/// small no matter what a file claims).
pub const MAX_LABEL: usize = 65_535;

pub const CHANNEL_NAMES: [&str; RAW_CHANNELS] =
    ["acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z"];

const CSV_HEADER: [&str; 8] =
    ["timestamp_s", "acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z", "label"];

#[derive(Debug, Clone, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("{path}: empty recording")]
    EmptyRecording { path: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("sample rate {rate} Hz is not an integer multiple of {target} Hz")]
    BadRate { rate: f64, target: u32 },
    #[error("sample rate {0} Hz is below the 20 Hz minimum")]
    RateTooLow(f64),
    #[error("recording is not at {0} Hz; downsample first")]
    NotTargetRate(u32),
    #[error("split ratios must be non-negative and sum to 1 (got {0})")]
    BadRatios(f64),
    #[error("class {class} has {have} windows, fewer than the {need} non-empty partitions")]
    TooFewWindows { class: usize, have: usize, need: usize },
    #[error("num_classes {0} outside [2, 10]")]
    BadClassCount(usize),
}

// ── domain types ────────────────────────────────────────────────────────────

/// One raw recording: six equal-length channels plus a per-sample label.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sample_rate_hz: f64,
    /// acc_x, acc_y, acc_z (m/s^2), gyro_x, gyro_y, gyro_z (rad/s).
    pub channels: [Vec<f64>; RAW_CHANNELS],
    pub labels: Vec<usize>,
    pub source_id: String,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One fixed-length window of raw channels (timestep-major 120x6).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub values: Array<f64>,
    pub label: usize,
    pub source_id: String,
}

// ── CSV ingest ──────────────────────────────────────────────────────────────

/// Parse one recording from CSV bytes. `source` names the origin in errors.
///
/// Schema: header `timestamp_s,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,label`,
/// strictly increasing float timestamps, integer labels. The sample rate is
/// inferred from the timestamp span and must round cleanly to an integer
/// >= 20 Hz.
pub fn parse_recording_csv(bytes: &[u8], source: &str) -> Result<Recording, DataError> {
    let perr = |line: u64, msg: String| DataError::Parse { path: source.to_string(), line, msg };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(bytes);
    {
        let headers = rdr.headers().map_err(|e| csv_error(source, &e))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != CSV_HEADER {
            let missing: Vec<&str> =
                CSV_HEADER.iter().filter(|w| !got.contains(w)).copied().collect();
            let msg = if missing.is_empty() {
                format!("unexpected header columns {got:?}")
            } else {
                format!("missing column(s) {missing:?}")
            };
            return Err(perr(1, msg));
        }
    }
    let mut timestamps: Vec<f64> = Vec::new();
    let mut channels: [Vec<f64>; RAW_CHANNELS] = Default::default();
    let mut labels: Vec<usize> = Vec::new();
    for row in rdr.records() {
        let rec = row.map_err(|e| csv_error(source, &e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let num = |idx: usize| -> Result<f64, DataError> {
            let raw = &rec[idx];
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| perr(line, format!("non-numeric {} value '{raw}'", CSV_HEADER[idx])))?;
            if !v.is_finite() {
                return Err(perr(line, format!("non-finite {} value '{raw}'", CSV_HEADER[idx])));
            }
            Ok(v)
        };
        let t = num(0)?;
        if let Some(&prev) = timestamps.last() {
            if t <= prev {
                return Err(perr(line, format!("timestamp_s not strictly increasing ({prev} -> {t})")));
            }
        }
        timestamps.push(t);
        for (c, chan) in channels.iter_mut().enumerate() {
            chan.push(num(1 + c)?);
        }
        let raw_label = rec[7].trim();
        let label: usize = raw_label
            .parse()
            .map_err(|_| perr(line, format!("unknown label token '{raw_label}'")))?;
        if label > MAX_LABEL {
            return Err(perr(line, format!("label id {label} out of range (max {MAX_LABEL})")));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(DataError::EmptyRecording { path: source.to_string() });
    }
    if labels.len() < 2 {
        return Err(perr(2, "need at least 2 samples to infer the sample rate".into()));
    }
    let span = timestamps[timestamps.len() - 1] - timestamps[0];
    let rate_est = (timestamps.len() - 1) as f64 / span;
    let rate = rate_est.round();
    if rate < 1.0 || (rate_est - rate).abs() > 0.05 * rate {
        return Err(perr(2, format!("cannot infer an integer sample rate (estimate {rate_est:.3} Hz)")));
    }
    if rate < TARGET_HZ as f64 {
        return Err(DataError::RateTooLow(rate));
    }
    Ok(Recording { sample_rate_hz: rate, channels, labels, source_id: source.to_string() })
}

fn csv_error(source: &str, e: &csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    DataError::Parse { path: source.to_string(), line, msg: e.to_string() }
}

/// Load one recording from a CSV file.
pub fn load_csv(path: &Path) -> Result<Recording, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DataError::Io { path: path.display().to_string(), msg: e.to_string() })?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut rec = parse_recording_csv(&bytes, &source)?;
    // keep full path in errors but the stem as the stable source id
    rec.source_id = source;
    Ok(rec)
}

/// Parse a `labels.txt` mapping (`id<TAB>name` per line, blank lines allowed).
pub fn parse_labels(text: &str, source: &str) -> Result<BTreeMap<usize, String>, DataError> {
    let perr = |line: u64, msg: String| DataError::Parse { path: source.to_string(), line, msg };
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (id_str, name) = raw
            .split_once('\t')
            .ok_or_else(|| perr(line, "expected `id<TAB>name`".into()))?;
        let id: usize = id_str
            .trim()
            .parse()
            .map_err(|_| perr(line, format!("bad label id '{id_str}'")))?;
        if id > MAX_LABEL {
            return Err(perr(line, format!("label id {id} out of range (max {MAX_LABEL})")));
        }
        let name = name.trim();
        if name.is_empty() {
            return Err(perr(line, "empty activity name".into()));
        }
        if map.insert(id, name.to_string()).is_some() {
            return Err(perr(line, format!("duplicate label id {id}")));
        }
    }
    Ok(map)
}

/// Load every `*.csv` under `dir` (sorted by filename) plus `labels.txt`.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Recording>, BTreeMap<usize, String>), DataError> {
    let io_err = |msg: String| DataError::Io { path: dir.display().to_string(), msg };
    let mut csvs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csvs.sort();
    if csvs.is_empty() {
        return Err(io_err("no .csv recordings found".into()));
    }
    let recordings = csvs.iter().map(|p| load_csv(p)).collect::<Result<Vec<_>, _>>()?;
    let labels_path = dir.join("labels.txt");
    let text = fs::read_to_string(&labels_path)
        .map_err(|e| DataError::Io { path: labels_path.display().to_string(), msg: e.to_string() })?;
    let names = parse_labels(&text, &labels_path.display().to_string())?;
    Ok((recordings, names))
}

/// Write a recording in the dataset CSV schema (floats at full precision, so
/// a reload is bit-identical).
pub fn write_recording_csv(rec: &Recording, path: &Path) -> Result<(), DataError> {
    let io_err =
        |e: std::io::Error| DataError::Io { path: path.display().to_string(), msg: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    w.write_record(CSV_HEADER).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let dt = 1.0 / rec.sample_rate_hz;
    for i in 0..rec.len() {
        let mut row = vec![format!("{}", i as f64 * dt)];
        for chan in &rec.channels {
            row.push(format!("{}", chan[i]));
        }
        row.push(format!("{}", rec.labels[i]));
        w.write_record(&row).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    }
    w.flush().map_err(io_err)
}

/// Write a `labels.txt` sidecar.
pub fn write_labels(names: &BTreeMap<usize, String>, path: &Path) -> Result<(), DataError> {
    let text: String = names.iter().map(|(id, name)| format!("{id}\t{name}\n")).collect();
    fs::write(path, text)
        .map_err(|e| DataError::Io { path: path.display().to_string(), msg: e.to_string() })
}

// ── resampling and windowing ────────────────────────────────────────────────

/// Majority label; ties broken by earliest occurrence in the slice. Returns
/// (label, count).
fn majority_label(labels: &[usize]) -> (usize, usize) {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    for &l in labels {
        if counts[&l] == best {
            return (l, best);
        }
    }
    unreachable!("non-empty slice always has a majority label");
}

/// Mean that is exact for constant slices: first + mean of offsets.
fn block_mean(xs: &[f64]) -> f64 {
    let first = xs[0];
    let mut acc = 0.0;
    for &x in xs {
        acc += x - first;
    }
    first + acc / xs.len() as f64
}

/// Reduce to `target_hz` by block means over groups of rate/target samples;
/// block labels take the majority (ties -> earliest in block). Trailing
/// samples that do not fill a block are dropped.
pub fn downsample(rec: &Recording, target_hz: u32) -> Result<Recording, DataError> {
    let ratio_f = rec.sample_rate_hz / target_hz as f64;
    let ratio = ratio_f.round();
    if (ratio_f - ratio).abs() > 1e-9 || ratio < 1.0 {
        return Err(DataError::BadRate { rate: rec.sample_rate_hz, target: target_hz });
    }
    let ratio = ratio as usize;
    if ratio == 1 {
        let mut out = rec.clone();
        out.sample_rate_hz = target_hz as f64;
        return Ok(out);
    }
    let blocks = rec.len() / ratio;
    let mut channels: [Vec<f64>; RAW_CHANNELS] = Default::default();
    for (c, chan) in channels.iter_mut().enumerate() {
        chan.reserve(blocks);
        for b in 0..blocks {
            chan.push(block_mean(&rec.channels[c][b * ratio..(b + 1) * ratio]));
        }
    }
    let labels = (0..blocks).map(|b| majority_label(&rec.labels[b * ratio..(b + 1) * ratio]).0).collect();
    Ok(Recording {
        sample_rate_hz: target_hz as f64,
        channels,
        labels,
        source_id: rec.source_id.clone(),
    })
}

/// Slice a 20 Hz recording into consecutive `[i*stride, i*stride+length)`
/// windows. The trailing remainder is dropped; windows whose majority label
/// covers less than 80% of the slice are discarded. A recording shorter than
/// one window yields an empty list.
pub fn make_windows(rec: &Recording, length: usize, stride: usize) -> Result<Vec<Window>, DataError> {
    if rec.sample_rate_hz != TARGET_HZ as f64 {
        return Err(DataError::NotTargetRate(TARGET_HZ));
    }
    assert!(length > 0 && stride > 0, "make_windows: zero length or stride");
    let mut out = Vec::new();
    let mut start = 0;
    while start + length <= rec.len() {
        let (label, count) = majority_label(&rec.labels[start..start + length]);
        if (count * 100) >= (length * 80) {
            let mut values = Array::zeros(length, RAW_CHANNELS);
            for i in 0..length {
                for c in 0..RAW_CHANNELS {
                    values.set(i, c, rec.channels[c][start + i]);
                }
            }
            out.push(Window { values, label, source_id: rec.source_id.clone() });
        }
        start += stride;
    }
    Ok(out)
}

// ── splitting ───────────────────────────────────────────────────────────────

/// Stratified split of `labels` into train/val/test index sets.
///
/// Within each class, counts follow the ratios by largest remainder, then
/// every partition with a nonzero ratio is topped up to at least one element;
/// assignment order is a seeded shuffle. Deterministic given the seed.
pub fn split_indices(
    labels: &[usize],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<[Vec<usize>; 3], DataError> {
    let parts = [ratios.0, ratios.1, ratios.2];
    let total: f64 = parts.iter().sum();
    if parts.iter().any(|&r| r < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::BadRatios(total));
    }
    let nonzero = parts.iter().filter(|&&r| r > 0.0).count();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut out: [Vec<usize>; 3] = Default::default();
    for (&class, members) in &mut by_class {
        let n = members.len();
        if n < nonzero {
            return Err(DataError::TooFewWindows { class, have: n, need: nonzero });
        }
        let mut counts = [0usize; 3];
        let mut rema = [0f64; 3];
        for i in 0..3 {
            let q = n as f64 * parts[i];
            counts[i] = q.floor() as usize;
            rema[i] = q - q.floor();
        }
        let mut left = n - counts.iter().sum::<usize>();
        while left > 0 {
            // largest remainder, ties to the earlier partition
            let mut best = 0;
            for i in 1..3 {
                if rema[i] > rema[best] {
                    best = i;
                }
            }
            counts[best] += 1;
            rema[best] = -1.0;
            left -= 1;
        }
        // top up any empty nonzero-ratio partition from the fullest one
        loop {
            let Some(short) = (0..3).find(|&i| parts[i] > 0.0 && counts[i] == 0) else { break };
            let donor = (0..3).max_by_key(|&i| counts[i]).expect("three partitions");
            counts[donor] -= 1;
            counts[short] += 1;
        }
        let mut rng = rng::substream(seed, "split", class as u64);
        members.shuffle(&mut rng);
        let (a, b) = (counts[0], counts[0] + counts[1]);
        out[0].extend_from_slice(&members[..a]);
        out[1].extend_from_slice(&members[a..b]);
        out[2].extend_from_slice(&members[b..]);
    }
    for part in &mut out {
        part.sort_unstable();
    }
    Ok(out)
}

/// Stratified split returning owned window lists.
pub fn split(
    windows: &[Window],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Window>, Vec<Window>, Vec<Window>), DataError> {
    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    let [tr, va, te] = split_indices(&labels, ratios, seed)?;
    let take = |idx: &[usize]| idx.iter().map(|&i| windows[i].clone()).collect();
    Ok((take(&tr), take(&va), take(&te)))
}

/// Order-independent fingerprint of a split (for cross-arm consistency checks).
pub fn split_fingerprint(parts: &[Vec<usize>; 3], labels: &[usize]) -> u64 {
    let mut bytes = Vec::with_capacity(labels.len() * 10);
    for (p, part) in parts.iter().enumerate() {
        bytes.push(b'P');
        bytes.push(p as u8);
        for &i in part {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
            bytes.extend_from_slice(&(labels[i] as u64).to_le_bytes());
        }
    }
    rng::fnv1a_64(&bytes)
}

// ── synthetic data ──────────────────────────────────────────────────────────

/// Continuous per-class signal model shared by the window and recording
/// generators. Acc axes are two-harmonic sinusoids at a class base frequency
/// (0.5 + 0.4k Hz) with per-axis phase offsets plus N(0, 0.1) noise; gyro
/// axes are scaled first differences of acc plus an independent sinusoid at
/// 1.5x the base frequency, so acc x gyro cross-terms carry class structure.
struct SynthClass {
    base_hz: f64,
    phase_acc: f64,
    phase_harm: f64,
    phase_gyro: f64,
}

const ACC_AMP: [f64; 3] = [1.0, 0.8, 0.6];
const HARM_AMP: f64 = 0.4;
const GYRO_DIFF_GAIN: f64 = 3.0;
const GYRO_SIN_AMP: f64 = 0.5;
const NOISE_SIGMA: f64 = 0.1;

impl SynthClass {
    fn new(class: usize, rng: &mut impl Rng) -> Self {
        Self {
            base_hz: 0.5 + 0.4 * class as f64,
            phase_acc: rng.gen_range(0.0..std::f64::consts::TAU),
            phase_harm: rng.gen_range(0.0..std::f64::consts::TAU),
            phase_gyro: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Six channel values at continuous sample index `i` of `n` total, given
    /// the previous acc sample (for the gyro first difference).
    fn sample(&self, t: f64, noise: &[f64; 3], prev_acc: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
        use std::f64::consts::TAU;
        let mut acc = [0.0; 3];
        for j in 0..3 {
            let ph = j as f64 * TAU / 3.0;
            acc[j] = ACC_AMP[j] * (TAU * self.base_hz * t + self.phase_acc + ph).sin()
                + HARM_AMP * (2.0 * TAU * self.base_hz * t + self.phase_harm + ph).sin()
                + noise[j];
        }
        let mut gyro = [0.0; 3];
        for j in 0..3 {
            let ph = j as f64 * TAU / 3.0;
            gyro[j] = GYRO_DIFF_GAIN * (acc[j] - prev_acc[j])
                + GYRO_SIN_AMP * (TAU * 1.5 * self.base_hz * t + self.phase_gyro + ph).sin();
        }
        (acc, gyro)
    }
}

/// Generate all six channels for one class: `n` samples at `rate` Hz.
fn synth_channels(class: usize, n: usize, rate: f64, seed: u64) -> [Vec<f64>; RAW_CHANNELS] {
    let mut rng = rng::substream(seed, "synth", class as u64);
    let model = SynthClass::new(class, &mut rng);
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let dt = 1.0 / rate;
    let mut channels: [Vec<f64>; RAW_CHANNELS] = Default::default();
    for chan in channels.iter_mut() {
        chan.reserve(n);
    }
    // one warm-up sample so the first difference is defined at i = 0
    let mut prev_acc = [0.0; 3];
    for i in 0..=n {
        let t = (i as f64 - 1.0) * dt;
        let noise = [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)];
        let (acc, gyro) = model.sample(t, &noise, &prev_acc);
        if i > 0 {
            for j in 0..3 {
                channels[j].push(acc[j]);
                channels[3 + j].push(gyro[j]);
            }
        }
        prev_acc = acc;
    }
    channels
}

/// Synthesize `windows_per_class` labeled windows per class, directly at
/// 20 Hz. Deterministic given the seed.
pub fn synth_dataset(
    num_classes: usize,
    windows_per_class: usize,
    seed: u64,
) -> Result<Vec<Window>, DataError> {
    if !(2..=10).contains(&num_classes) {
        return Err(DataError::BadClassCount(num_classes));
    }
    let mut out = Vec::with_capacity(num_classes * windows_per_class);
    for class in 0..num_classes {
        let n = windows_per_class * WINDOW_LEN;
        let channels = synth_channels(class, n, TARGET_HZ as f64, seed);
        for w in 0..windows_per_class {
            let mut values = Array::zeros(WINDOW_LEN, RAW_CHANNELS);
            for i in 0..WINDOW_LEN {
                for c in 0..RAW_CHANNELS {
                    values.set(i, c, channels[c][w * WINDOW_LEN + i]);
                }
            }
            out.push(Window { values, label: class, source_id: format!("synth-c{class}") });
        }
    }
    Ok(out)
}

/// Synthesize one recording per class at `rate` Hz (each long enough for
/// `windows_per_class` windows after downsampling to 20 Hz).
pub fn synth_recordings(
    num_classes: usize,
    windows_per_class: usize,
    rate: u32,
    seed: u64,
) -> Result<Vec<Recording>, DataError> {
    if !(2..=10).contains(&num_classes) {
        return Err(DataError::BadClassCount(num_classes));
    }
    if rate < TARGET_HZ || rate % TARGET_HZ != 0 {
        return Err(DataError::BadRate { rate: rate as f64, target: TARGET_HZ });
    }
    let per_window = (rate / TARGET_HZ) as usize * WINDOW_LEN;
    let mut out = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let n = windows_per_class * per_window;
        let channels = synth_channels(class, n, rate as f64, seed);
        out.push(Recording {
            sample_rate_hz: rate as f64,
            channels,
            labels: vec![class; n],
            source_id: format!("synth-c{class}"),
        });
    }
    Ok(out)
}

/// Default activity names for synthetic classes.
pub fn synth_label_names(num_classes: usize) -> BTreeMap<usize, String> {
    (0..num_classes).map(|k| (k, format!("activity_{k}"))).collect()
}

// ── tests ───────────────────────────────────────────────────────────────────
