//! Harnesses shared by the `fuzz/` targets and the stable-toolchain corpus
//! tests: each feeds untrusted bytes to one parser and asserts its safety
//! contract — never panic, and every *accepted* input satisfies the parser's
//! documented invariants.

use crate::data::{self, MAX_LABEL, TARGET_HZ};
use crate::training::{encode_checkpoint, parse_checkpoint};

/// Recording CSV: accepted recordings are rectangular, finite, rate-checked.
pub fn recording_csv(bytes: &[u8]) {
    if let Ok(rec) = data::parse_recording_csv(bytes, "fuzz") {
        assert!(rec.sample_rate_hz.is_finite() && rec.sample_rate_hz >= TARGET_HZ as f64);
        assert!(rec.labels.len() >= 2);
        for channel in &rec.channels {
            assert_eq!(channel.len(), rec.labels.len());
            assert!(channel.iter().all(|v| v.is_finite()));
        }
        assert!(rec.labels.iter().all(|&l| l <= MAX_LABEL));
    }
}

/// labels.txt: accepted maps have bounded ids and non-empty names.
pub fn labels(bytes: &[u8]) {
    let Ok(text) = std::str::from_utf8(bytes) else { return };
    if let Ok(names) = data::parse_labels(text, "fuzz") {
        for (id, name) in &names {
            assert!(*id <= MAX_LABEL);
            assert!(!name.is_empty());
        }
    }
}

/// Binary checkpoint: accepted checkpoints re-encode to bytes that parse
/// back to the same value (the codec is lossless on its accepted set).
pub fn checkpoint(bytes: &[u8]) {
    if let Ok(ckpt) = parse_checkpoint(bytes) {
        let reencoded = encode_checkpoint(&ckpt);
        let reparsed = parse_checkpoint(&reencoded).expect("re-encoded checkpoint must parse");
        assert_eq!(ckpt, reparsed);
    }
}

/// Run config: accepted configs are valid (parsing implies every
/// cross-field invariant holds).
pub fn config(bytes: &[u8]) {
    let Ok(text) = std::str::from_utf8(bytes) else { return };
    if let Ok(cfg) = crate::config::ExperimentConfig::from_text(text) {
        cfg.validate().expect("parsed config must validate");
    }
}
