//! Regenerate the seed corpus under `fuzz/corpus/`. Seeds pair valid
//! artifacts with near-valid mutants so the fuzzers start at the format
//! boundaries instead of random bytes.
//!
//! Run with `cargo run -p nshar --example gen_fuzz_corpus`.

use std::fs;
use std::path::PathBuf;

use nshar::data::{synth_label_names, synth_recordings, write_labels, write_recording_csv};
use nshar::model::{EncoderConfig, ModelArm};
use nshar::training::{encode_checkpoint, init_encoder_checkpoint};

fn main() {
    let corpus = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");

    // ── parse_recording_csv ──────────────────────────────────────────────
    let dir = corpus.join("parse_recording_csv");
    fs::create_dir_all(&dir).unwrap();
    let rec = &synth_recordings(2, 1, 20, 7).unwrap()[0];
    write_recording_csv(rec, &dir.join("valid.csv")).unwrap();
    let valid = fs::read_to_string(dir.join("valid.csv")).unwrap();
    let half = valid.len() / 2;
    fs::write(dir.join("truncated.csv"), &valid[..half]).unwrap();
    fs::write(
        dir.join("bad_header.csv"),
        valid.replacen("timestamp_s", "time", 1),
    )
    .unwrap();
    fs::write(
        dir.join("non_numeric.csv"),
        "timestamp_s,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,label\n0.0,a,0,0,0,0,0,0\n",
    )
    .unwrap();
    fs::write(
        dir.join("backwards_time.csv"),
        "timestamp_s,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,label\n\
         0.10,1,2,3,4,5,6,0\n0.05,1,2,3,4,5,6,0\n",
    )
    .unwrap();

    // ── parse_labels ─────────────────────────────────────────────────────
    let dir = corpus.join("parse_labels");
    fs::create_dir_all(&dir).unwrap();
    write_labels(&synth_label_names(4), &dir.join("valid.txt")).unwrap();
    fs::write(dir.join("duplicate.txt"), "0\twalking\n0\trunning\n").unwrap();
    fs::write(dir.join("no_tab.txt"), "0 walking\n").unwrap();
    fs::write(dir.join("huge_id.txt"), "99999999\twobbling\n").unwrap();

    // ── parse_checkpoint ─────────────────────────────────────────────────
    let dir = corpus.join("parse_checkpoint");
    fs::create_dir_all(&dir).unwrap();
    let cfg = EncoderConfig {
        seq_len: 120,
        input_features: 6,
        hidden: 8,
        layers: 1,
        heads: 2,
        ffn: 12,
        projector_hidden: 4,
        dropout: 0.0,
        gru_hidden: 6,
        arm: ModelArm::Ns,
    };
    let norm = nshar::augment::NormStats { mean: vec![0.0; 6], std: vec![1.0; 6] };
    let ckpt = init_encoder_checkpoint(&cfg, &norm, 7);
    let bytes = encode_checkpoint(&ckpt);
    fs::write(dir.join("valid.ckpt"), &bytes).unwrap();
    fs::write(dir.join("truncated.ckpt"), &bytes[..40]).unwrap();
    let mut trailing = bytes.clone();
    trailing.extend_from_slice(b"junk");
    fs::write(dir.join("trailing.ckpt"), trailing).unwrap();
    let mut wrong_version = bytes.clone();
    wrong_version[5] = b'2';
    fs::write(dir.join("wrong_version.ckpt"), wrong_version).unwrap();
    let mut bad_magic = bytes;
    bad_magic[0] = b'X';
    fs::write(dir.join("bad_magic.ckpt"), bad_magic).unwrap();

    // ── parse_config ─────────────────────────────────────────────────────
    let dir = corpus.join("parse_config");
    fs::create_dir_all(&dir).unwrap();
    fs::write(
        dir.join("valid.cfg"),
        "# full run\ndata.classes=4\ndata.per_class=500\naugment=fm\nmodel.arm=ns\n\
         model.hidden=72\nmodel.layers=4\nmodel.heads=4\nmodel.ffn=144\n\
         pretrain.epochs=300\npretrain.lr=0.0001\nfinetune.epochs=200\nfinetune.lr=0.001\n\
         split.train=0.7\nsplit.val=0.15\nsplit.test=0.15\n\
         experiment.arms=ns+fm,ns,vanilla+fm,vanilla\nseed=1\n",
    )
    .unwrap();
    fs::write(dir.join("unknown_key.cfg"), "pretrain.momentum=0.9\n").unwrap();
    fs::write(dir.join("duplicate.cfg"), "seed=1\nseed=2\n").unwrap();
    fs::write(dir.join("no_equals.cfg"), "just some words\n").unwrap();
    fs::write(dir.join("conflict.cfg"), "data.dir=x\ndata.classes=4\ndata.per_class=1\n").unwrap();

    println!("wrote seed corpus under {}", corpus.display());
}
