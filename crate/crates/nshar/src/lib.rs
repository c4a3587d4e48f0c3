//! End-to-end pipeline for human-activity recognition from six-axis IMU
//! recordings: cross-sensor frequency-modulation features, masked-
//! reconstruction pretraining of a series-stationarized transformer encoder
//! with de-stationary attention, and supervised finetuning of a GRU
//! classifier on the frozen encoder.
//!
//! Everything numeric runs on a small define-then-run computation graph with
//! reverse-mode autodiff (see [`numerics`]); training uses `f32`, while
//! verification (finite-difference gradient checks, algebraic oracles) runs
//! the same graphs at `f64`.

pub mod augment;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod experiment;
pub mod fuzz;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;
