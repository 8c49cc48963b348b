//! Desk-scale simulator of analog in-memory training on resistive
//! crossbars.
//!
//! The crate models soft-bounds device physics, pulsed crossbar tiles,
//! transfer-style training algorithms with and without chopped gradient
//! accumulation, small dense/attention classifiers that can be converted
//! layer-by-layer to analog tiles, synthetic teacher tasks, and a sweep
//! runner that turns all of it into CSV traces and SVG plots.
//!
//! Start with the runnable examples (each one demonstrates a capability):
//!
//! ```text
//! cargo run --release --example device_physics      # pulses, skew, drift
//! cargo run --release --example pulsed_updates      # stochastic vs expected rank-1 updates
//! cargo run --release --example transfer_training   # buffered-transfer trainer vs digital SGD
//! cargo run --release --example chopper_rejection   # offset rejection from chopped accumulation
//! cargo run --release --example transfer_pipeline   # pretrain -> convert -> fine-tune
//! cargo run --release --example robustness_sweep    # noise sweep with CSV + SVG output
//! ```
//!
//! The thin `atls` binary exposes the same pipeline as subcommands
//! (`pretrain`, `finetune`, `sweep`, `report`); see the README for the
//! config format.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod device;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod network;
pub mod plot;
pub mod rng;
pub mod tile;
pub mod trainer;

pub use error::{AtlsError, Result};
