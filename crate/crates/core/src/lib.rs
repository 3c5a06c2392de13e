//! Simulator for hybrid-precision neural-network training on FeFET
//! synaptic crossbars.
//!
//! Binary (or few-level) weights live in differential-pair FeFET arrays
//! and are used for the forward and backward passes; gradients are kept at
//! high precision in a fixed-point accumulator and only turned into device
//! program events once they cross a threshold. Device-to-device and
//! cycle-to-cycle variation are injected at every program event from a
//! Gaussian macro-model that can be fitted from calibration measurements.

pub mod accumulator;
pub mod calibration;
pub mod config;
pub mod crossbar;
pub mod device;
pub mod error;
pub mod experiment;
pub mod matrix;
pub mod mlp;
pub mod mnist;
pub mod rng;
pub mod trainer;

pub use accumulator::GradientAccumulator;
pub use calibration::{fit_variation_model, FittedStats};
pub use config::{ConfigOverrides, ExperimentConfig};
pub use crossbar::CrossbarArray;
pub use device::{FeFetCell, MacroModel, MeasurementRecord};
pub use error::{Error, Result};
pub use matrix::{Matrix, SignMatrix};
pub use mnist::Dataset;
pub use rng::{RngKey, StreamId};
pub use trainer::{Metrics, Network, Topology, TrainingConfig, UpdateMode};
