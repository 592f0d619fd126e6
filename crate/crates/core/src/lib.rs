//! Partial-discharge detection for three-phase power-line waveforms.
//!
//! The pipeline takes one grid-frequency period of raw sensor data per
//! measurement, extracts phase-aligned discharge pulses from the positive and
//! negative half-cycles, converts them to time-domain pulse matrices and
//! log-spectrograms, and classifies them with a dual-branch CNN whose training
//! couples the two half-cycles through a cycle-consistency loss.
//!
//! Modules, in pipeline order:
//!
//! * [`signal_io`] — manifests, raw-measurement files, cached feature files.
//! * [`preprocess`] — smoothing, phase alignment, flattening, peak extraction.
//! * [`timefreq`] — per-pulse spectrograms and input normalization.
//! * [`tensor`] — dense tensors with reverse-mode gradients and Adam.
//! * [`model`] — the dual-branch network, attention module, and losses.
//! * [`training`] — stratified k-fold training, checkpointing, evaluation.
//! * [`metrics`] — confusion-matrix metrics (MCC, precision, recall, F1).
//! * [`synth`] — synthetic labeled measurements for desk-scale runs.

pub mod matrix;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod signal_io;
pub mod synth;
pub mod tensor;
pub mod timefreq;
pub mod training;

pub use matrix::Matrix;
pub use metrics::ConfusionCounts;
pub use model::{DualCyConNet, ModelConfig};
pub use preprocess::PreprocessConfig;
pub use signal_io::{Manifest, MeasurementFeatures, PhaseId, RawMeasurement};
pub use synth::SynthConfig;
pub use tensor::{AdamConfig, Graph, Mode, Param, Tensor};
pub use training::{EvalReport, TrainConfig};
