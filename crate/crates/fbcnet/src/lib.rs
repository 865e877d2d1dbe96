//! Filter-bank convolutional network for motor-imagery EEG decoding.
//!
//! The pipeline: a Chebyshev Type II filter bank turns each raw trial
//! into a multi-view tensor, a depthwise spatial convolution block
//! (batch norm + Swish, max-norm 2) learns per-band spatial filters, a
//! windowed variance layer extracts band power over time, and a
//! max-norm-0.5 fully connected layer classifies. Training is
//! two-stage Adam with early stopping; evaluation covers 10-fold CV and
//! hold-out protocols; relevance maps come from DeepLIFT with the
//! Rescale rule.
//!
//! Everything runs on a small built-in f64 autodiff engine
//! ([`tensor`]); no external numerics are required.

pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod layers;
pub mod model;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use data::{EegDataset, EegTrial, SynthConfig};
pub use dsp::{BandSpec, FilterBank, FilterMode, SosFilter};
pub use error::{Error, Result};
pub use eval::{EvalReport, FoldAssignment};
pub use layers::{Activation, TemporalKind};
pub use model::{FbcNet, ModelConfig};
pub use tensor::Tensor;
pub use trainer::{TrainLog, TrainPlan};
