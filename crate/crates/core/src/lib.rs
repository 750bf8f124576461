//! Segment-prompt fusion forecaster with a dynamic mixture-of-experts head.
//!
//! A context window is cut into fixed-length segments. Each segment gets a
//! numeric embedding and a text prompt describing its time range and summary
//! statistics; the prompt is embedded by a frozen encoder and mixed with the
//! numeric embedding through a learned gate. A small causal transformer
//! contextualizes the sequence and a softmax-gated mixture of linear experts
//! predicts the next segment. Forecasts longer than one segment are rolled
//! out autoregressively.
//!
//! The crate is deliberately small-scale: everything is `f64` on the CPU,
//! gradients are written by hand and checked against finite differences, and
//! training is bitwise reproducible for a given seed.

pub mod config;
pub mod data;
pub mod dataset;
pub mod descriptors;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod textenc;
pub mod train;

pub use config::RunConfig;
pub use data::{load_csv, TimeSeriesFrame};
pub use error::{Error, Result};
pub use model::{Checkpoint, Model, ModelConfig};
