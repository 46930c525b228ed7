//! Per-pixel classification of satellite image time series.
//!
//! The crate bundles a small 64-bit tensor engine with reverse-mode
//! automatic differentiation, builders for six time-series classification
//! architectures, the data pipeline (loaders, percentile normalisation,
//! splits, a synthetic generator), a deterministic training loop with early
//! stopping, evaluation metrics, and a grid-search experiment harness.
//!
//! Determinism contract: given a fixed seed, model construction, training
//! and evaluation are bit-reproducible on one platform. Tensors are plain
//! values; a model must not be trained from two threads at once, but
//! separate trials can run in parallel on shared read-only datasets.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod harness;
pub mod model_io;
pub mod models;
pub mod nn;
pub mod params;
pub mod presets;
pub mod tape;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Mode, NodeId, PoolKind, Tape};
pub use tensor::Tensor;
