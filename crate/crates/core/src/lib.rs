//! Two-stream spatio-temporal classifier for stalking vs. non-stalking video clips.
//!
//! The crate covers the whole pipeline:
//!
//! * [`tensor`]: dense f64 arrays with a tape-based reverse-mode autodiff engine.
//! * [`layers`]: ConvLSTM, time-distributed max pooling, dense, dropout, binary cross-entropy.
//! * [`model`]: the CNN-LSTM / MLP fusion network, its ablation variants and checkpoints.
//! * [`geomfeat`]: landmark selection, head pose, relative distance, scaling, reshaping.
//! * [`cascade`]: a cascade-of-regressors landmark aligner trained on synthetic shapes.
//! * [`datapipe`]: manifests, annotations, frame images, splitting and the scenario generator.
//! * [`trainer`]: Adam, early stopping, metrics and ablation runs.

pub mod cascade;
pub mod container;
pub mod datapipe;
pub mod error;
pub mod geomfeat;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
