//! Unsupervised cross-modal knowledge transfer by bridging two frozen
//! layer-stack encoders.
//!
//! A small prototype network maps an intermediate representation of the
//! new-modality encoder into a layer of the old-modality encoder, so the old
//! model's remaining layers and task head can classify new-modality signals.
//! Only the bridge is trained.

pub mod autodiff;
pub mod bridge;
pub mod cka;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod probing;
pub mod tensor;
pub mod transfer;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
