//! Dense boundary generator for temporal action proposals.
//!
//! The crate covers the whole pipeline at desk scale: a small tensor library
//! with reverse-mode gradients, the proposal feature generation layer, the
//! network, label generation, losses, training, post-processing, proposal
//! evaluation and feature/annotation I/O.

pub mod autodiff;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pfg;
pub mod pipeline;
pub mod postprocess;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Real, Tensor};
