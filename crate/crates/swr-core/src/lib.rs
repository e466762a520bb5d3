//! Budget-controllable transfer learning via policy-gated weight deltas.
//!
//! The crate builds a small convolutional backbone, wraps its pretrained
//! weights with additive zero-initialized deltas gated by per-layer binary
//! policies, and trains a cost-conditioned policy network that decides,
//! for any target parameter budget in [0, 1], which layers receive a
//! task-specific delta. Merged models carry zero extra compute; per-task
//! state is the selected deltas, batch-norm running statistics, and a
//! classifier head.

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod rng;

pub use autodiff::{Tape, Tensor};
pub use error::{Result, SwrError};
pub use rng::SwrRng;
