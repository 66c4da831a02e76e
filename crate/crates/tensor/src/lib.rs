//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! Values are row-major `f64` buffers. Computation is recorded on a [`Tape`]
//! during the forward pass and replayed in reverse by [`Tape::backward`].
//! Parameters live in a [`ParamStore`] and are bound onto a tape as leaves for
//! each forward pass; gradients are written back into the store and consumed
//! by [`Adam`].

mod error;
pub mod gradcheck;
pub mod init;
mod kernels;
mod lstm;
pub mod optim;
mod params;
mod tape;
mod tensor;
pub mod weights;

pub use error::{Result, TensorError};
pub use lstm::{BiLstm, LstmDir};
pub use optim::{cosine_lr, Adam, AdamConfig, AdamState, LrSchedule};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, MASKED_SCORE};
pub use tensor::Tensor;
