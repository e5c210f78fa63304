//! Minimal dense tensor engine with a reverse-mode autodiff tape.
//!
//! Values are `f64` throughout. The op set covers what a GRU
//! encoder-decoder with attention, convolutional sentence encoding and
//! graph attention needs; broadcasting is limited to adding a bias vector
//! onto each row of a matrix.

pub mod error;
pub mod gradcheck;
pub mod params;
pub mod snapshot;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error};
pub use params::ParamStore;
pub use snapshot::Snapshot;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
