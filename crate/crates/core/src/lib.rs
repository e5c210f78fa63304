pub mod dataset;
pub mod equation;
pub mod error;
pub mod graph;
pub mod lda;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
