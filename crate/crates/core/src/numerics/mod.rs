//! Dense matrices, batch normalization, a reverse-mode gradient tape and
//! the Adam optimizer.

mod adam;
mod batchnorm;
mod matrix;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use batchnorm::{
    batchnorm_forward, BatchNormState, BatchStats, NormMode, RunningStats, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
pub use matrix::{euclidean, Matrix};
pub use tape::{mse, segment_softmax, Edge, Edges, NormStats, ParamId, ParamStore, Parameter, Tape, Var};
