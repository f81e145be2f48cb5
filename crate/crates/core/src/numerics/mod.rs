//! Dense linear-algebra kernel: matrices, seeded random streams, norms and
//! the elementwise primitives every other module builds on.

mod matrix;
mod ops;
mod rng;

pub use matrix::{Matrix, NormKind};
pub use ops::{
    causal_mask, gaussian_matrix, layer_norm, relu, row_log_softmax, row_mean, row_softmax, solve,
    LAYER_NORM_EPS, MASK_VALUE,
};
pub use rng::RngStream;
