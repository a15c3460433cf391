//! Dense `f64` tensors, a reverse-mode autodiff tape and the optimizer used
//! by every trainable model in the crate.

mod attention;
pub mod linalg;
mod optim;
mod params;
mod tape;
mod tensor;

pub use attention::{AttentionMask, Segment};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tape::{
    gaussian_nll, matern52_from_sq, sigmoid, sinusoidal_table, softplus, std_normal_cdf,
    std_normal_pdf, Gradients, Tape, Var,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("attention row {row} of batch element {batch} has no allowed key")]
    FullyMaskedRow { batch: usize, row: usize },
    #[error("matrix not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Masked multi-head attention on plain `[tokens, dim]` matrices.
pub fn masked_multihead_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Tensor, NumericsError> {
    let lift = |t: &Tensor| t.clone().reshaped(vec![1, t.shape()[0], t.shape()[1]]);
    let mut tape = Tape::inference();
    let q = tape.constant(lift(queries));
    let k = tape.constant(lift(keys));
    let v = tape.constant(lift(values));
    let out = tape.attention(q, k, v, mask, heads)?;
    Ok(tape.value(out).clone().reshaped(queries.shape().to_vec()))
}
