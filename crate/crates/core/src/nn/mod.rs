//! A small, fixed-topology CNN engine: conv2d, batch normalization, dropout,
//! flatten, dense and softmax cross-entropy, each with a hand-written backward
//! pass. Activations are NHWC (`[batch, height, width, channels]`).
//!
//! All kernels are generic over [`Real`] so the same code paths run in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod activation;
mod batchnorm;
pub mod checkpoint;
mod conv;
mod dense;
mod dropout;
mod loss;
mod model;
mod spec;
mod tensor;

pub use activation::{relu_backward, relu_forward};
pub use batchnorm::{
    batchnorm_apply, batchnorm_backward, batchnorm_forward, update_moving_stats, BatchNormCache,
    BatchNormGrads, BatchNormState, BN_EPSILON, BN_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvCache, ConvGrads};
pub use dense::{dense_backward, dense_forward, Dense, DenseCache, DenseGrads};
pub use dropout::{dropout_backward, dropout_forward};
pub use loss::{softmax, softmax_xent, softmax_xent_batch, BatchLoss, SoftmaxXent};
pub use model::{build_canonical_model, ForwardPass, Gradients, Layer, LayerCache, LayerGrads, Model};
pub use spec::{
    canonical_spec, param_count, Activation, Conv2dSpec, LayerSpec, ModelSpec, Padding, ParamCount,
};
pub use tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("batch normalization needs at least one sample in training mode")]
    EmptyBatch,
    #[error("dropout rate {0} outside [0, 1)")]
    BadRate(f64),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub(crate) fn shape_err(expected: &[usize], got: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}
