//! Minimal dense numeric kernels: tensors, layer forward/backward passes,
//! the RMSProp optimizer, checkpoint IO, and a finite-difference gradient
//! checker. Everything is f64; gradient checks at 1e-5 tolerances are not
//! workable in single precision.

pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod params;
pub mod tensor;

pub use gradcheck::{gradient_check, gradient_check_with, CoordSelection, GradCheckReport};
pub use gru::{gru_backward, gru_forward, GruCache, GruGrads, GruWeights};
pub use layers::{
    batch_norm_backward, batch_norm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, dropout_backward, dropout_forward, maxpool_feature_backward,
    maxpool_feature_forward, relu_backward, relu_forward, softmax, softmax_cross_entropy,
    Activation, BatchNormCache, Mode,
};
pub use params::{
    load_checkpoint, rmsprop_step, save_checkpoint, OptimizerConfig, Param, ParameterStore,
};
pub use tensor::Tensor;
