//! Minimal dense-tensor engine: value tensors, explicit forward/backward kernels,
//! trainable parameters with Adam, finite-difference gradient checks and the named
//! tensor checkpoint format.

mod checkpoint;
mod gradcheck;
pub mod layers;
mod ops;
mod param;
mod tensor;

pub use checkpoint::{read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use ops::{
    cross_entropy, cross_entropy_backward, gelu, gelu_backward, l2_normalize, l2_normalize_backward,
    layer_norm, layer_norm_backward, matmul, matmul_backward, matmul_into, softmax_backward, softmax_stable,
    weighted_nll, LayerNormCache,
};
pub use param::{adam_step, OptimizerConfig, ParamSet, Parameter};
pub use tensor::Tensor;
pub(crate) use ops::gemm;
