//! Small differentiable core: dense layers, activations, segment pooling,
//! segmentation losses, Adam, and a finite-difference gradient checker.
//!
//! There is no tape. Each op has an explicit backward taking the forward
//! cache, and the model wires them together by hand.

pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_masked, GradCheck};
pub use layers::{Linear, Mlp, MlpCache, Output};
pub use loss::{lovasz_softmax, weighted_cross_entropy};
pub use ops::{
    linear, linear_backward, relu, relu_backward, segment_reduce, segment_reduce_backward, sigmoid, sigmoid_backward,
    softmax, softmax_backward, tanh, tanh_backward, ReduceMode, Reduced, SegmentMap,
};
pub use optim::{Adam, LrSchedule};
pub use tensor::{Matrix, ParamTensor};
