//! Differentiable numeric core: tensors, layer kernels, sequential networks
//! with recorded tapes, finite-difference gradient checking and SGD.

mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, numeric_gradient, GradCheckReport, LossSpec};
pub use layers::{softmax_cross_entropy, softmax_rows, LayerSpec};
pub use network::{model_backward, model_forward, Network, Tape};
pub use optim::{sgd_step, OptState};
pub use params::ParamVector;
pub use tensor::{argmax, tree_sum, Precision, Tensor};
