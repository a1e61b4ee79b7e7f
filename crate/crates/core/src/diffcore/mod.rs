//! Minimal differentiable substrate: tensors, layer-list networks with exact
//! reverse-mode gradients, optimizers, gradient checking and checkpoints.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, Probe};
pub use network::{
    backward, backward_with, forward, BackwardOptions, ForwardTrace, Gradients, Layer, Network,
    NetworkSpec,
};
pub use optim::{step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use scalar::Scalar;
pub use tensor::{ParameterSet, Tensor};

#[cfg(test)]
mod tests;
