//! Minimal reverse-mode differentiable tensor engine.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{DenomPolicy, Gradients, Graph, Precision, Var};
pub use optim::{Adam, CosineSchedule};
pub use params::{fan_in_uniform, Activation, Bound, Linear, Mlp, ParamId, ParamStore};
pub use tensor::Tensor;
