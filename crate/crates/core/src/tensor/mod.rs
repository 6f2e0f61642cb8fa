//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod array;
mod checkpoint;
mod gradcheck;
mod optim;
mod param;
mod tape;

pub use array::Tensor;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use optim::Adam;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var, LAYER_NORM_EPS};

