//! Dense arrays, reverse-mode differentiation, optimizers and gradient checks.

mod array;
pub mod conv;
mod gradcheck;
mod graph;
mod mask;
mod ops;
mod optim;
mod params;
mod real;
mod session;

pub use array::{matmul_into, Tensor};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, Probe};
pub use graph::{Backward, Grads, Graph, Var};
pub use mask::Mask;
pub(crate) use ops::{apply_mask_inplace, resize_planes};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, Schedule};
pub use params::{
    count_trainable, ema_update, ema_within, GradMap, Init, Param, ParamSet, ParamSpec,
};
pub use real::Real;
pub use session::{apply_stats, Session};
