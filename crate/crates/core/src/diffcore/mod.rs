//! Deterministic differentiable core: kernels with analytic backward rules,
//! a recording tape, and finite-difference checks.

pub(crate) mod gradcheck;
pub mod kernels;
mod param;
pub mod suite;
mod tape;

pub use gradcheck::{grad_check, grad_check_with_fault, relative_error, GradCheckReport, FD_STEP, REL_FLOOR};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Fault, Gradients, Tape, Var};
