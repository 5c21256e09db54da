//! Reverse-mode differentiation over dense `f64` matrices, the Adam optimizer
//! and a central-difference gradient checker.

mod adam;
mod cases;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use adam::{AdamState, LearningRates};
pub use cases::{check_op, OpCaseReport};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use params::{Gradients, ParamGroup, ParamId, ParamStore, Parameter};
pub use tape::{OpKind, Tape, Var};
