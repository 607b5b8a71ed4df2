//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors, with exactly the primitives a small U-shaped vision-language
//! segmentation network needs, plus a finite-difference gradient checker.
//!
//! Computation is recorded on a [`Tape`]; every primitive is a method that
//! appends one node and returns its [`Var`] handle. Elements are `f32` for
//! training and `f64` for gradient checks.

mod element;
mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod reference;
mod tape;
mod tensor;

pub use element::{gemm, Element, MatMut, MatRef};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_with, rel_error, GradCheckConfig, GradCheckReport};
pub use ops::attention::Attention;
pub use ops::conv::Conv2dSpec;
pub use ops::elementwise::sigmoid;
pub use ops::norm::{BatchNormMode, BatchStats, NORM_EPS};
pub use ops::shape::UpsampleMode;
pub use params::{Graph, Param, ParamId, ParamStore};
pub use tape::{OpTiming, Profile, Tape, Var};
pub use tensor::Tensor;
