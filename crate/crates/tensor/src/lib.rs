//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The crate is deliberately small: a row-major [`Tensor`], a [`Tape`] that
//! records differentiable operations, numeric [`kernels`] shared by forward and
//! backward rules, a finite-difference [`gradcheck`], a MAC counter ([`mac`]),
//! and the MSAT binary tensor format ([`msat`]).

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mac;
pub mod msat;
pub mod par;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use tape::{Conv2dSpec, CustomOp, Gradients, Tape, Var};
pub use tensor::{AnyTensor, DType, Element, Real, Tensor};
