//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records each operation as it runs; [`Tape::backward`] sweeps
//! the record in reverse to produce [`Gradients`]. Scalars are generic over
//! [`Real`] so the same graph runs in `f32` for training and `f64` for
//! finite-difference verification ([`grad_check`]).

pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod real;
pub mod rng;
pub mod serialize;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, numerical_gradient, relative_error, DEFAULT_STEP};
pub use params::{Param, ParamId, ParamStore};
pub use real::{DType, Real};
pub use rng::Rng;
pub use serialize::FormatError;
pub use tape::{BatchNormMode, ConvGeometry, Gradients, OpKind, Tape, Var, NORM_EPS};
pub use tensor::{Result, Tensor, TensorError};
