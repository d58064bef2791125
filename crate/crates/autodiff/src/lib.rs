//! Minimal dense tensor arithmetic with reverse-mode differentiation.
//!
//! Values are `f64` row-major tensors. Computations are expressed by
//! applying [`Primitive`]s through a [`Tape`]; [`Tape::backward`] returns a
//! [`GradientMap`] for the differentiable leaves. [`gradcheck`] compares
//! those gradients with central finite differences.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{check_gradients, finite_diff_check, GradCheck};
pub use ops::Primitive;
pub use tape::{GradientMap, Tape, Var};
pub use tensor::Tensor;
