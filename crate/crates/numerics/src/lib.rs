//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive applications in order; [`Tape::backward`]
//! replays them in reverse. Named parameters live in a [`ParamStore`] and
//! are bound onto a tape through a [`Binder`]. [`gradcheck`] compares tape
//! gradients against central finite differences.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_inputs, grad_check, relative_error, CheckStatus, GradCheckReport};
pub use ops::{interp_taps, sigmoid, COSINE_EPS};
pub use params::{Binder, Param, ParamStore};
pub use suite::{primitive_suite, OpCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
