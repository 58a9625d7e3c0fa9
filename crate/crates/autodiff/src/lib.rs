//! Reverse-mode automatic differentiation over dense complex tensors.
//!
//! Values are recorded on a [`Tape`] as primitives are applied; a single
//! reverse sweep then yields the gradient of a real scalar loss with respect
//! to the real and imaginary parts of every recorded node.
//!
//! ```
//! use fas_autodiff::{CTensor, Tape, C64};
//!
//! let mut tape = Tape::new();
//! let z = tape.leaf(CTensor::scalar(C64::new(3.0, -2.0)));
//! let sq = tape.abs_sq(z).unwrap();
//! let grads = tape.backward(sq).unwrap();
//! assert_eq!(grads.get(z).data()[0], C64::new(6.0, -4.0));
//! ```

pub mod batchnorm;
mod error;
pub mod gradcheck;
pub mod linalg;
pub mod suite;
mod tape;
mod tensor;

pub use batchnorm::{BnMode, BnStats};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, Coord, GradCheckEntry, GradCheckReport, Part};
pub use tape::{sigmoid, BnRunning, Diagnostics, Gradients, Tape, Var, NORM_FLOOR};
pub use tensor::CTensor;

pub type C64 = num_complex::Complex64;
