//! Graded response model item factor analysis fitted by amortized variational
//! and adversarial estimators.

pub mod align;
pub mod diffkernel;
pub mod error;
pub mod estimators;
pub mod grm;
pub mod io;
pub mod linalg;
pub mod nets;
pub mod optim;
pub mod scalar;
pub mod simlab;

pub use diffkernel::{Tape, Tensor2, Var};
pub use error::{Error, Result};
pub use grm::{GrmDocument, LoadingPattern, ResponseMatrix};
pub use scalar::Real;

/// Double-precision tensor.
pub type Tensor = Tensor2<f64>;

/// Double-precision decoder parameters.
pub type GrmParams = grm::GrmParams<f64>;
