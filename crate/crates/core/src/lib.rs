pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod models;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use autodiff::{Activation, Padding, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
