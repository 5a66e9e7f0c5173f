pub mod attn;
pub mod autograd;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod gradsuite;
pub mod nn;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
