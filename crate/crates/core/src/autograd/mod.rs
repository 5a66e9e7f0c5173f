//! Reverse-mode differentiation over a define-by-run tape.

mod conv;
mod graph;
mod ops;

pub use conv::{col2im, im2col, ConvGeom};
pub use graph::{BackwardCtx, BackwardFn, Graph, Var};
pub use ops::broadcast_shape;
