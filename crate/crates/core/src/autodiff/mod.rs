//! Dense tensors and a tape-based reverse-mode differentiation engine.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_params, relative_error};
pub use graph::{dropout_mask, gelu, sigmoid, Graph, NodeId, Reduction};
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
