//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Exactly the primitives the region encoder needs, each with a registered
//! backward, plus Adam and the weighted cross-entropy loss. Values are f64
//! throughout; reductions accumulate in f64 so finite-difference checks stay
//! meaningful.

mod adam;
pub mod gradcheck;
mod graph;
mod loss;
mod tensor;

pub use adam::{adam_step, AdamParams, AdamState};
pub use graph::{AutodiffError, Graph, NodeId};
pub use loss::ClassWeights;
pub use tensor::Tensor;
