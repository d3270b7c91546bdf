//! Dense tensors with define-by-run reverse-mode differentiation.

mod array;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;

pub use array::Tensor;
pub use graph::{Gradients, Graph, Var};
pub use params::{manifest_path, xavier_uniform, ParamId, ParamStore};
pub use optim::{cosine_lr, Adam};
