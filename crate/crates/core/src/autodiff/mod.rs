//! Dense tensors, a reverse-mode computation graph, and SGD.

mod graph;
pub mod kernels;
pub mod prob;
mod sgd;
mod tensor;

pub use graph::{row_softmax, Graph, NodeId};
pub use kernels::{set_threads, threads};
pub use sgd::{sgd_step, MomentumBuffers, SgdConfig};
pub use tensor::{ParamStore, Tensor};
