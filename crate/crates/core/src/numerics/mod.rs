//! Tensors, reverse-mode differentiation, layers, the optimizer and the
//! tensor checkpoint format.

pub mod checkpoint;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use nn::{Init, Linear, Mlp};
pub use optim::{Adagrad, LrSchedule};
pub use params::{ParamId, ParamStore};
pub use tensor::{cosine, l2_normalize, matmul, sigmoid, softmax_rows, Tensor};
