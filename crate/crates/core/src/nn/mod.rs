//! Minimal reverse-mode autodiff: tensors, the op tape, flat parameter
//! storage, and the layer building blocks used by the extraction network.

pub mod graph;
pub mod layers;
pub mod store;
pub mod tensor;

pub use graph::{conv_out_len, Gradients, Graph, ValId};
pub use layers::{Conv1d, ConvTranspose1d, GlobalNorm, Linear, PRelu};
pub use store::{ParamBuilder, ParamEntry, ParamRef, ParamStore};
pub use tensor::Tensor;
