//! Dense tensors, a reverse-mode autodiff tape, and the Adam/AdamW optimizers used to
//! train the navigation models.

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use error::{Result, TensorError};
pub use graph::{conv_out_size, Graph, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
