//! Minimal reverse-mode autodiff, the layer vocabulary the models use, Adam,
//! early stopping, gradient checking and the checkpoint container.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod param;
mod tensor;

#[cfg(test)]
mod tests;

pub use checkpoint::{checkpoint_hash, load_store, save_store, Checkpoint, FORMAT_VERSION, MAGIC};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use layers::{Conv1d, Dense, Embedding, LayerNorm, MultiHeadSelfAttention, TransformerBlock};
pub use optim::{Adam, EarlyStop};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
