//! Differentiable building blocks: tensors, a reverse-mode tape, the
//! residual encoder, projection and prediction heads, and Adam.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod model;
pub mod optim;
pub mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use model::{
    embed_batch, encoder_forward, projection_forward, Bound, EncoderConfig, EncoderOutput,
    EncoderParams, Mode, ParamSet,
};
pub use optim::{adam_step, cosine_lr, AdamState};
pub use tensor::{Scalar, Tensor};
