//! Small trainable feed-forward networks: a closed-op autodiff tape, MLPs, and Adam.

mod adam;
mod graph;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use graph::{lse, Gradients, Graph, Tensor, Var, EXP_CLAMP};
pub use mlp::{hcat, Activation, Bound, Checkpoint, Mlp};
