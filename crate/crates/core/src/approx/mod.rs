//! Function approximation: dense multilayer perceptrons with exact
//! reverse-mode gradients and the Adam optimizer.

mod adam;
mod mlp;

pub use adam::AdamState;
pub use mlp::{read_mlp, write_mlp, Activation, Backward, ForwardCache, Head, Mlp, MlpSpec};
