//! Dense-network substrate: affine layers, SiLU, inverted dropout,
//! reverse-mode gradients and AdamW.

mod adamw;
mod dropout;
mod matrix;
mod mlp;

pub use adamw::{AdamW, AdamWConfig};
pub use dropout::{draw_batch_masks, draw_dropout_masks, DropoutMask};
pub use matrix::Matrix;
pub use mlp::{silu, silu_grad, LayerParams, Mlp, MlpGrads, Trace, PARAMS_FORMAT_VERSION};
