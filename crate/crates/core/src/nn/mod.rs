//! Minimal differentiable network primitives with hand-written reverse-mode
//! gradients, and the Adam optimizer.

pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod spatial;
pub mod tensor;

pub use attention::{AttentionCache, MultiHeadAttention, Segments};
pub use block::{BlockCache, BlockKind, TransformerBlock};
pub use checkpoint::{Checkpoint, NamedTensor, CKPT_MAGIC};
pub use layers::{Activation, Init, LayerNorm, Linear, Mlp};
pub use params::{adam_step, AdamConfig, Grads, Param, ParamId, ParamStore};
pub use spatial::{grid_resample, grid_resample_backward, GridShape, PatchEmbed, TokenUpsampler};
pub use tensor::{gemm, matmul, MatRef, Real, Tensor};
