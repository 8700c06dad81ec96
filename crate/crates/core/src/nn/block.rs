//! Pre-norm transformer block:
//! `x ← x + Attn(LN₁(x), ctx)`, then `x ← x + FFN(LN₂(x))`.
//!
//! Self-attention blocks attend over `LN₁(x)` itself; cross-attention blocks
//! take keys and values from an external context sequence.

use rand::Rng;

use crate::nn::attention::{AttentionCache, MultiHeadAttention, Segments};
use crate::nn::layers::{Activation, Init, LayerNorm, LayerNormCache, Mlp, MlpCache};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    SelfAttention,
    CrossAttention,
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub kind: BlockKind,
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    ffn: MlpCache<T>,
}

impl TransformerBlock {
    /// `out_init` applies to the attention output projection; cross-attention
    /// blocks start as the identity when it is [`Init::Zeros`].
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: BlockKind,
        dim: usize,
        heads: usize,
        std: f64,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        TransformerBlock {
            kind,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, std, out_init, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                dim,
                4 * dim,
                dim,
                Activation::Gelu,
                (Init::TruncNormal(std), Init::TruncNormal(std)),
                rng,
            ),
        }
    }

    /// `context` is required for cross-attention and ignored otherwise.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        context: Option<&Tensor<T>>,
    ) -> (Tensor<T>, BlockCache<T>) {
        let (n1, ln1) = self.norm1.forward(store, x);
        let (mut h, attn) = match self.kind {
            BlockKind::SelfAttention => self.attn.forward(store, &n1, &n1, Segments::dense(x.rows(), x.rows())),
            BlockKind::CrossAttention => {
                let ctx = context.expect("cross-attention block needs a context");
                self.attn.forward(store, &n1, ctx, Segments::dense(x.rows(), ctx.rows()))
            }
        };
        h.add_assign(x);
        let (n2, ln2) = self.norm2.forward(store, &h);
        let (mut y, ffn) = self.ffn.forward(store, &n2);
        y.add_assign(&h);
        (y, BlockCache { ln1, attn, ln2, ffn })
    }

    /// Returns `(dx, d context)`; the context gradient is `None` for
    /// self-attention blocks.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Option<Tensor<T>>) {
        let dn2 = self.ffn.backward(store, grads, &cache.ffn, dy);
        let mut dh = self.norm2.backward(store, grads, &cache.ln2, &dn2);
        dh.add_assign(dy);
        let (mut dn1, dkv) = self.attn.backward(store, grads, &cache.attn, &dh);
        let dctx = match self.kind {
            BlockKind::SelfAttention => {
                dn1.add_assign(&dkv);
                None
            }
            BlockKind::CrossAttention => Some(dkv),
        };
        let mut dx = self.norm1.backward(store, grads, &cache.ln1, &dn1);
        dx.add_assign(&dh);
        (dx, dctx)
    }
}
