//! Multi-head scaled dot-product attention.
//!
//! Query and key/value rows may be split into equally sized segments that
//! attend only within themselves; this covers dense self-attention (one
//! segment), cross-attention to a short context and windowed attention.

use rand::Rng;

use crate::nn::layers::{softmax_rows, Init, Linear};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::tensor::{gemm, MatRef, Real, Tensor};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// `count` independent attention problems over consecutive row blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segments {
    pub count: usize,
    pub q_len: usize,
    pub kv_len: usize,
}

impl Segments {
    pub fn dense(q_rows: usize, kv_rows: usize) -> Self {
        Segments { count: 1, q_len: q_rows, kv_len: kv_rows }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    q_in: Tensor<T>,
    kv_in: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Softmax weights, `[count][heads][q_len × kv_len]` flattened.
    probs: Vec<T>,
    ctx: Tensor<T>,
    segments: Segments,
}

impl<T> AttentionCache<T> {
    /// Attention weights of one segment and head, row-major `q_len × kv_len`.
    pub fn weights(&self, segment: usize, head: usize, heads: usize) -> &[T] {
        let sz = self.segments.q_len * self.segments.kv_len;
        let o = (segment * heads + head) * sz;
        &self.probs[o..o + sz]
    }
}

impl MultiHeadAttention {
    /// `kv_dim` is the width of the key/value input rows.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        std: f64,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, Init::TruncNormal(std), rng),
            key: Linear::new(store, &format!("{name}.k"), kv_dim, dim, Init::TruncNormal(std), rng),
            value: Linear::new(store, &format!("{name}.v"), kv_dim, dim, Init::TruncNormal(std), rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, out_init, rng),
            heads,
            dim,
        }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        q_in: &Tensor<T>,
        kv_in: &Tensor<T>,
        segments: Segments,
    ) -> (Tensor<T>, AttentionCache<T>) {
        let d = self.dim;
        let dh = d / self.heads;
        let Segments { count, q_len, kv_len } = segments;
        assert_eq!(q_in.rows(), count * q_len, "query rows vs segments");
        assert_eq!(kv_in.rows(), count * kv_len, "key/value rows vs segments");
        let q = self.query.forward(store, q_in);
        let k = self.key.forward(store, kv_in);
        let v = self.value.forward(store, kv_in);
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let sz = q_len * kv_len;
        let mut probs = vec![T::ZERO; count * self.heads * sz];
        let mut ctx = Tensor::zeros(&[count * q_len, d]);
        for s in 0..count {
            for h in 0..self.heads {
                let qo = s * q_len * d + h * dh;
                let ko = s * kv_len * d + h * dh;
                let p = &mut probs[(s * self.heads + h) * sz..][..sz];
                gemm(
                    scale,
                    MatRef::strided(&q.data()[qo..], q_len, dh, d),
                    MatRef::strided(&k.data()[ko..], kv_len, dh, d).t(),
                    T::ZERO,
                    p,
                    kv_len,
                );
                softmax_rows(p, kv_len);
                gemm(
                    T::ONE,
                    MatRef::new(p, q_len, kv_len),
                    MatRef::strided(&v.data()[ko..], kv_len, dh, d),
                    T::ZERO,
                    &mut ctx.data_mut()[qo..],
                    d,
                );
            }
        }
        let y = self.out.forward(store, &ctx);
        (y, AttentionCache { q_in: q_in.clone(), kv_in: kv_in.clone(), q, k, v, probs, ctx, segments })
    }

    /// Returns `(d q_in, d kv_in)`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &AttentionCache<T>,
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let d = self.dim;
        let dh = d / self.heads;
        let Segments { count, q_len, kv_len } = cache.segments;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let dctx = self.out.backward(store, grads, &cache.ctx, dy);
        let mut dq = Tensor::zeros(cache.q.shape());
        let mut dk = Tensor::zeros(cache.k.shape());
        let mut dv = Tensor::zeros(cache.v.shape());
        let sz = q_len * kv_len;
        let mut ds = vec![T::ZERO; sz];
        for s in 0..count {
            for h in 0..self.heads {
                let qo = s * q_len * d + h * dh;
                let ko = s * kv_len * d + h * dh;
                let p = &cache.probs[(s * self.heads + h) * sz..][..sz];
                let dctx_v = MatRef::strided(&dctx.data()[qo..], q_len, dh, d);
                // dV += Pᵀ dctx
                gemm(T::ONE, MatRef::new(p, q_len, kv_len).t(), dctx_v, T::ONE, &mut dv.data_mut()[ko..], d);
                // dP = dctx Vᵀ
                gemm(
                    T::ONE,
                    dctx_v,
                    MatRef::strided(&cache.v.data()[ko..], kv_len, dh, d).t(),
                    T::ZERO,
                    &mut ds,
                    kv_len,
                );
                for (drow, prow) in ds.chunks_mut(kv_len).zip(p.chunks(kv_len)) {
                    let dot: T = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                    for (a, b) in drow.iter_mut().zip(prow) {
                        *a = *b * (*a - dot);
                    }
                }
                let ds_m = MatRef::new(&ds, q_len, kv_len);
                gemm(
                    scale,
                    ds_m,
                    MatRef::strided(&cache.k.data()[ko..], kv_len, dh, d),
                    T::ZERO,
                    &mut dq.data_mut()[qo..],
                    d,
                );
                gemm(
                    scale,
                    ds_m.t(),
                    MatRef::strided(&cache.q.data()[qo..], q_len, dh, d),
                    T::ONE,
                    &mut dk.data_mut()[ko..],
                    d,
                );
            }
        }
        let dq_in = self.query.backward(store, grads, &cache.q_in, &dq);
        let mut dkv_in = self.key.backward(store, grads, &cache.kv_in, &dk);
        dkv_in.add_assign(&self.value.backward(store, grads, &cache.kv_in, &dv));
        (dq_in, dkv_in)
    }
}
