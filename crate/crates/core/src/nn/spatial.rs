//! Image-grid primitives: patch embedding, bilinear resampling and the
//! windowed-attention token upsampler.
//!
//! Grids are stored view-major as `[V, H, W, C]`. A patch row of
//! [`space_to_depth`] holds the `p × p × C` block in `(dy, dx, c)` order, and
//! patch rows themselves run over `(view, patch_y, patch_x)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::attention::{AttentionCache, MultiHeadAttention, Segments};
use crate::nn::layers::{Init, LayerNorm, LayerNormCache, Linear};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::tensor::{Real, Tensor};

/// Shape of a stack of `views` equally sized image grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.views * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_patch(&self, p: usize) -> Result<()> {
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "grid {}x{} is not divisible into {p}x{p} patches",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Rearranges `[V, H, W, C]` into `[V·(H/p)·(W/p), p·p·C]` patch rows.
pub fn space_to_depth<T: Real>(grid: &[T], shape: GridShape, p: usize) -> Result<Tensor<T>> {
    shape.check_patch(p)?;
    if grid.len() != shape.len() {
        return Err(Error::shape(format!("grid has {} values, shape needs {}", grid.len(), shape.len())));
    }
    let GridShape { views, height, width, channels: c } = shape;
    let (hp, wp) = (height / p, width / p);
    let mut out = Vec::with_capacity(grid.len());
    for v in 0..views {
        for py in 0..hp {
            for px in 0..wp {
                for dy in 0..p {
                    let row = ((v * height + py * p + dy) * width + px * p) * c;
                    out.extend_from_slice(&grid[row..row + p * c]);
                }
            }
        }
    }
    Tensor::from_vec(&[views * hp * wp, p * p * c], out)
}

/// Inverse of [`space_to_depth`]; returns the flat `[V, H, W, C]` grid.
pub fn depth_to_space<T: Real>(rows: &Tensor<T>, shape: GridShape, p: usize) -> Result<Vec<T>> {
    shape.check_patch(p)?;
    let GridShape { views, height, width, channels: c } = shape;
    let (hp, wp) = (height / p, width / p);
    if rows.shape() != [views * hp * wp, p * p * c] {
        return Err(Error::shape(format!("patch rows {:?} do not match grid {shape:?}", rows.shape())));
    }
    let mut out = vec![T::ZERO; shape.len()];
    let src = rows.data();
    for (r, patch) in src.chunks(p * p * c).enumerate() {
        let (v, py, px) = (r / (hp * wp), (r / wp) % hp, r % wp);
        for dy in 0..p {
            let dst = ((v * height + py * p + dy) * width + px * p) * c;
            out[dst..dst + p * c].copy_from_slice(&patch[dy * p * c..(dy + 1) * p * c]);
        }
    }
    Ok(out)
}

/// Strided `p × p` learned projection of every patch to a `dim`-wide token.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct PatchEmbedCache<T> {
    cols: Tensor<T>,
    shape: GridShape,
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        patch: usize,
        channels: usize,
        dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        PatchEmbed { proj: Linear::new(store, name, patch * patch * channels, dim, init, rng), patch, channels }
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grid: &[T],
        shape: GridShape,
    ) -> Result<(Tensor<T>, PatchEmbedCache<T>)> {
        if shape.channels != self.channels {
            return Err(Error::shape(format!(
                "patch embed expects {} channels, got {}",
                self.channels, shape.channels
            )));
        }
        let cols = space_to_depth(grid, shape, self.patch)?;
        Ok((self.proj.forward(store, &cols), PatchEmbedCache { cols, shape }))
    }

    /// Returns the gradient w.r.t. the input grid.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &PatchEmbedCache<T>,
        dy: &Tensor<T>,
    ) -> Vec<T> {
        let dcols = self.proj.backward(store, grads, &cache.cols, dy);
        depth_to_space(&dcols, cache.shape, self.patch).expect("shape checked in forward")
    }
}

/// One bilinear tap: four source offsets (in pixels) and their weights.
#[derive(Clone, Copy, Debug)]
struct Tap {
    idx: [usize; 4],
    w: [f64; 4],
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let u = resample_coordinate(i, src, dst);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

fn taps(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Vec<Tap> {
    let (ty, tx) = (axis_taps(src_h, dst_h), axis_taps(src_w, dst_w));
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            out.push(Tap {
                idx: [y0 * src_w + x0, y0 * src_w + x1, y1 * src_w + x0, y1 * src_w + x1],
                w: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
            });
        }
    }
    out
}

/// Source coordinate sampled by destination index `i` when resizing an axis
/// from `src` to `dst` samples: pixel centers are aligned and the result is
/// clamped to the valid range.
pub fn resample_coordinate(i: usize, src: usize, dst: usize) -> f64 {
    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
}

/// Bilinear resampling of each view of a `[V, H_s, W_s, C]` grid to
/// `[V, dst_h, dst_w, C]`.
pub fn grid_resample<T: Real>(grid: &[T], shape: GridShape, dst_h: usize, dst_w: usize) -> Result<Vec<T>> {
    if grid.len() != shape.len() || shape.height == 0 || shape.width == 0 {
        return Err(Error::shape(format!("grid has {} values, shape {shape:?}", grid.len())));
    }
    let c = shape.channels;
    let taps = taps(shape.height, shape.width, dst_h, dst_w);
    let src_view = shape.height * shape.width * c;
    let mut out = Vec::with_capacity(shape.views * dst_h * dst_w * c);
    for v in 0..shape.views {
        let src = &grid[v * src_view..(v + 1) * src_view];
        for tap in &taps {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += tap.w[k] * src[tap.idx[k] * c + ch].to_f64();
                }
                out.push(T::from_f64(acc));
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`grid_resample`]: scatters `d_out` back onto the source grid.
pub fn grid_resample_backward<T: Real>(d_out: &[T], shape: GridShape, dst_h: usize, dst_w: usize) -> Vec<T> {
    let c = shape.channels;
    let taps = taps(shape.height, shape.width, dst_h, dst_w);
    let src_view = shape.height * shape.width * c;
    let mut d_src = vec![T::ZERO; shape.len()];
    for v in 0..shape.views {
        let dst = &d_out[v * dst_h * dst_w * c..(v + 1) * dst_h * dst_w * c];
        let src = &mut d_src[v * src_view..(v + 1) * src_view];
        for (tap, g) in taps.iter().zip(dst.chunks(c)) {
            for (ch, &gc) in g.iter().enumerate() {
                for k in 0..4 {
                    src[tap.idx[k] * c + ch] += T::from_f64(tap.w[k]) * gc;
                }
            }
        }
    }
    d_src
}

/// Largest window side `≤ max` that tiles both grid sides.
fn window_side(hp: usize, wp: usize, max: usize) -> usize {
    (1..=max.min(hp).min(wp)).rev().find(|s| hp.is_multiple_of(*s) && wp.is_multiple_of(*s)).unwrap_or(1)
}

/// Row permutation from grid order `(view, y, x)` to window-contiguous order.
fn window_order(views: usize, hp: usize, wp: usize, s: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(views * hp * wp);
    for v in 0..views {
        for wy in 0..hp / s {
            for wx in 0..wp / s {
                for dy in 0..s {
                    for dx in 0..s {
                        order.push((v * hp + wy * s + dy) * wp + wx * s + dx);
                    }
                }
            }
        }
    }
    order
}

fn gather_rows<T: Real>(x: &Tensor<T>, order: &[usize]) -> Tensor<T> {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    for &r in order {
        out.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

fn scatter_rows<T: Real>(x: &Tensor<T>, order: &[usize]) -> Tensor<T> {
    let c = x.cols();
    let mut out = vec![T::ZERO; x.len()];
    for (i, &r) in order.iter().enumerate() {
        out[r * c..(r + 1) * c].copy_from_slice(&x.data()[i * c..(i + 1) * c]);
    }
    Tensor::from_vec(x.shape(), out).unwrap()
}

/// Token-to-pixel upsampler: a pre-norm windowed self-attention refinement
/// over each view's token grid, then a per-token projection to `p·p·C_out`
/// channels rearranged depth-to-space.
#[derive(Clone, Debug)]
pub struct TokenUpsampler {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub head: Linear,
    pub patch: usize,
    pub out_channels: usize,
    pub window: usize,
}

#[derive(Clone, Debug)]
pub struct TokenUpsamplerCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    refined_norm: Tensor<T>,
    order: Vec<usize>,
    shape: GridShape,
}

impl TokenUpsampler {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        patch: usize,
        out_channels: usize,
        std: f64,
        head_init: Init,
        rng: &mut R,
    ) -> Self {
        TokenUpsampler {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                dim,
                dim,
                heads,
                std,
                Init::TruncNormal(std),
                rng,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            head: Linear::new(store, &format!("{name}.head"), dim, patch * patch * out_channels, head_init, rng),
            patch,
            out_channels,
            window: 4,
        }
    }

    /// `tokens: [V·H_p·W_p, D]` → flat `[V, H_p·p, W_p·p, C_out]` maps.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tokens: &Tensor<T>,
        views: usize,
        hp: usize,
        wp: usize,
    ) -> Result<(Vec<T>, TokenUpsamplerCache<T>)> {
        if tokens.rows() != views * hp * wp {
            return Err(Error::shape(format!("{} tokens for a {views}x{hp}x{wp} grid", tokens.rows())));
        }
        let s = window_side(hp, wp, self.window);
        let order = window_order(views, hp, wp, s);
        let x = gather_rows(tokens, &order);
        let (n1, ln1) = self.norm1.forward(store, &x);
        let seg = Segments { count: x.rows() / (s * s), q_len: s * s, kv_len: s * s };
        let (mut refined, attn) = self.attn.forward(store, &n1, &n1, seg);
        refined.add_assign(&x);
        let (n2, ln2) = self.norm2.forward(store, &refined);
        let refined_norm = scatter_rows(&n2, &order);
        let rows = self.head.forward(store, &refined_norm);
        let shape = GridShape { views, height: hp * self.patch, width: wp * self.patch, channels: self.out_channels };
        let maps = depth_to_space(&rows, shape, self.patch)?;
        Ok((maps, TokenUpsamplerCache { ln1, attn, ln2, refined_norm, order, shape }))
    }

    /// Returns the gradient w.r.t. the input tokens.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        grads: &mut Grads<T>,
        cache: &TokenUpsamplerCache<T>,
        d_maps: &[T],
    ) -> Tensor<T> {
        let drows = space_to_depth(d_maps, cache.shape, self.patch).expect("shape checked in forward");
        let dn2 = self.head.backward(store, grads, &cache.refined_norm, &drows);
        let dn2 = gather_rows(&dn2, &cache.order);
        let mut dx = self.norm2.backward(store, grads, &cache.ln2, &dn2);
        let (dq, dkv) = self.attn.backward(store, grads, &cache.attn, &dx);
        let mut dn1 = dq;
        dn1.add_assign(&dkv);
        dx.add_assign(&self.norm1.backward(store, grads, &cache.ln1, &dn1));
        scatter_rows(&dx, &cache.order)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_grad, check_param_grads, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn space_to_depth_round_trip_and_layout() {
        let shape = GridShape { views: 2, height: 4, width: 6, channels: 3 };
        let grid: Vec<f64> = (0..shape.len()).map(|i| i as f64).collect();
        let rows = space_to_depth(&grid, shape, 2).unwrap();
        assert_eq!(rows.shape(), &[2 * 2 * 3, 12]);
        // second patch of view 0 starts at pixel (0, 2)
        assert_eq!(rows.data()[12], grid[2 * 3]);
        // (dy=1, dx=0, c=0) of the first patch is pixel (1, 0)
        assert_eq!(rows.data()[6], grid[6 * 3]);
        assert_eq!(depth_to_space(&rows, shape, 2).unwrap(), grid);
    }

    #[test]
    fn non_divisible_grid_is_rejected() {
        let shape = GridShape { views: 1, height: 10, width: 8, channels: 1 };
        assert!(matches!(space_to_depth(&vec![0.0f32; 80], shape, 4), Err(Error::Config(_))));
    }

    #[test]
    fn resample_preserves_constants() {
        let shape = GridShape { views: 2, height: 32, width: 32, channels: 3 };
        let grid = vec![0.375f64; shape.len()];
        let out = grid_resample(&grid, shape, 16, 16).unwrap();
        assert_eq!(out.len(), 2 * 16 * 16 * 3);
        assert!(out.iter().all(|&v| (v - 0.375).abs() < 1e-15));
    }

    #[test]
    fn resample_matches_direct_bilinear_evaluation() {
        // 32 → 16 samples source coordinate 2i + 0.5 on each axis
        for i in [0, 1, 7, 15] {
            assert_eq!(resample_coordinate(i, 32, 16), 2.0 * i as f64 + 0.5);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = GridShape { views: 1, height: 32, width: 32, channels: 2 };
        let grid: Vec<f64> = random_tensor::<f64, _>(&[shape.len()], &mut rng).into_data();
        let out = grid_resample(&grid, shape, 16, 16).unwrap();
        let at = |y: usize, x: usize, c: usize| grid[(y * 32 + x) * 2 + c];
        for (oy, ox) in [(0, 0), (3, 11), (15, 15)] {
            for c in 0..2 {
                let (y, x) = (2 * oy, 2 * ox);
                let expect = 0.25 * (at(y, x, c) + at(y, x + 1, c) + at(y + 1, x, c) + at(y + 1, x + 1, c));
                assert!((out[(oy * 16 + ox) * 2 + c] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn resample_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w, dh, dw) in [(32, 32, 16, 16), (5, 7, 9, 4), (8, 8, 8, 8), (3, 4, 1, 1)] {
            let shape = GridShape { views: 2, height: h, width: w, channels: 3 };
            let x = random_tensor::<f64, _>(&[shape.len()], &mut rng).into_data();
            let g = random_tensor::<f64, _>(&[2 * dh * dw * 3], &mut rng).into_data();
            let lhs = dot(&grid_resample(&x, shape, dh, dw).unwrap(), &g);
            let rhs = dot(&x, &grid_resample_backward(&g, shape, dh, dw));
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn patch_embed_gradients() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let p = 1 + seed as usize % 3;
            let shape = GridShape { views: 1 + seed as usize % 2, height: 2 * p, width: p, channels: 2 };
            let mut store = ParamStore::<f64>::new();
            let pe = PatchEmbed::new(&mut store, "pe", p, 2, 3, Init::TruncNormal(0.5), &mut rng);
            let x = random_tensor::<f64, _>(&[shape.len()], &mut rng);
            let rows = shape.views * 2;
            let w = random_tensor::<f64, _>(&[rows, 3], &mut rng);
            let loss =
                |s: &ParamStore<f64>, x: &Tensor<f64>| dot(pe.forward(s, x.data(), shape).unwrap().0.data(), w.data());
            let back = |s: &ParamStore<f64>, x: &Tensor<f64>| {
                let mut g = s.zero_grads();
                let (_, c) = pe.forward(s, x.data(), shape).unwrap();
                let dx = pe.backward(s, &mut g, &c, &w);
                (g, Tensor::from_vec(x.shape(), dx).unwrap())
            };
            check_param_grads(&store, &x, loss, back, 1e-4).unwrap();
            check_input_grad(&store, &x, loss, back, 1e-4).unwrap();
        }
    }

    #[test]
    fn grid_resample_input_gradient() {
        let store = ParamStore::<f64>::new();
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let (h, w) = (2 + seed as usize % 4, 3 + seed as usize % 3);
            let (dh, dw) = (1 + seed as usize % 5, 2 + seed as usize % 2);
            let shape = GridShape { views: 2, height: h, width: w, channels: 2 };
            let x = random_tensor::<f64, _>(&[shape.len()], &mut rng);
            let g = random_tensor::<f64, _>(&[2 * dh * dw * 2], &mut rng);
            let loss =
                |_: &ParamStore<f64>, x: &Tensor<f64>| dot(&grid_resample(x.data(), shape, dh, dw).unwrap(), g.data());
            let back = |s: &ParamStore<f64>, x: &Tensor<f64>| {
                (s.zero_grads(), Tensor::from_vec(x.shape(), grid_resample_backward(g.data(), shape, dh, dw)).unwrap())
            };
            check_input_grad(&store, &x, loss, back, 1e-4).unwrap();
        }
    }

    #[test]
    fn upsampler_restores_resolution_and_starts_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let up = TokenUpsampler::new(&mut store, "up", 8, 2, 4, 14, 0.02, Init::Zeros, &mut rng);
        let tokens = random_tensor::<f32, _>(&[2 * 4 * 4, 8], &mut rng);
        let (maps, _) = up.forward(&store, &tokens, 2, 4, 4).unwrap();
        assert_eq!(maps.len(), 2 * 16 * 16 * 14);
        assert!(maps.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsampler_gradients() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let (hp, wp) = [(2, 2), (4, 4), (2, 4), (8, 4), (3, 3)][seed as usize % 5];
            let views = 1 + seed as usize % 2;
            let p = 1 + seed as usize % 2;
            let mut store = ParamStore::<f64>::new();
            let up = TokenUpsampler::new(&mut store, "up", 4, 2, p, 3, 0.5, Init::TruncNormal(0.5), &mut rng);
            let x = random_tensor::<f64, _>(&[views * hp * wp, 4], &mut rng);
            let w = random_tensor::<f64, _>(&[views * hp * wp * p * p * 3], &mut rng);
            let loss =
                |s: &ParamStore<f64>, x: &Tensor<f64>| dot(&up.forward(s, x, views, hp, wp).unwrap().0, w.data());
            let back = |s: &ParamStore<f64>, x: &Tensor<f64>| {
                let mut g = s.zero_grads();
                let (_, c) = up.forward(s, x, views, hp, wp).unwrap();
                let dx = up.backward(s, &mut g, &c, w.data());
                (g, dx)
            };
            check_param_grads(&store, &x, loss, back, 1e-4).unwrap();
            check_input_grad(&store, &x, loss, back, 1e-4).unwrap();
        }
    }
}
