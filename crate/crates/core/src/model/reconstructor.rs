//! Feed-forward reconstruction network.
//!
//! ```text
//! [I, I^pos, Plücker] ──patch embed──▶ h₀ ─┐
//! I^feat ──bilinear to H_p × W_p────────────┴─concat─▶ linear ─▶ h
//! h ─▶ (dense self-attention block ▶ cross-attention block to f_exp) × depth
//!   ─▶ windowed upsampler ─▶ raw attribute maps (V × H × W × 14)
//! z_exp ─▶ MLP ─▶ f_exp (S × D)
//! ```
//!
//! Self-attention runs over the union of all views' tokens, with no view
//! embedding, so the network is equivariant to permutations of the views.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::assemble::{assemble_gaussians, AssembleRecord};
use crate::model::bundle::InputBundle;
use crate::model::config::{ModelConfig, ATTRIBUTE_CHANNELS, INPUT_CHANNELS};
use crate::nn::block::{BlockCache, BlockKind, TransformerBlock};
use crate::nn::layers::{Activation, Init, Linear, Mlp, MlpCache};
use crate::nn::params::{Grads, ParamStore};
use crate::nn::spatial::{grid_resample, GridShape, PatchEmbed, PatchEmbedCache, TokenUpsampler, TokenUpsamplerCache};
use crate::nn::tensor::{Real, Tensor};
use crate::render::GaussianSet;

#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub fuse: Linear,
    pub expression: Mlp,
    /// Alternating self/cross blocks in execution order.
    pub blocks: Vec<TransformerBlock>,
    pub upsampler: TokenUpsampler,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    embed: PatchEmbedCache<T>,
    fuse_in: Tensor<T>,
    expression: MlpCache<T>,
    blocks: Vec<BlockCache<T>>,
    upsampler: TokenUpsamplerCache<T>,
}

impl Reconstructor {
    /// Builds the network and its freshly initialized parameters. The same
    /// `(config, seed)` gives the same values in every precision.
    pub fn new<T: Real>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, std) = (config.dim, config.init_std);
        let w = Init::TruncNormal(std);
        let embed = PatchEmbed::new(&mut store, "embed", config.patch, INPUT_CHANNELS, d, w, &mut rng);
        let fuse = Linear::new(&mut store, "fuse", d + config.feature_channels, d, w, &mut rng);
        // fan-in scaled so the expression tokens have unit-order magnitude
        let expression = Mlp::new(
            &mut store,
            "expr",
            config.expr_dim,
            config.expr_hidden,
            config.expr_tokens * d,
            Activation::Relu,
            (
                Init::TruncNormal(1.0 / (config.expr_dim as f64).sqrt()),
                Init::TruncNormal(1.0 / (config.expr_hidden as f64).sqrt()),
            ),
            &mut rng,
        );
        let mut blocks = Vec::new();
        for i in 0..config.self_depth.max(config.cross_depth) {
            if i < config.self_depth {
                let name = format!("self{i}");
                blocks.push(TransformerBlock::new(
                    &mut store,
                    &name,
                    BlockKind::SelfAttention,
                    d,
                    config.heads,
                    std,
                    w,
                    &mut rng,
                ));
            }
            if i < config.cross_depth {
                let name = format!("cross{i}");
                let kind = BlockKind::CrossAttention;
                blocks.push(TransformerBlock::new(
                    &mut store,
                    &name,
                    kind,
                    d,
                    config.heads,
                    std,
                    Init::Zeros,
                    &mut rng,
                ));
            }
        }
        let mut upsampler = TokenUpsampler::new(
            &mut store,
            "up",
            d,
            config.heads,
            config.patch,
            ATTRIBUTE_CHANNELS,
            std,
            Init::Zeros,
            &mut rng,
        );
        upsampler.window = config.upsample_window;
        // the head bias is replicated for every sub-pixel of a patch
        let bias = store.get_mut(upsampler.head.bias).data_mut();
        for px in bias.chunks_mut(ATTRIBUTE_CHANNELS) {
            for k in 3..6 {
                px[k] = T::from_f64(config.head_scale_bias);
            }
            px[13] = T::from_f64(config.head_opacity_bias);
        }
        let model = Reconstructor { config: config.clone(), embed, fuse, expression, blocks, upsampler };
        Ok((model, store))
    }

    fn check_inputs(&self, bundle: &InputBundle, z: &[f32]) -> Result<()> {
        let c = &self.config;
        bundle.validate()?;
        if bundle.size != c.image_size {
            return Err(Error::shape(format!("bundle size {} vs model image_size {}", bundle.size, c.image_size)));
        }
        if bundle.feature_channels != c.feature_channels || bundle.feature_size != c.feature_size {
            return Err(Error::shape(format!(
                "feature maps {}x{}x{} vs model {}x{}x{}",
                bundle.feature_size,
                bundle.feature_size,
                bundle.feature_channels,
                c.feature_size,
                c.feature_size,
                c.feature_channels
            )));
        }
        if z.len() != c.expr_dim {
            return Err(Error::shape(format!("expression code has {} entries, model expects {}", z.len(), c.expr_dim)));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite expression code".into()));
        }
        Ok(())
    }

    /// Raw `V × H × W × 14` attribute maps.
    pub fn predict_maps<T: Real>(
        &self,
        store: &ParamStore<T>,
        bundle: &InputBundle,
        z: &[f32],
    ) -> Result<(Vec<T>, Tape<T>)> {
        self.check_inputs(bundle, z)?;
        let c = &self.config;
        let v = bundle.views();
        let hp = c.patches_per_side();
        let d = c.dim;
        let shape = GridShape { views: v, height: c.image_size, width: c.image_size, channels: INPUT_CHANNELS };
        let (tokens, embed) = self.embed.forward(store, &bundle.input_grid::<T>(), shape)?;

        let feat: Vec<T> = bundle.features.iter().map(|&x| T::from_f64(x as f64)).collect();
        let fshape =
            GridShape { views: v, height: c.feature_size, width: c.feature_size, channels: c.feature_channels };
        let feat = grid_resample(&feat, fshape, hp, hp)?;
        let cf = c.feature_channels;
        let mut fuse_in = Vec::with_capacity(tokens.rows() * (d + cf));
        for (t, f) in tokens.data().chunks(d).zip(feat.chunks(cf)) {
            fuse_in.extend_from_slice(t);
            fuse_in.extend_from_slice(f);
        }
        let fuse_in = Tensor::from_vec(&[tokens.rows(), d + cf], fuse_in)?;
        let mut h = self.fuse.forward(store, &fuse_in);

        let zt = Tensor::from_vec(&[1, c.expr_dim], z.iter().map(|&x| T::from_f64(x as f64)).collect())?;
        let (f_exp, expression) = self.expression.forward(store, &zt);
        let f_exp = f_exp.reshape(&[c.expr_tokens, d])?;

        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(store, &h, Some(&f_exp));
            h = next;
            caches.push(cache);
        }
        let (maps, upsampler) = self.upsampler.forward(store, &h, v, hp, hp)?;
        Ok((maps, Tape { embed, fuse_in, expression, blocks: caches, upsampler }))
    }

    /// Accumulates parameter gradients of `Σ d_maps ⊙ maps`.
    pub fn backward<T: Real>(&self, store: &ParamStore<T>, grads: &mut Grads<T>, tape: &Tape<T>, d_maps: &[T]) {
        let c = &self.config;
        let d = c.dim;
        let mut dh = self.upsampler.backward(store, grads, &tape.upsampler, d_maps);
        let mut df_exp = Tensor::<T>::zeros(&[c.expr_tokens, d]);
        for (block, cache) in self.blocks.iter().zip(&tape.blocks).rev() {
            let (dx, dctx) = block.backward(store, grads, cache, &dh);
            if let Some(dctx) = dctx {
                df_exp.add_assign(&dctx);
            }
            dh = dx;
        }
        let df_exp = df_exp.reshape(&[1, c.expr_tokens * d]).expect("expression token shape");
        self.expression.backward(store, grads, &tape.expression, &df_exp);
        let dfuse = self.fuse.backward(store, grads, &tape.fuse_in, &dh);
        let mut dtokens = Vec::with_capacity(dh.len());
        for row in dfuse.data().chunks(d + c.feature_channels) {
            dtokens.extend_from_slice(&row[..d]);
        }
        let dtokens = Tensor::from_vec(dh.shape(), dtokens).expect("token gradient shape");
        // input maps carry no parameters; their gradient is discarded
        self.embed.backward(store, grads, &tape.embed, &dtokens);
    }

    /// Inference: predicted Gaussians for `bundle` driven by expression `z`.
    pub fn reconstruct<T: Real>(
        &self,
        store: &ParamStore<T>,
        bundle: &InputBundle,
        z: &[f32],
    ) -> Result<(GaussianSet, AssembleRecord)> {
        let (maps, _) = self.predict_maps(store, bundle, z)?;
        Ok(assemble_gaussians(&maps, bundle, &self.config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Camera;
    use crate::image::Image;
    use crate::model::assemble::assemble_backward;
    use crate::nn::gradcheck::{central_differences, relative_error};
    use crate::render::{rasterize_backward_with, rasterize_with, RasterSettings};
    use nalgebra::Vector3;
    use rand::Rng;

    fn bundle(rng: &mut impl Rng, c: &ModelConfig, views: usize) -> InputBundle {
        let s = c.image_size;
        let n = views * s * s;
        let cameras = (0..views)
            .map(|v| {
                let a = -0.6 + 0.4 * v as f64;
                let eye = Vector3::new(2.5 * a.sin(), 0.2, -2.5 * a.cos());
                Camera::look_at(eye, Vector3::zeros(), -Vector3::y(), 1.2 * s as f64, s, s)
            })
            .collect();
        InputBundle {
            size: s,
            images: (0..3 * n).map(|_| rng.random_range(0.1f32..0.9)).collect(),
            positions: (0..3 * n).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
            confidence: (0..n).map(|_| if rng.random::<f64>() < 0.6 { 0.95 } else { 0.05 }).collect(),
            features: (0..views * c.feature_size * c.feature_size * c.feature_channels)
                .map(|_| rng.random::<f32>())
                .collect(),
            feature_size: c.feature_size,
            feature_channels: c.feature_channels,
            cameras,
        }
    }

    fn code(rng: &mut impl Rng, c: &ModelConfig) -> Vec<f32> {
        (0..c.expr_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn desk_token_grid_and_output_shape() {
        let c = ModelConfig::desk();
        assert_eq!(c.patches_per_side(), 16);
        assert_eq!(c.views * 16 * 16, 1024);
        assert_eq!(ATTRIBUTE_CHANNELS, 3 + 3 + 4 + 3 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig { dim: 32, heads: 1, self_depth: 1, cross_depth: 1, ..c };
        let (m, store) = Reconstructor::new::<f32>(&cfg, 1).unwrap();
        let b = bundle(&mut rng, &cfg, 4);
        let (maps, _) = m.predict_maps(&store, &b, &code(&mut rng, &cfg)).unwrap();
        assert_eq!(maps.len(), 4 * 128 * 128 * 14);
    }

    #[test]
    fn zero_head_gives_skip_identity_and_exact_count() {
        let c = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, store) = Reconstructor::new::<f32>(&c, 2).unwrap();
        let b = bundle(&mut rng, &c, 2);
        let (set, rec) = m.reconstruct(&store, &b, &code(&mut rng, &c)).unwrap();
        assert_eq!(set.len(), b.confidence.iter().filter(|&&x| x > 0.5).count());
        for (i, &q) in rec.pixels.iter().enumerate() {
            let q = q as usize;
            for k in 0..3 {
                assert_eq!(set.positions[i][k], b.positions[3 * q + k] as f64);
                assert_eq!(set.colors[i][k], b.images[3 * q + k] as f64);
            }
        }
    }

    #[test]
    fn expression_has_no_effect_at_init_but_does_after_perturbation() {
        let c = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, mut store) = Reconstructor::new::<f32>(&c, 4).unwrap();
        let b = bundle(&mut rng, &c, 2);
        let (z1, z2) = (code(&mut rng, &c), code(&mut rng, &c));
        let (a, _) = m.predict_maps(&store, &b, &z1).unwrap();
        let (bb, _) = m.predict_maps(&store, &b, &z2).unwrap();
        assert_eq!(a, bb);
        for p in store.params_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.05f32..0.05);
            }
        }
        let (a, _) = m.predict_maps(&store, &b, &z1).unwrap();
        let (bb, _) = m.predict_maps(&store, &b, &z2).unwrap();
        let diff = a.iter().zip(&bb).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn view_permutation_permutes_the_gaussians() {
        let c = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, mut store) = Reconstructor::new::<f64>(&c, 6).unwrap();
        for p in store.params_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        let b = bundle(&mut rng, &c, 3);
        let z = code(&mut rng, &c);
        let (s0, _) = m.reconstruct(&store, &b, &z).unwrap();
        let perm = [2, 0, 1];
        let (s1, _) = m.reconstruct(&store, &b.select(&perm), &z).unwrap();
        assert_eq!(s0.len(), s1.len());
        // match Gaussians by (source view, rank within view)
        let group = |s: &GaussianSet, view: u32| -> Vec<usize> {
            (0..s.len()).filter(|&i| s.source_view.as_ref().unwrap()[i] == view).collect()
        };
        for (new_view, &old_view) in perm.iter().enumerate() {
            let (g0, g1) = (group(&s0, old_view as u32), group(&s1, new_view as u32));
            assert_eq!(g0.len(), g1.len());
            for (&i, &j) in g0.iter().zip(&g1) {
                for k in 0..3 {
                    assert!((s0.positions[i][k] - s1.positions[j][k]).abs() < 1e-9);
                    assert!((s0.scales[i][k] - s1.scales[j][k]).abs() < 1e-9);
                    assert!((s0.colors[i][k] - s1.colors[j][k]).abs() < 1e-9);
                }
                assert!((s0.opacities[i] - s1.opacities[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn accepts_three_to_six_views() {
        let c = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, store) = Reconstructor::new::<f32>(&c, 8).unwrap();
        for v in 3..=6 {
            let b = bundle(&mut rng, &c, v);
            let (set, _) = m.reconstruct(&store, &b, &code(&mut rng, &c)).unwrap();
            assert!(set.len() <= v * 16 * 16);
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let c = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, store) = Reconstructor::new::<f32>(&c, 10).unwrap();
        let b = bundle(&mut rng, &c, 2);
        assert!(m.predict_maps(&store, &b, &[0.0; 3]).is_err());
        let mut bad = b.clone();
        bad.feature_channels = 11;
        assert!(m.predict_maps(&store, &bad, &code(&mut rng, &c)).is_err());
    }

    // negligible cutoffs: finite differences must not straddle truncation jumps
    const SMOOTH: RasterSettings = RasterSettings { tile_size: 16, alpha_min: 1e-12, transmittance_min: 0.0 };

    /// Mean rendered intensity of the reconstruction seen from `camera`.
    fn render_mean(m: &Reconstructor, store: &ParamStore<f64>, b: &InputBundle, z: &[f32], camera: &Camera) -> f64 {
        let (set, _) = m.reconstruct(store, b, z).unwrap();
        let out = rasterize_with(&set, camera, [0.0; 3], &SMOOTH).unwrap();
        out.image.data.iter().sum::<f64>() / out.image.data.len() as f64
    }

    #[test]
    fn network_parameter_gradient() {
        use crate::nn::gradcheck::check_param_grads;
        let c = ModelConfig { dim: 4, heads: 2, expr_hidden: 4, expr_dim: 2, ..ModelConfig::tiny() };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (m, mut store) = Reconstructor::new::<f64>(&c, 14).unwrap();
        for p in store.params_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let b = bundle(&mut rng, &c, 2);
        let z = code(&mut rng, &c);
        let w: Vec<f64> = (0..2 * 16 * 16 * ATTRIBUTE_CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dummy = Tensor::<f64>::zeros(&[1]);
        let loss = |s: &ParamStore<f64>, _: &Tensor<f64>| {
            let (maps, _) = m.predict_maps(s, &b, &z).unwrap();
            maps.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let back = |s: &ParamStore<f64>, x: &Tensor<f64>| {
            let mut g = s.zero_grads();
            let (_, tape) = m.predict_maps(s, &b, &z).unwrap();
            m.backward(s, &mut g, &tape, &w);
            (g, x.clone())
        };
        check_param_grads(&store, &dummy, loss, back, 1e-4).unwrap();
    }

    #[test]
    fn end_to_end_parameter_gradient() {
        let c = ModelConfig { position_radius: 0.02, ..ModelConfig::tiny() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, mut store) = Reconstructor::new::<f64>(&c, 12).unwrap();
        // move the zero-initialized heads off zero so every path carries gradient
        for p in store.params_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let mut b = bundle(&mut rng, &c, 2);
        let camera = b.cameras[0].resized(24, 24);
        // a dozen Gaussians whose depths are 0.1 apart: offsets of at most
        // 0.02 can never swap their compositing order under a perturbation
        b.confidence.fill(0.05);
        let kept = rand::seq::index::sample(&mut rng, b.confidence.len(), 12).into_vec();
        let mut ranks: Vec<usize> = (0..12).collect();
        rand::seq::SliceRandom::shuffle(&mut ranks[..], &mut rng);
        for (&q, &rank) in kept.iter().zip(&ranks) {
            b.confidence[q] = 0.95;
            let (u, v) = (rng.random_range(6.0..18.0), rng.random_range(6.0..18.0));
            let p = camera.unproject(u, v, 2.0 + 0.1 * rank as f64);
            for k in 0..3 {
                b.positions[3 * q + k] = p[k] as f32;
            }
        }
        let z = code(&mut rng, &c);

        let (maps, tape) = m.predict_maps(&store, &b, &z).unwrap();
        let (set, rec) = assemble_gaussians(&maps, &b, &c);
        let fwd = rasterize_with(&set, &camera, [0.0; 3], &SMOOTH).unwrap();
        let npx = fwd.image.data.len() as f64;
        let d_image = Image::filled(24, 24, [1.0 / npx; 3]);
        let gg = rasterize_backward_with(&set, &camera, [0.0; 3], &fwd, &d_image, &SMOOTH).unwrap();
        let dmaps = assemble_backward(&maps, &rec, &b, &c, &gg);
        let mut grads = store.zero_grads();
        m.backward(&store, &mut grads, &tape, &dmaps);

        let mut worst: f64 = 0.0;
        for pi in 0..store.len() {
            let len = store.params()[pi].value.len();
            let idx: Vec<usize> = (0..4).map(|_| rng.random_range(0..len)).collect();
            let mut s = store.clone();
            let mut vals = s.params()[pi].value.data().to_vec();
            let numeric = central_differences(&mut vals, &idx, 1e-4, |v| {
                s.params_mut()[pi].value.data_mut().copy_from_slice(v);
                render_mean(&m, &s, &b, &z, &camera)
            });
            let analytic: Vec<f64> = idx.iter().map(|&i| grads.data[pi][i]).collect();
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-3, "{}: {err:.3e} analytic {analytic:?} numeric {numeric:?}", store.params()[pi].name);
            worst = worst.max(err);
        }
        assert!(worst < 1e-3);
    }
}
