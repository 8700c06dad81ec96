//! Raw attribute maps to renderable Gaussians.
//!
//! Per kept pixel, with raw channels `r`:
//!
//! ```text
//! position = tanh(r_pos) · radius + I^pos
//! scale    = s_min + (s_max − s_min) · sigmoid(r_scale)
//! rotation = normalize(r_rot + (1, 0, 0, 0))
//! color    = clamp(r_rgb + I, 0, 1)
//! opacity  = sigmoid(r_opacity)
//! ```
//!
//! A pixel is kept iff its confidence is strictly greater than `τ`.

use crate::model::bundle::InputBundle;
use crate::model::config::{ModelConfig, ATTRIBUTE_CHANNELS};
use crate::nn::Real;
use crate::render::{GaussianGradients, GaussianSet};

/// Which pixels spawned Gaussians, in output order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssembleRecord {
    /// Flat pixel index `view · H · W + y · W + x` per Gaussian.
    pub pixels: Vec<u32>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies the attribute activations and skip connections to every pixel
/// with `confidence > τ`. `maps` holds `V × H × W × 14` raw channels.
pub fn assemble_gaussians<T: Real>(
    maps: &[T],
    bundle: &InputBundle,
    config: &ModelConfig,
) -> (GaussianSet, AssembleRecord) {
    let c = ATTRIBUTE_CHANNELS;
    assert_eq!(maps.len(), bundle.confidence.len() * c, "attribute maps vs bundle");
    let n_per_view = bundle.pixels_per_view();
    let tau = config.tau as f32;
    let kept: Vec<u32> =
        (0..bundle.confidence.len()).filter(|&q| bundle.confidence[q] > tau).map(|q| q as u32).collect();
    let mut set = GaussianSet {
        positions: Vec::with_capacity(kept.len()),
        scales: Vec::with_capacity(kept.len()),
        rotations: Vec::with_capacity(kept.len()),
        colors: Vec::with_capacity(kept.len()),
        opacities: Vec::with_capacity(kept.len()),
        source_view: Some(Vec::with_capacity(kept.len())),
    };
    let span = config.scale_max - config.scale_min;
    for &q in &kept {
        let q = q as usize;
        let r: Vec<f64> = maps[q * c..(q + 1) * c].iter().map(|v| v.to_f64()).collect();
        let ipos = &bundle.positions[3 * q..3 * q + 3];
        let img = &bundle.images[3 * q..3 * q + 3];
        set.positions.push(std::array::from_fn(|k| r[k].tanh() * config.position_radius + ipos[k] as f64));
        set.scales.push(std::array::from_fn(|k| config.scale_min + span * sigmoid(r[3 + k])));
        let raw = [r[6] + 1.0, r[7], r[8], r[9]];
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        set.rotations.push(if norm > 1e-12 { raw.map(|v| v / norm) } else { [1.0, 0.0, 0.0, 0.0] });
        set.colors.push(std::array::from_fn(|k| (r[10 + k] + img[k] as f64).clamp(0.0, 1.0)));
        set.opacities.push(sigmoid(r[13]));
        set.source_view.as_mut().unwrap().push((q / n_per_view) as u32);
    }
    (set, AssembleRecord { pixels: kept })
}

/// Pulls Gaussian attribute gradients back onto the raw maps. Pixels that
/// spawned no Gaussian receive zero gradient.
pub fn assemble_backward<T: Real>(
    maps: &[T],
    record: &AssembleRecord,
    bundle: &InputBundle,
    config: &ModelConfig,
    grads: &GaussianGradients,
) -> Vec<T> {
    let c = ATTRIBUTE_CHANNELS;
    assert_eq!(grads.len(), record.pixels.len(), "gradients vs assembled set");
    let mut d = vec![T::ZERO; maps.len()];
    let span = config.scale_max - config.scale_min;
    for (i, &q) in record.pixels.iter().enumerate() {
        let q = q as usize;
        let r: Vec<f64> = maps[q * c..(q + 1) * c].iter().map(|v| v.to_f64()).collect();
        let out = &mut d[q * c..(q + 1) * c];
        for k in 0..3 {
            let t = r[k].tanh();
            out[k] = T::from_f64(grads.positions[i][k] * config.position_radius * (1.0 - t * t));
            let s = sigmoid(r[3 + k]);
            out[3 + k] = T::from_f64(grads.scales[i][k] * span * s * (1.0 - s));
            let col = r[10 + k] + bundle.images[3 * q + k] as f64;
            if (0.0..=1.0).contains(&col) {
                out[10 + k] = T::from_f64(grads.colors[i][k]);
            }
        }
        let raw = [r[6] + 1.0, r[7], r[8], r[9]];
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let u = raw.map(|v| v / norm);
            let g = grads.rotations[i];
            let ug: f64 = (0..4).map(|k| u[k] * g[k]).sum();
            for k in 0..4 {
                out[6 + k] = T::from_f64((g[k] - u[k] * ug) / norm);
            }
        }
        let o = sigmoid(r[13]);
        out[13] = T::from_f64(grads.opacities[i] * o * (1.0 - o));
    }
    d
}
