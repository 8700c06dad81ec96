//! Ground-truth renders and the auxiliary per-view input maps.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::Image;
use crate::render::{rasterize, GaussianSet};
use crate::synth::head::PosedHead;

/// Synthetic feature channels: normal 3, canonical position 3, normalized
/// depth, curvature, foreground, and three zero channels.
pub const FEATURE_CHANNELS: usize = 12;

pub const BACKGROUND: [f64; 3] = [0.0; 3];

/// Depth normalization of the feature depth channel.
const DEPTH_NEAR: f64 = 1.5;
const DEPTH_RANGE: f64 = 2.0;

pub fn render_ground_truth(head: &PosedHead, camera: &Camera) -> Result<Image> {
    Ok(rasterize(&head.gaussians, camera, BACKGROUND)?.image)
}

/// Position and confidence maps of one view: the expected surface depth is
/// back-projected through each pixel center, perturbed by isotropic
/// `N(0, σ²)` noise, and the accumulated opacity is the confidence.
/// Pixels where nothing was drawn get the origin and zero confidence.
pub fn position_and_confidence<R: Rng + ?Sized>(
    head: &PosedHead,
    camera: &Camera,
    sigma: f64,
    rng: &mut R,
) -> Result<(Image, Vec<f64>)> {
    let out = rasterize(&head.gaussians, camera, BACKGROUND)?;
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let (w, h) = (camera.width, camera.height);
    let mut pos = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if let Some(z) = out.expected_depth(i) {
                let p = camera.unproject(x as f64 + 0.5, y as f64 + 0.5, z);
                for k in 0..3 {
                    let n = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                    pos.data[3 * i + k] = p[k] + n;
                }
            }
        }
    }
    let conf = out.alpha.iter().map(|a| a.clamp(0.0, 1.0)).collect();
    Ok((pos, conf))
}

fn attribute_pass(set: &GaussianSet, colors: Vec<[f64; 3]>, camera: &Camera) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = GaussianSet { colors, ..set.clone() };
    let out = rasterize(&s, camera, BACKGROUND)?;
    Ok((out.image.data, out.alpha))
}

/// Feature map of one view, `size × size × 12`. Attributes are splatted
/// like colors at `camera`'s resolution, box-filtered down to `size` and
/// normalized by the accumulated opacity; background pixels are all zero.
pub fn feature_map(head: &PosedHead, camera: &Camera, size: usize) -> Result<Vec<f32>> {
    if size == 0 || camera.width != camera.height || !camera.width.is_multiple_of(size) {
        return Err(Error::shape(format!(
            "feature size {size} must divide the {}x{} view",
            camera.width, camera.height
        )));
    }
    let set = &head.gaussians;
    let enc = |v: f64| ((v + 1.0) * 0.5).clamp(0.0, 1.0);
    let normals = head.normals.iter().map(|n| n.map(enc)).collect();
    let positions = set.positions.iter().map(|p| p.map(enc)).collect();
    let misc = set
        .positions
        .iter()
        .zip(&head.curvature)
        .map(|(p, &c)| {
            let z = camera.world_to_camera(&nalgebra::Vector3::from(*p)).z;
            [((z - DEPTH_NEAR) / DEPTH_RANGE).clamp(0.0, 1.0), c.clamp(0.0, 1.0), 1.0]
        })
        .collect();
    let f = camera.width / size;
    let down = |v: Vec<f64>, ch: usize| -> Vec<f64> {
        let mut out = vec![0.0; size * size * ch];
        for y in 0..camera.height {
            for x in 0..camera.width {
                let o = ((y / f) * size + x / f) * ch;
                for k in 0..ch {
                    out[o + k] += v[(y * camera.width + x) * ch + k];
                }
            }
        }
        let inv = 1.0 / (f * f) as f64;
        out.iter().map(|v| v * inv).collect()
    };
    let (na, alpha) = attribute_pass(set, normals, camera)?;
    let (na, alpha) = (down(na, 3), down(alpha, 1));
    let pa = down(attribute_pass(set, positions, camera)?.0, 3);
    let ma = down(attribute_pass(set, misc, camera)?.0, 3);
    let n = size * size;
    let mut out = vec![0f32; n * FEATURE_CHANNELS];
    for i in 0..n {
        let a = alpha[i];
        if a < 1e-3 {
            continue;
        }
        let f = &mut out[i * FEATURE_CHANNELS..(i + 1) * FEATURE_CHANNELS];
        let mut nrm = [0.0; 3];
        for k in 0..3 {
            nrm[k] = 2.0 * na[3 * i + k] / a - 1.0;
            f[3 + k] = (2.0 * pa[3 * i + k] / a - 1.0) as f32;
        }
        let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt().max(1e-9);
        for k in 0..3 {
            f[k] = (nrm[k] / len) as f32;
        }
        f[6] = (ma[3 * i] / a) as f32;
        f[7] = (ma[3 * i + 1] / a) as f32;
        f[8] = a as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::cameras::CameraRig;
    use crate::synth::head::{make_head, pose_head_full, EXPR_DIM};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_positions_project_back_to_their_pixels() {
        let head = pose_head_full(&make_head(2), &[0.0; EXPR_DIM]);
        let rig = CameraRig::default();
        let cam = rig.camera(13, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pos, conf) = position_and_confidence(&head, &cam, 0.0, &mut rng).unwrap();
        let mut fg = 0;
        for y in 0..32 {
            for x in 0..32 {
                let i = y * 32 + x;
                if conf[i] > 0.5 {
                    fg += 1;
                    let p = Vector3::new(pos.data[3 * i], pos.data[3 * i + 1], pos.data[3 * i + 2]);
                    let uv = cam.project_camera_point(&cam.world_to_camera(&p));
                    assert!((uv.x - x as f64 - 0.5).abs() < 1e-6 && (uv.y - y as f64 - 0.5).abs() < 1e-6);
                    assert!(p.norm() < 1.0);
                }
            }
        }
        assert!(fg > 200, "{fg}");
        // corners are background
        assert!(conf[0] < 0.01 && conf[32 * 32 - 1] < 0.01);
    }

    #[test]
    fn noise_has_the_requested_spread() {
        let head = pose_head_full(&make_head(2), &[0.0; EXPR_DIM]);
        let cam = CameraRig::default().camera(13, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (clean, conf) = position_and_confidence(&head, &cam, 0.0, &mut rng).unwrap();
        let (noisy, _) = position_and_confidence(&head, &cam, 0.01, &mut rng).unwrap();
        let d: Vec<f64> = (0..conf.len())
            .filter(|&i| conf[i] > 0.5)
            .flat_map(|i| (0..3).map(move |k| 3 * i + k))
            .map(|j| noisy.data[j] - clean.data[j])
            .collect();
        let sd = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        assert!((sd - 0.01).abs() < 0.001, "{sd}");
    }

    #[test]
    fn feature_foreground_agrees_with_confidence() {
        let head = pose_head_full(&make_head(4), &[0.0; EXPR_DIM]);
        let rig = CameraRig::default();
        for id in [9, 13, 30] {
            let cam = rig.camera(id, 128);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let (_, conf) = position_and_confidence(&head, &cam, 0.0, &mut rng).unwrap();
            let feat = feature_map(&head, &cam, 32).unwrap();
            let (mut inter, mut union) = (0, 0);
            for y in 0..32 {
                for x in 0..32 {
                    let mut c = 0.0;
                    for dy in 0..4 {
                        for dx in 0..4 {
                            c += conf[(4 * y + dy) * 128 + 4 * x + dx];
                        }
                    }
                    let a = c / 16.0 > 0.5;
                    let b = feat[(y * 32 + x) * FEATURE_CHANNELS + 8] > 0.5;
                    inter += usize::from(a && b);
                    union += usize::from(a || b);
                }
            }
            let iou = inter as f64 / union as f64;
            assert!(iou > 0.95, "camera {id}: IoU {iou}");
        }
    }

    #[test]
    fn background_features_are_constant_and_normals_unit() {
        let head = pose_head_full(&make_head(5), &[0.0; EXPR_DIM]);
        let cam = CameraRig::default().camera(13, 32);
        let feat = feature_map(&head, &cam, 32).unwrap();
        assert!(feat[..FEATURE_CHANNELS].iter().all(|&v| v == 0.0));
        for px in feat.chunks(FEATURE_CHANNELS) {
            if px[8] > 0.5 {
                let n: f32 = px[..3].iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-4);
                // reserved channels stay zero
                assert!(px[9..].iter().all(|&v| v == 0.0));
            }
        }
    }
}
