//! Photometric losses with analytic gradients, and image metrics.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) applied separably with
//! reflect padding, `C1 = 0.01²`, `C2 = 0.03²`, and averages the SSIM map
//! over pixels and channels.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Weights of the photometric objective. The perceptual weight is recorded
/// for completeness; no perceptual term is computed, so it has no effect.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 0.8, ssim: 0.2, lpips: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if ![self.l1, self.ssim, self.lpips].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Loss value, its parts and `∂loss/∂pred`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub l1: f64,
    /// Mean SSIM (not `1 − SSIM`).
    pub ssim: f64,
    pub grad: Image,
}

/// Mean absolute error and its gradient w.r.t. `pred` (zero at ties).
pub fn l1(pred: &Image, gt: &Image) -> Result<(f64, Vec<f64>)> {
    pred.same_shape(gt)?;
    let n = pred.data.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(p, g)| {
            let d = p - g;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    pred.same_shape(gt)?;
    Ok(pred.data.iter().zip(&gt.data).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.data.len() as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(if m <= 0.0 { PSNR_CAP } else { (-10.0 * m.log10()).min(PSNR_CAP) })
}

fn window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Reflect (mirror without edge repeat) an out-of-range index into `0..n`.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Single-channel plane blurred by the window, or its adjoint.
struct Blur {
    w: usize,
    h: usize,
    k: [f64; 2 * SSIM_RADIUS + 1],
    /// Reflected source column (row) of each output column (row) and tap.
    cols: Vec<usize>,
    rows: Vec<usize>,
}

impl Blur {
    fn new(w: usize, h: usize) -> Self {
        let taps = |n: usize| -> Vec<usize> {
            let r = SSIM_RADIUS as isize;
            (0..n).flat_map(|i| (-r..=r).map(move |o| reflect(i as isize + o, n))).collect()
        };
        Blur { w, h, k: window(), cols: taps(w), rows: taps(h) }
    }

    fn pass(&self, src: &[f64], horizontal: bool, adjoint: bool) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let nk = self.k.len();
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            if horizontal {
                let (src_row, out_row) = (&src[y * w..(y + 1) * w], &mut out[y * w..(y + 1) * w]);
                for x in 0..w {
                    let taps = &self.cols[x * nk..(x + 1) * nk];
                    for (&kv, &q) in self.k.iter().zip(taps) {
                        if adjoint {
                            out_row[q] += kv * src_row[x];
                        } else {
                            out_row[x] += kv * src_row[q];
                        }
                    }
                }
            } else {
                for (&kv, &q) in self.k.iter().zip(&self.rows[y * nk..(y + 1) * nk]) {
                    let (from, to) = if adjoint { (y, q) } else { (q, y) };
                    for x in 0..w {
                        out[to * w + x] += kv * src[from * w + x];
                    }
                }
            }
        }
        out
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, true, false), false, false)
    }

    fn adjoint(&self, src: &[f64]) -> Vec<f64> {
        self.pass(&self.pass(src, false, true), true, true)
    }
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM and, when `with_grad`, its gradient w.r.t. `pred`. Images
/// smaller than the window are rejected.
pub fn ssim_with_grad(pred: &Image, gt: &Image, with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    pred.same_shape(gt)?;
    let side = 2 * SSIM_RADIUS + 1;
    if pred.width < side || pred.height < side {
        return Err(Error::shape(format!(
            "{}x{} image is smaller than the {side}x{side} SSIM window",
            pred.width, pred.height
        )));
    }
    let blur = Blur::new(pred.width, pred.height);
    let n = pred.width * pred.height;
    let norm = 1.0 / (3 * n) as f64;
    let mut total = 0.0;
    let mut grad = with_grad.then(|| vec![0.0; pred.data.len()]);
    for c in 0..3 {
        let x = channel(pred, c);
        let y = channel(gt, c);
        let mx = blur.apply(&x);
        let my = blur.apply(&y);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (bxx, byy, bxy) = (blur.apply(&xx), blur.apply(&yy), blur.apply(&xy));
        let mut da = vec![0.0; n];
        let mut db = vec![0.0; n];
        let mut dc = vec![0.0; n];
        for p in 0..n {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = bxx[p] - ux * ux;
            let syy = byy[p] - uy * uy;
            let sxy = bxy[p] - ux * uy;
            let n1 = 2.0 * ux * uy + C1;
            let n2 = 2.0 * sxy + C2;
            let d1 = ux * ux + uy * uy + C1;
            let d2 = sxx + syy + C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if with_grad {
                let ds_dux = 2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1;
                let ds_dsxx = -s / d2;
                let ds_dsxy = 2.0 * n1 / (d1 * d2);
                // S depends on x through μx, E[x²] and E[xy]
                db[p] = norm * ds_dsxx;
                dc[p] = norm * ds_dsxy;
                da[p] = norm * ds_dux - 2.0 * ux * db[p] - uy * dc[p];
            }
        }
        if let Some(g) = grad.as_mut() {
            let (ta, tb, tc) = (blur.adjoint(&da), blur.adjoint(&db), blur.adjoint(&dc));
            for p in 0..n {
                g[3 * p + c] = ta[p] + 2.0 * x[p] * tb[p] + y[p] * tc[p];
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(ssim_with_grad(pred, gt, false)?.0)
}

/// `w_l1 · L1 + w_ssim · (1 − SSIM)` and its gradient. The perceptual
/// weight contributes nothing.
pub fn photometric_loss(pred: &Image, gt: &Image, weights: &LossWeights) -> Result<LossOutput> {
    weights.validate()?;
    let (l, gl) = l1(pred, gt)?;
    let (s, gs) = ssim_with_grad(pred, gt, true)?;
    let gs = gs.expect("requested");
    let data = gl.iter().zip(&gs).map(|(a, b)| weights.l1 * a - weights.ssim * b).collect();
    Ok(LossOutput {
        total: weights.l1 * l + weights.ssim * (1.0 - s),
        l1: l,
        ssim: s,
        grad: Image { width: pred.width, height: pred.height, data },
    })
}

/// Metrics of one rendered view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewMetrics {
    pub view_id: u32,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

pub fn view_metrics(view_id: u32, pred: &Image, gt: &Image) -> Result<ViewMetrics> {
    Ok(ViewMetrics { view_id, psnr: psnr(pred, gt)?, ssim: ssim(pred, gt)?, l1: l1(pred, gt)?.0 })
}

/// Means over all rows, or `None` for an empty report.
pub fn aggregate(rows: &[ViewMetrics]) -> Option<(f64, f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some((
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows.iter().map(|r| r.l1).sum::<f64>() / n,
    ))
}

/// Plain-text report: a header, one `view_id psnr ssim l1` row per view and
/// a final `mean` row.
pub fn format_report(rows: &[ViewMetrics]) -> String {
    let mut s = String::from("# view_id psnr ssim l1\n");
    for r in rows {
        writeln!(s, "{} {:.4} {:.6} {:.6}", r.view_id, r.psnr, r.ssim, r.l1).unwrap();
    }
    if let Some((p, q, l)) = aggregate(rows) {
        writeln!(s, "mean {p:.4} {q:.6} {l:.6}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_differences, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
        Image { width: w, height: h, data: (0..w * h * 3).map(|_| rng.random::<f64>()).collect() }
    }

    #[test]
    fn constant_images_match_the_closed_form() {
        let (a, b) = (0.3, 0.7);
        let s = ssim(&Image::filled(16, 12, [a; 3]), &Image::filled(16, 12, [b; 3])).unwrap();
        let expect = (2.0 * a * b + C1) / (a * a + b * b + C1);
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn psnr_of_a_uniform_offset() {
        let a = Image::filled(8, 8, [0.5; 3]);
        let b = Image::filled(8, 8, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn window_is_normalized_and_reflection_stays_in_range() {
        assert!((window().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(reflect(-1, 8), 1);
        assert_eq!(reflect(8, 8), 6);
        for i in -20..30 {
            assert!(reflect(i, 3) < 3);
        }
    }

    #[test]
    fn blur_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Blur::new(9, 7);
        let u: Vec<f64> = (0..63).map(|_| rng.random()).collect();
        let v: Vec<f64> = (0..63).map(|_| rng.random()).collect();
        let lhs: f64 = b.apply(&u).iter().zip(&v).map(|(a, c)| a * c).sum();
        let rhs: f64 = u.iter().zip(b.adjoint(&v)).map(|(a, c)| a * c).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_image(&mut rng, 13, 11);
        let pred = random_image(&mut rng, 13, 11);
        let w = LossWeights::default();
        let analytic = photometric_loss(&pred, &gt, &w).unwrap().grad.data;
        let mut x = pred.data.clone();
        let idx: Vec<usize> = (0..x.len()).collect();
        let numeric = central_differences(&mut x, &idx, 1e-6, |d| {
            let p = Image { width: 13, height: 11, data: d.to_vec() };
            photometric_loss(&p, &gt, &w).unwrap().total
        });
        assert!(relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn ssim_gradient_alone_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_image(&mut rng, 11, 12);
        let pred = random_image(&mut rng, 11, 12);
        let analytic = ssim_with_grad(&pred, &gt, true).unwrap().1.unwrap();
        let mut x = pred.data.clone();
        let idx: Vec<usize> = (0..x.len()).collect();
        let numeric = central_differences(&mut x, &idx, 1e-6, |d| {
            ssim(&Image { width: 11, height: 12, data: d.to_vec() }, &gt).unwrap()
        });
        assert!(relative_error(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn shape_errors_and_inert_perceptual_weight() {
        let a = Image::zeros(12, 12);
        assert!(l1(&a, &Image::zeros(12, 13)).is_err());
        assert!(ssim(&Image::zeros(10, 12), &Image::zeros(10, 12)).is_err());
        assert!(photometric_loss(&a, &a, &LossWeights { l1: -1.0, ..LossWeights::default() }).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, y) = (random_image(&mut rng, 12, 12), random_image(&mut rng, 12, 12));
        let with = photometric_loss(&x, &y, &LossWeights { lpips: 5.0, ..LossWeights::default() }).unwrap();
        let without = photometric_loss(&x, &y, &LossWeights { lpips: 0.0, ..LossWeights::default() }).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn l1_matches_direct_summation_and_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (random_image(&mut rng, 7, 5), random_image(&mut rng, 7, 5));
        let direct: f64 = (0..a.data.len()).map(|i| (a.data[i] - b.data[i]).abs()).sum::<f64>() / a.data.len() as f64;
        assert!((l1(&a, &b).unwrap().0 - direct).abs() < 1e-12);
        let shifted = Image { data: a.data.iter().map(|v| v * 0.5 + 0.1).collect(), ..a.clone() };
        let half = Image { data: a.data.iter().map(|v| v * 0.5).collect(), ..a.clone() };
        assert!((l1(&half, &shifted).unwrap().0 - 0.1).abs() < 1e-12);
        assert_eq!(l1(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn zero_and_unit_constants_and_the_weighted_total() {
        let s = ssim(&Image::filled(12, 12, [0.0; 3]), &Image::filled(12, 12, [1.0; 3])).unwrap();
        assert!((s - 1e-4 / (1.0 + 1e-4)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_image(&mut rng, 16, 16);
        let base = Image { data: x.data.iter().map(|v| v * 0.8).collect(), ..x.clone() };
        let off = Image { data: base.data.iter().map(|v| v + 0.1).collect(), ..x.clone() };
        let out = photometric_loss(&off, &base, &LossWeights::default()).unwrap();
        assert!((out.l1 - 0.1).abs() < 1e-12);
        assert!((out.total - (0.8 * 0.1 + 0.2 * (1.0 - out.ssim))).abs() < 1e-12);
        let same = photometric_loss(&x, &x, &LossWeights::default()).unwrap();
        assert!(same.total.abs() < 1e-12);
    }

    #[test]
    fn report_has_rows_and_a_mean() {
        let rows = [
            ViewMetrics { view_id: 3, psnr: 30.0, ssim: 0.9, l1: 0.02 },
            ViewMetrics { view_id: 11, psnr: 32.0, ssim: 0.95, l1: 0.01 },
        ];
        let r = format_report(&rows);
        let lines: Vec<&str> = r.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("3 30.0000 "));
        assert_eq!(lines[3], "mean 31.0000 0.925000 0.015000");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_is_symmetric_bounded_and_one_on_identity(seed in 0u64..1000, w in 11usize..20, h in 11usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, w, h);
            let b = random_image(&mut rng, w, h);
            let ab = ssim(&a, &b).unwrap();
            prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ab <= 1.0 + 1e-12);
            prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!(psnr(&a, &b).unwrap() < PSNR_CAP);
            let direct = -10.0 * ((0..a.data.len()).map(|i| (a.data[i] - b.data[i]).powi(2)).sum::<f64>() / a.data.len() as f64).log10();
            prop_assert!((psnr(&a, &b).unwrap() - direct).abs() < 1e-6);
        }

        #[test]
        fn ssim_is_nearly_shift_invariant(seed in 0u64..1000, shift in -0.2f64..0.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 16, 16);
            let b = random_image(&mut rng, 16, 16);
            let squeeze = |im: &Image, s: f64| Image { data: im.data.iter().map(|v| 0.3 + 0.4 * v + s).collect(), ..im.clone() };
            let d = ssim(&squeeze(&a, 0.0), &squeeze(&b, 0.0)).unwrap() - ssim(&squeeze(&a, shift), &squeeze(&b, shift)).unwrap();
            prop_assert!(d.abs() < 1e-3, "{}", d);
        }
    }
}
