//! Tile-based differentiable Gaussian rasterizer, its analytic adjoint and a
//! brute-force per-pixel reference.
//!
//! Every visible Gaussian is projected once, globally sorted front-to-back by
//! `(camera depth, index)` and appended to the list of each 16×16 tile its
//! footprint can reach. Pixels composite their tile list in order:
//!
//! ```text
//! α_i = o_i · exp(−½ Δᵀ Σ₂ᴰ⁻¹ Δ)        (skipped when α_i < alpha_min)
//! C   = Σ_i c_i α_i T_i + T_final · background,   T_i = Π_{j<i} (1 − α_j)
//! ```
//!
//! and stop once the transmittance drops below `transmittance_min`. The
//! footprint radius is opacity aware (`α ≥ alpha_min` can only happen inside
//! it), so tile gating never drops a contribution the per-pixel test would
//! keep. The backward pass differentiates exactly this truncated forward.

mod export;

pub use export::{read_splats, write_splats, SPLAT_MAGIC};

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project_gaussian, project_gaussian_backward, Camera, Gaussian3D, ProjectionCache, Quat};
use crate::image::Image;

/// Structure-of-arrays Gaussian cloud.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    /// `(w, x, y, z)`, unit norm.
    pub rotations: Vec<[f64; 4]>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    /// Index of the input view that spawned each Gaussian, when known.
    pub source_view: Option<Vec<u32>>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: &Gaussian3D) {
        self.positions.push([g.position.x, g.position.y, g.position.z]);
        self.scales.push(g.scale);
        self.rotations.push(g.rotation.to_array());
        self.colors.push(g.color);
        self.opacities.push(g.opacity);
    }

    pub fn get(&self, i: usize) -> Gaussian3D {
        Gaussian3D {
            position: Vector3::from(self.positions[i]),
            scale: self.scales[i],
            rotation: Quat::from_array(self.rotations[i]),
            color: self.colors[i],
            opacity: self.opacities[i],
        }
    }

    pub fn extend(&mut self, other: &GaussianSet) {
        self.positions.extend_from_slice(&other.positions);
        self.scales.extend_from_slice(&other.scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.colors.extend_from_slice(&other.colors);
        self.opacities.extend_from_slice(&other.opacities);
        match (&mut self.source_view, &other.source_view) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (a, _) => *a = None,
        }
    }

    /// Checks array lengths and the per-Gaussian invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [self.scales.len(), self.rotations.len(), self.colors.len(), self.opacities.len()];
        if lens.iter().any(|&l| l != n) || self.source_view.as_ref().is_some_and(|t| t.len() != n) {
            return Err(Error::shape(format!("gaussian attribute arrays disagree: {n} vs {lens:?}")));
        }
        for i in 0..n {
            let g = self.get(i);
            let finite = self.positions[i].iter().all(|v| v.is_finite());
            if !finite
                || g.scale.iter().any(|&s| !(s > 0.0 && s.is_finite()))
                || (g.rotation.norm() - 1.0).abs() > 1e-6
                || g.color.iter().any(|c| !(0.0..=1.0).contains(c))
                || !(0.0..=1.0).contains(&g.opacity)
            {
                return Err(Error::InvalidArgument(format!("gaussian {i} violates invariants: {g:?}")));
            }
        }
        Ok(())
    }
}

/// Per-attribute gradients, shaped like [`GaussianSet`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGradients {
    pub positions: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    /// Gradient w.r.t. the stored (unit) quaternion components.
    pub rotations: Vec<[f64; 4]>,
    pub colors: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
}

impl GaussianGradients {
    pub fn zeros(n: usize) -> Self {
        GaussianGradients {
            positions: vec![[0.0; 3]; n],
            scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            colors: vec![[0.0; 3]; n],
            opacities: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `self += weight · other`.
    pub fn add_scaled(&mut self, other: &GaussianGradients, weight: f64) {
        fn axpy<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]], w: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += w * y[k];
                }
            }
        }
        axpy(&mut self.positions, &other.positions, weight);
        axpy(&mut self.scales, &other.scales, weight);
        axpy(&mut self.rotations, &other.rotations, weight);
        axpy(&mut self.colors, &other.colors, weight);
        for (x, y) in self.opacities.iter_mut().zip(&other.opacities) {
            *x += weight * y;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.scales.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.colors.iter().flatten().all(|v| v.is_finite())
            && self.opacities.iter().all(|v| v.is_finite())
    }
}

/// Rasterizer cutoffs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterSettings {
    pub tile_size: usize,
    /// Contributions with a smaller alpha are skipped.
    pub alpha_min: f64,
    /// Compositing stops once the transmittance falls below this value.
    pub transmittance_min: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings { tile_size: 16, alpha_min: 1e-4, transmittance_min: 1e-4 }
    }
}

/// Per-pixel bookkeeping of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderAux {
    pub final_transmittance: Vec<f64>,
    /// Number of Gaussians that contributed to each pixel.
    pub contributors: Vec<u32>,
    pub gaussian_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated opacity `1 − T_final`.
    pub alpha: Vec<f64>,
    /// Alpha-weighted camera depth `Σ z_i α_i T_i` (not normalized).
    pub depth: Vec<f64>,
    pub aux: RenderAux,
}

impl RenderOutput {
    /// Expected depth of the visible surface, `None` where nothing was drawn.
    pub fn expected_depth(&self, pixel: usize) -> Option<f64> {
        let a = self.alpha[pixel];
        (a > 1e-12).then(|| self.depth[pixel] / a)
    }
}

#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    mean: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
    depth: f64,
    cache: ProjectionCache,
}

/// The fields the per-pixel loops read, packed for cache locality.
#[derive(Clone, Copy, Debug)]
struct Hot {
    mx: f64,
    my: f64,
    a: f64,
    b: f64,
    c: f64,
    opacity: f64,
    /// Powers below this cannot reach `alpha_min`; a conservative pre-test
    /// that saves the `exp`, never the exact comparison.
    cut: f64,
    color: [f64; 3],
    depth: f64,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of the footprint.
    bounds: [u32; 4],
}

impl Hot {
    fn new(s: &Splat, alpha_min: f64) -> Self {
        Hot {
            mx: s.mean.x,
            my: s.mean.y,
            a: s.conic[(0, 0)],
            b: s.conic[(0, 1)],
            c: s.conic[(1, 1)],
            opacity: s.opacity,
            cut: (alpha_min / s.opacity).ln() - 1e-6,
            color: s.color,
            depth: s.depth,
            bounds: [0; 4],
        }
    }

    #[inline(always)]
    fn power(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let (dx, dy) = (px - self.mx, py - self.my);
        (-0.5 * (self.a * dx * dx + 2.0 * self.b * dx * dy + self.c * dy * dy), dx, dy)
    }
}

struct Prepared {
    /// Visible splats in global front-to-back order.
    splats: Vec<Splat>,
    hot: Vec<Hot>,
    /// Per tile, indices into `splats` in front-to-back order.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

fn project_all(set: &GaussianSet, camera: &Camera) -> Vec<Splat> {
    let mut splats: Vec<Splat> = (0..set.len())
        .filter_map(|i| {
            let g = set.get(i);
            let (p, cache) = project_gaussian(&g.position, g.scale, g.rotation, camera)?;
            let conic = p.cov2d.try_inverse()?;
            Some(Splat { index: i, mean: p.mean2d, conic, opacity: g.opacity, color: g.color, depth: p.depth, cache })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

fn prepare(set: &GaussianSet, camera: &Camera, settings: &RasterSettings) -> Prepared {
    let splats = project_all(set, camera);
    let ts = settings.tile_size;
    let tiles_x = camera.width.div_ceil(ts);
    let tiles_y = camera.height.div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let mut hot: Vec<Hot> = splats.iter().map(|s| Hot::new(s, settings.alpha_min)).collect();
    for (k, s) in splats.iter().enumerate() {
        if s.opacity < settings.alpha_min {
            continue;
        }
        // Mahalanobis radius inside which alpha can reach alpha_min
        let m2 = 2.0 * (s.opacity / settings.alpha_min).ln();
        let cov = s.conic.try_inverse().unwrap_or(Matrix2::zeros());
        // axis-aligned bounding box of that ellipse, padded against rounding
        let rx = (m2 * cov[(0, 0)].max(0.0)).sqrt() * (1.0 + 1e-9) + 1e-9;
        let ry = (m2 * cov[(1, 1)].max(0.0)).sqrt() * (1.0 + 1e-9) + 1e-9;
        let x0 = (s.mean.x - rx - 0.5).ceil().max(0.0);
        let x1 = (s.mean.x + rx - 0.5).floor().min(camera.width as f64 - 1.0);
        let y0 = (s.mean.y - ry - 0.5).ceil().max(0.0);
        let y1 = (s.mean.y + ry - 0.5).floor().min(camera.height as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        hot[k].bounds = [x0 as u32, x1 as u32, y0 as u32, y1 as u32];
        let (tx0, tx1) = (x0 as usize / ts, x1 as usize / ts);
        let (ty0, ty1) = (y0 as usize / ts, y1 as usize / ts);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }
    Prepared { splats, hot, tiles, tiles_x }
}

#[inline]
fn gauss_power(s: &Splat, px: f64, py: f64) -> (f64, Vector2<f64>) {
    let d = Vector2::new(px - s.mean.x, py - s.mean.y);
    let p = -0.5 * (s.conic[(0, 0)] * d.x * d.x + 2.0 * s.conic[(0, 1)] * d.x * d.y + s.conic[(1, 1)] * d.y * d.y);
    (p, d)
}

fn check_inputs(set: &GaussianSet, camera: &Camera) -> Result<()> {
    camera.validate()?;
    set.validate()
}

struct TileResult {
    rgb: Vec<[f64; 3]>,
    transmittance: Vec<f64>,
    depth: Vec<f64>,
    count: Vec<u32>,
}

const SUB: usize = 8;

/// The tile's splats, and for each `SUB × SUB` block of the tile the
/// positions in that list whose footprint reaches the block.
fn tile_lists(tile: usize, prep: &Prepared, camera: &Camera, ts: usize) -> (Vec<Hot>, Vec<Vec<u32>>, usize) {
    let list: Vec<Hot> = prep.tiles[tile].iter().map(|&k| prep.hot[k as usize]).collect();
    let (x0, y0) = ((tile % prep.tiles_x) * ts, (tile / prep.tiles_x) * ts);
    let (w, h) = ((x0 + ts).min(camera.width) - x0, (y0 + ts).min(camera.height) - y0);
    let (nx, ny) = (w.div_ceil(SUB), h.div_ceil(SUB));
    let mut subs = vec![Vec::new(); nx * ny];
    for (pos, s) in list.iter().enumerate() {
        let [bx0, bx1, by0, by1] = s.bounds.map(|v| v as usize);
        for sy in 0..ny {
            let (a, b) = (y0 + sy * SUB, y0 + (sy * SUB + SUB).min(h) - 1);
            if by1 < a || by0 > b {
                continue;
            }
            for sx in 0..nx {
                let (a, b) = (x0 + sx * SUB, x0 + (sx * SUB + SUB).min(w) - 1);
                if bx1 >= a && bx0 <= b {
                    subs[sy * nx + sx].push(pos as u32);
                }
            }
        }
    }
    (list, subs, nx)
}

#[inline]
fn sub_block(tile: usize, prep: &Prepared, ts: usize, nx: usize, x: usize, y: usize) -> usize {
    let (x0, y0) = ((tile % prep.tiles_x) * ts, (tile / prep.tiles_x) * ts);
    ((y - y0) / SUB) * nx + (x - x0) / SUB
}

fn tile_pixels(tile: usize, prep: &Prepared, camera: &Camera, ts: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % prep.tiles_x, tile / prep.tiles_x);
    let (w, h) = (camera.width, camera.height);
    (ty * ts..((ty + 1) * ts).min(h)).flat_map(move |y| (tx * ts..((tx + 1) * ts).min(w)).map(move |x| (x, y)))
}

/// Tile-based forward pass.
pub fn rasterize(set: &GaussianSet, camera: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    rasterize_with(set, camera, background, &RasterSettings::default())
}

pub fn rasterize_with(
    set: &GaussianSet,
    camera: &Camera,
    background: [f64; 3],
    settings: &RasterSettings,
) -> Result<RenderOutput> {
    check_inputs(set, camera)?;
    let prep = prepare(set, camera, settings);
    let ts = settings.tile_size;
    let results: Vec<TileResult> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (list, subs, nx) = tile_lists(tile, &prep, camera, ts);
            let mut out =
                TileResult { rgb: Vec::new(), transmittance: Vec::new(), depth: Vec::new(), count: Vec::new() };
            for (x, y) in tile_pixels(tile, &prep, camera, ts) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0;
                let mut c = [0.0; 3];
                let mut z = 0.0;
                let mut n = 0u32;
                for &pos in &subs[sub_block(tile, &prep, ts, nx, x, y)] {
                    let s = &list[pos as usize];
                    let (power, _, _) = s.power(px, py);
                    if power < s.cut {
                        continue;
                    }
                    let alpha = s.opacity * power.exp();
                    if alpha < settings.alpha_min {
                        continue;
                    }
                    let w = alpha * t;
                    for ch in 0..3 {
                        c[ch] += s.color[ch] * w;
                    }
                    z += s.depth * w;
                    t *= 1.0 - alpha;
                    n += 1;
                    if t < settings.transmittance_min {
                        break;
                    }
                }
                out.rgb.push(c);
                out.transmittance.push(t);
                out.depth.push(z);
                out.count.push(n);
            }
            out
        })
        .collect();
    Ok(assemble_output(&prep, results, camera, background, set.len(), ts))
}

fn assemble_output(
    prep: &Prepared,
    results: Vec<TileResult>,
    camera: &Camera,
    background: [f64; 3],
    gaussian_count: usize,
    ts: usize,
) -> RenderOutput {
    let npix = camera.width * camera.height;
    let mut image = Image::zeros(camera.width, camera.height);
    let mut alpha = vec![0.0; npix];
    let mut depth = vec![0.0; npix];
    let mut final_transmittance = vec![1.0; npix];
    let mut contributors = vec![0; npix];
    for (tile, res) in results.into_iter().enumerate() {
        for (i, (x, y)) in tile_pixels(tile, prep, camera, ts).enumerate() {
            let p = y * camera.width + x;
            let t = res.transmittance[i];
            for ch in 0..3 {
                image.data[p * 3 + ch] = res.rgb[i][ch] + t * background[ch];
            }
            alpha[p] = 1.0 - t;
            depth[p] = res.depth[i];
            final_transmittance[p] = t;
            contributors[p] = res.count[i];
        }
    }
    RenderOutput { image, alpha, depth, aux: RenderAux { final_transmittance, contributors, gaussian_count } }
}

/// Exhaustive per-pixel compositing of every visible Gaussian in global depth
/// order, with no alpha cutoff and no early termination.
pub fn reference_rasterize(set: &GaussianSet, camera: &Camera, background: [f64; 3]) -> Result<RenderOutput> {
    check_inputs(set, camera)?;
    let splats = project_all(set, camera);
    let npix = camera.width * camera.height;
    let mut image = Image::zeros(camera.width, camera.height);
    let mut alpha = vec![0.0; npix];
    let mut depth = vec![0.0; npix];
    let mut final_transmittance = vec![1.0; npix];
    let mut contributors = vec![0; npix];
    for y in 0..camera.height {
        for x in 0..camera.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let p = y * camera.width + x;
            let mut t = 1.0;
            for s in &splats {
                let (power, _) = gauss_power(s, px, py);
                let a = s.opacity * power.exp();
                for ch in 0..3 {
                    image.data[p * 3 + ch] += s.color[ch] * a * t;
                }
                depth[p] += s.depth * a * t;
                t *= 1.0 - a;
            }
            for ch in 0..3 {
                image.data[p * 3 + ch] += t * background[ch];
            }
            alpha[p] = 1.0 - t;
            final_transmittance[p] = t;
            contributors[p] = splats.len() as u32;
        }
    }
    Ok(RenderOutput {
        image,
        alpha,
        depth,
        aux: RenderAux { final_transmittance, contributors, gaussian_count: set.len() },
    })
}

/// Screen-space gradient accumulator: mean (2), conic as a full symmetric
/// matrix gradient (00, 01, 11), color (3), opacity (1).
type SplatGrad = [f64; 9];

/// Gradients of `Σ_pixels d_image ⊙ image` w.r.t. every Gaussian attribute,
/// for the forward pass recorded in `forward`.
pub fn rasterize_backward(
    set: &GaussianSet,
    camera: &Camera,
    background: [f64; 3],
    forward: &RenderOutput,
    d_image: &Image,
) -> Result<GaussianGradients> {
    rasterize_backward_with(set, camera, background, forward, d_image, &RasterSettings::default())
}

pub fn rasterize_backward_with(
    set: &GaussianSet,
    camera: &Camera,
    background: [f64; 3],
    forward: &RenderOutput,
    d_image: &Image,
    settings: &RasterSettings,
) -> Result<GaussianGradients> {
    check_inputs(set, camera)?;
    let npix = camera.width * camera.height;
    if forward.aux.gaussian_count != set.len()
        || forward.aux.final_transmittance.len() != npix
        || forward.image.width != camera.width
        || forward.image.height != camera.height
    {
        return Err(Error::Contract("forward record does not match the backward inputs".into()));
    }
    d_image.same_shape(&forward.image)?;
    let prep = prepare(set, camera, settings);
    let ts = settings.tile_size;

    let per_tile: Vec<Result<Vec<SplatGrad>>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (list, subs, nx) = tile_lists(tile, &prep, camera, ts);
            let mut grads = vec![[0.0; 9]; list.len()];
            // (list position, alpha, gaussian falloff, transmittance before)
            let mut hits: Vec<(usize, f64, f64, f64)> = Vec::new();
            for (x, y) in tile_pixels(tile, &prep, camera, ts) {
                let p = y * camera.width + x;
                let g = [d_image.data[p * 3], d_image.data[p * 3 + 1], d_image.data[p * 3 + 2]];
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                hits.clear();
                let mut t = 1.0;
                for &pos in &subs[sub_block(tile, &prep, ts, nx, x, y)] {
                    let pos = pos as usize;
                    let s = &list[pos];
                    let (power, _, _) = s.power(px, py);
                    if power < s.cut {
                        continue;
                    }
                    let fall = power.exp();
                    let alpha = s.opacity * fall;
                    if alpha < settings.alpha_min {
                        continue;
                    }
                    hits.push((pos, alpha, fall, t));
                    t *= 1.0 - alpha;
                    if t < settings.transmittance_min {
                        break;
                    }
                }
                if t.to_bits() != forward.aux.final_transmittance[p].to_bits() {
                    return Err(Error::Contract(format!("forward record disagrees at pixel ({x}, {y})")));
                }
                if g == [0.0; 3] {
                    continue;
                }
                // colour of everything behind the current splat, composited from T = 1
                let mut rest = background;
                for &(pos, alpha, fall, t_before) in hits.iter().rev() {
                    let s = &list[pos];
                    let acc = &mut grads[pos];
                    let w = alpha * t_before;
                    let mut d_alpha = 0.0;
                    for ch in 0..3 {
                        acc[5 + ch] += g[ch] * w;
                        d_alpha += g[ch] * (s.color[ch] - rest[ch]);
                    }
                    d_alpha *= t_before;
                    acc[8] += d_alpha * fall;
                    let d_power = d_alpha * alpha;
                    let (_, dx, dy) = s.power(px, py);
                    // d power / d mean = K Δ ; d power / d K = −½ Δ Δᵀ
                    acc[0] += d_power * (s.a * dx + s.b * dy);
                    acc[1] += d_power * (s.b * dx + s.c * dy);
                    acc[2] += -0.5 * d_power * dx * dx;
                    acc[3] += -0.5 * d_power * dx * dy;
                    acc[4] += -0.5 * d_power * dy * dy;
                    for ch in 0..3 {
                        rest[ch] = s.color[ch] * alpha + (1.0 - alpha) * rest[ch];
                    }
                }
            }
            Ok(grads)
        })
        .collect();

    // ordered reduction over tiles
    let mut screen = vec![[0.0; 9]; prep.splats.len()];
    for (tile, res) in per_tile.into_iter().enumerate() {
        let grads = res?;
        for (pos, g) in grads.iter().enumerate() {
            let acc = &mut screen[prep.tiles[tile][pos] as usize];
            for k in 0..9 {
                acc[k] += g[k];
            }
        }
    }

    let mut out = GaussianGradients::zeros(set.len());
    for (s, g) in prep.splats.iter().zip(&screen) {
        let i = s.index;
        out.colors[i] = [g[5], g[6], g[7]];
        out.opacities[i] = g[8];
        let d_conic = Matrix2::new(g[2], g[3], g[3], g[4]);
        let d_cov = -(s.conic * d_conic * s.conic);
        let d_mean = Vector2::new(g[0], g[1]);
        let pg = project_gaussian_backward(
            set.scales[i],
            Quat::from_array(set.rotations[i]),
            camera,
            &s.cache,
            &d_mean,
            &d_cov,
        );
        out.positions[i] = [pg.position.x, pg.position.y, pg.position.z];
        out.scales[i] = pg.scale;
        out.rotations[i] = pg.rotation;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(size: usize) -> Camera {
        Camera {
            fx: 60.0,
            fy: 60.0,
            cx: size as f64 * 0.5,
            cy: size as f64 * 0.5,
            rotation: Quat::IDENTITY,
            translation: Vector3::zeros(),
            width: size,
            height: size,
        }
    }

    fn single(pos: [f64; 3], scale: f64, color: [f64; 3], opacity: f64) -> GaussianSet {
        let mut set = GaussianSet::default();
        set.push(&Gaussian3D {
            position: Vector3::from(pos),
            scale: [scale; 3],
            rotation: Quat::IDENTITY,
            color,
            opacity,
        });
        set
    }

    pub(crate) fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
        let mut set = GaussianSet::default();
        for _ in 0..n {
            let q = Quat::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalized();
            set.push(&Gaussian3D {
                position: Vector3::new(
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(2.0..4.0),
                ),
                scale: [rng.random_range(0.03..0.3), rng.random_range(0.03..0.3), rng.random_range(0.03..0.3)],
                rotation: q,
                color: [rng.random(), rng.random(), rng.random()],
                opacity: rng.random_range(0.05..0.99),
            });
        }
        set
    }

    #[test]
    fn empty_set_renders_background() {
        let cam = axis_camera(32);
        let out = rasterize(&GaussianSet::default(), &cam, [0.2, 0.4, 0.6]).unwrap();
        for p in out.image.data.chunks(3) {
            assert_eq!(p, &[0.2, 0.4, 0.6]);
        }
        assert!(out.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn single_splat_center_pixel() {
        // principal point on the center of pixel (16, 16)
        let cam = Camera { cx: 16.5, cy: 16.5, ..axis_camera(32) };
        let (o, c, bg) = (0.7, [0.9, 0.5, 0.1], [0.1, 0.2, 0.3]);
        let set = single([0.0, 0.0, 3.0], 0.5, c, o);
        let out = rasterize(&set, &cam, bg).unwrap();
        let px = out.image.pixel(16, 16);
        for ch in 0..3 {
            assert!((px[ch] - (o * c[ch] + (1.0 - o) * bg[ch])).abs() < 1e-3);
        }
    }

    #[test]
    fn tile_matches_reference_for_overlapping_pair() {
        // footprints far larger than the frame: no pixel falls under the alpha cutoff
        let cam = axis_camera(48);
        let mut set = single([0.05, 0.0, 2.5], 2.0, [1.0, 0.0, 0.0], 0.8);
        set.extend(&single([-0.05, 0.02, 3.0], 2.5, [0.0, 1.0, 0.5], 0.6));
        let a = rasterize(&set, &cam, [0.0; 3]).unwrap();
        let b = reference_rasterize(&set, &cam, [0.0; 3]).unwrap();
        let err = a.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "max err {err}");
    }

    #[test]
    fn reference_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = random_scene(&mut rng, 20);
        let cam = axis_camera(24);
        let a = reference_rasterize(&set, &cam, [0.0; 3]).unwrap();
        let mut perm: Vec<usize> = (0..set.len()).collect();
        perm.reverse();
        let mut shuffled = GaussianSet::default();
        for &i in &perm {
            shuffled.push(&set.get(i));
        }
        let b = reference_rasterize(&shuffled, &cam, [0.0; 3]).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn alpha_and_energy_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = axis_camera(40);
        for _ in 0..5 {
            let set = random_scene(&mut rng, 30);
            let bg = [0.3, 0.6, 0.9];
            let out = rasterize(&set, &cam, bg).unwrap();
            assert!(out.alpha.iter().all(|a| (0.0..=1.0).contains(a)));
            assert!(out.image.data.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.9));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cam = axis_camera(32);
        let set = random_scene(&mut rng, 10);
        let fwd = rasterize(&set, &cam, [0.0; 3]).unwrap();
        let g = rasterize_backward(&set, &cam, [0.0; 3], &fwd, &Image::zeros(32, 32)).unwrap();
        assert_eq!(g, GaussianGradients::zeros(10));
    }

    #[test]
    fn mean_intensity_color_gradient_is_accumulated_weight() {
        let cam = axis_camera(32);
        let set = single([0.0, 0.0, 3.0], 0.3, [0.5, 0.5, 0.5], 0.8);
        let fwd = rasterize(&set, &cam, [0.0; 3]).unwrap();
        let n = (32 * 32 * 3) as f64;
        let d = Image::filled(32, 32, [1.0 / n; 3]);
        let g = rasterize_backward(&set, &cam, [0.0; 3], &fwd, &d).unwrap();
        // a single splat's weight at each pixel equals the accumulated alpha
        let expect: f64 = fwd.alpha.iter().sum::<f64>() / n;
        for ch in 0..3 {
            assert!(g.colors[0][ch] >= 0.0);
            assert!((g.colors[0][ch] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_forward_record_is_rejected() {
        let cam = axis_camera(16);
        let a = single([0.0, 0.0, 3.0], 0.3, [0.5; 3], 0.8);
        let b = single([0.1, 0.0, 3.0], 0.3, [0.5; 3], 0.8);
        let fwd = rasterize(&a, &cam, [0.0; 3]).unwrap();
        let d = Image::filled(16, 16, [1.0; 3]);
        assert!(matches!(rasterize_backward(&b, &cam, [0.0; 3], &fwd, &d), Err(Error::Contract(_))));
        let mut two = a.clone();
        two.extend(&b);
        assert!(matches!(rasterize_backward(&two, &cam, [0.0; 3], &fwd, &d), Err(Error::Contract(_))));
    }

    #[test]
    fn behind_camera_gaussians_get_zero_gradient() {
        let cam = axis_camera(16);
        let mut set = single([0.0, 0.0, 3.0], 0.3, [0.5; 3], 0.8);
        set.extend(&single([0.0, 0.0, -2.0], 0.3, [0.5; 3], 0.8));
        let fwd = rasterize(&set, &cam, [0.0; 3]).unwrap();
        let g = rasterize_backward(&set, &cam, [0.0; 3], &fwd, &Image::filled(16, 16, [1.0; 3])).unwrap();
        assert_eq!(g.positions[1], [0.0; 3]);
        assert_eq!(g.opacities[1], 0.0);
        assert!(g.opacities[0] > 0.0);
    }

    #[test]
    fn backward_matches_finite_differences_for_every_attribute() {
        use crate::nn::gradcheck::{central_differences, relative_error};
        let smooth = RasterSettings { alpha_min: 1e-12, transmittance_min: 0.0, ..RasterSettings::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cam = axis_camera(20);
        let bg = [0.2, 0.1, 0.3];
        let set = random_scene(&mut rng, 6);
        let w = Image::from_data(20, 20, (0..1200).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let objective = |s: &GaussianSet| -> f64 {
            let out = rasterize_with(s, &cam, bg, &smooth).unwrap();
            out.image.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        };
        let fwd = rasterize_with(&set, &cam, bg, &smooth).unwrap();
        let g = rasterize_backward_with(&set, &cam, bg, &fwd, &w, &smooth).unwrap();

        // one flat parameter vector per attribute class, edited in place
        type Access = fn(&mut GaussianSet, usize) -> &mut [f64];
        let classes: [(&str, usize, Access); 5] = [
            ("position", 3, |s, i| &mut s.positions[i]),
            ("scale", 3, |s, i| &mut s.scales[i]),
            ("rotation", 4, |s, i| &mut s.rotations[i]),
            ("color", 3, |s, i| &mut s.colors[i]),
            ("opacity", 1, |s, i| std::slice::from_mut(&mut s.opacities[i])),
        ];
        for (name, k, access) in classes {
            let analytic: Vec<f64> = (0..set.len())
                .flat_map(|i| match name {
                    "position" => g.positions[i].to_vec(),
                    "scale" => g.scales[i].to_vec(),
                    "rotation" => g.rotations[i].to_vec(),
                    "color" => g.colors[i].to_vec(),
                    _ => vec![g.opacities[i]],
                })
                .collect();
            let mut flat: Vec<f64> = {
                let mut s = set.clone();
                (0..set.len()).flat_map(|i| access(&mut s, i).to_vec()).collect()
            };
            let idx: Vec<usize> = (0..flat.len()).collect();
            let numeric = central_differences(&mut flat, &idx, 1e-4, |v| {
                let mut s = set.clone();
                for i in 0..s.len() {
                    access(&mut s, i).copy_from_slice(&v[i * k..(i + 1) * k]);
                    // stored rotations must stay unit; the renderer normalizes anyway
                    let q = Quat::from_array(s.rotations[i]).normalized();
                    s.rotations[i] = q.to_array();
                }
                objective(&s)
            });
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{name}: relative error {err:.3e}");
        }
    }
}
