//! Procedural Gaussian heads with a linear expression rig.
//!
//! Canonical head frame: `+y` up, the face looks towards `−z`, every
//! Gaussian center lies inside the unit ball. Shading is baked into the
//! colors with a fixed directional light.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{quat_to_rotmat, Quat};
use crate::render::GaussianSet;

/// Expression vector width of the rig.
pub const EXPR_DIM: usize = 8;

/// Named rig components, in expression-vector order.
pub const RIG_COMPONENTS: [&str; EXPR_DIM] =
    ["jaw_open", "jaw_shift", "blink_left", "blink_right", "smile_left", "smile_right", "brow_left", "brow_right"];

/// Full jaw travel: rotation (radians) about the hinge at `e = 1`.
pub const JAW_ANGLE: f64 = 0.3;
pub const JAW_SHIFT: f64 = 0.05;
/// Eye height shrinks to `1 − BLINK` of its neutral value at `e = 1`.
pub const BLINK: f64 = 0.8;
pub const SMILE: f64 = 0.06;
pub const BROW: f64 = 0.06;

const LIGHT: [f64; 3] = [-0.35, 0.55, -0.76];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartKind {
    Cranium,
    Hair,
    Jaw,
    EyeLeft,
    EyeRight,
    Nose,
    UpperLip,
    MouthCornerLeft,
    MouthCornerRight,
    BrowLeft,
    BrowRight,
    MouthInterior,
}

/// A rigid group of Gaussians plus the per-Gaussian descriptors used for the
/// synthetic feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Part {
    pub kind: PartKind,
    /// Rig pivot (jaw hinge, eye center).
    pub pivot: Vector3<f64>,
    pub gaussians: GaussianSet,
    pub normals: Vec<[f64; 3]>,
    pub curvature: Vec<f64>,
}

/// Identity-dependent shape and appearance parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub radii: [f64; 3],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    pub hair_line: f64,
    pub eye_spacing: f64,
    pub eye_height: f64,
    pub nose_length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProceduralHead {
    pub identity_seed: u64,
    pub params: HeadParams,
    pub parts: Vec<Part>,
}

/// Rigid-plus-scale transform of one part:
/// `p ↦ R · (S ⊙ (p − pivot)) + pivot + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartTransform {
    /// Rotation about the pivot's x axis, radians.
    pub angle_x: f64,
    /// Per-axis scale about the pivot.
    pub scale: [f64; 3],
    pub translation: [f64; 3],
}

impl PartTransform {
    pub const IDENTITY: PartTransform = PartTransform { angle_x: 0.0, scale: [1.0; 3], translation: [0.0; 3] };

    /// Parameters as one vector, for linearity checks.
    pub fn to_vec(&self) -> [f64; 7] {
        let [a, b, c] = self.scale;
        let [x, y, z] = self.translation;
        [self.angle_x, a, b, c, x, y, z]
    }
}

/// Posed head with the per-Gaussian descriptors carried along.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedHead {
    pub gaussians: GaussianSet,
    pub normals: Vec<[f64; 3]>,
    pub curvature: Vec<f64>,
    /// Expression components that were outside `[−1, 1]` and got clamped.
    pub clamped: usize,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn shade(albedo: [f64; 3], normal: [f64; 3]) -> [f64; 3] {
    let l = normalize(LIGHT);
    let ndl = (normal[0] * l[0] + normal[1] * l[1] + normal[2] * l[2]).max(0.0);
    let k = 0.4 + 0.6 * ndl;
    albedo.map(|c| (c * k).clamp(0.0, 1.0))
}

/// Rotation whose third column is `n` (a local frame with z along the normal).
fn frame_for_normal(n: [f64; 3]) -> Quat {
    let n = Vector3::from(n);
    let helper = if n.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
    let t1 = helper.cross(&n).normalize();
    let t2 = n.cross(&t1);
    Quat::from_rotmat(&Matrix3::from_columns(&[t1, t2, n]))
}

struct PartBuilder {
    part: Part,
}

impl PartBuilder {
    fn new(kind: PartKind, pivot: Vector3<f64>) -> Self {
        PartBuilder {
            part: Part { kind, pivot, gaussians: GaussianSet::default(), normals: Vec::new(), curvature: Vec::new() },
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        pos: [f64; 3],
        scale: [f64; 3],
        rot: Quat,
        color: [f64; 3],
        opacity: f64,
        normal: [f64; 3],
        curv: f64,
    ) {
        let g = &mut self.part.gaussians;
        g.positions.push(pos);
        g.scales.push(scale);
        g.rotations.push(rot.to_array());
        g.colors.push(color);
        g.opacities.push(opacity);
        self.part.normals.push(normal);
        self.part.curvature.push(curv);
    }
}

impl HeadParams {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.random_range(0.55..0.95);
        let skin = [tone, tone * rng.random_range(0.66..0.8), tone * rng.random_range(0.5..0.64)];
        let h = rng.random_range(0.06..0.55);
        HeadParams {
            radii: [rng.random_range(0.56..0.64), rng.random_range(0.70..0.78), rng.random_range(0.64..0.72)],
            skin,
            hair: [h, h * rng.random_range(0.7..0.85), h * rng.random_range(0.45..0.6)],
            iris: [rng.random_range(0.1..0.5), rng.random_range(0.2..0.55), rng.random_range(0.15..0.7)],
            lips: [rng.random_range(0.6..0.8), rng.random_range(0.18..0.32), rng.random_range(0.22..0.34)],
            hair_line: rng.random_range(0.25..0.45),
            eye_spacing: rng.random_range(0.19..0.24),
            eye_height: rng.random_range(0.08..0.14),
            nose_length: rng.random_range(0.16..0.22),
        }
    }

    /// Front surface point of the ellipsoid at `(x, y)`, with its normal.
    fn front(&self, x: f64, y: f64) -> ([f64; 3], [f64; 3]) {
        let [rx, ry, rz] = self.radii;
        let s = (1.0 - (x / rx).powi(2) - (y / ry).powi(2)).max(0.02);
        let z = -rz * s.sqrt();
        (([x, y, z]), normalize([x / (rx * rx), y / (ry * ry), z / (rz * rz)]))
    }
}

/// Number of points on the ellipsoid shell.
const SHELL_POINTS: usize = 2400;

/// Builds the deterministic head of one identity.
pub fn make_head(identity_seed: u64) -> ProceduralHead {
    let mut rng = ChaCha8Rng::seed_from_u64(identity_seed);
    let p = HeadParams::sample(&mut rng);
    let [rx, ry, rz] = p.radii;
    let curv_skin = 1.0 / (rx + ry + rz) * 3.0 * 0.5;

    let hinge = Vector3::new(0.0, -0.08, 0.08);
    let mut cranium = PartBuilder::new(PartKind::Cranium, Vector3::zeros());
    let mut hair = PartBuilder::new(PartKind::Hair, Vector3::zeros());
    let mut jaw = PartBuilder::new(PartKind::Jaw, hinge);
    let mouth_y = -0.42 * ry;

    // Fibonacci shell
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let spacing = (4.0 * std::f64::consts::PI * ((rx + ry + rz) / 3.0).powi(2) / SHELL_POINTS as f64).sqrt();
    for k in 0..SHELL_POINTS {
        let y = 1.0 - 2.0 * (k as f64 + 0.5) / SHELL_POINTS as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * k as f64;
        let d = [r * phi.cos(), y, r * phi.sin()];
        let pos = [rx * d[0], ry * d[1], rz * d[2]];
        let n = normalize([d[0] / rx, d[1] / ry, d[2] / rz]);
        let rot = frame_for_normal(n);
        let t = 0.75 * spacing;
        let is_hair =
            pos[1] > (p.hair_line * ry).max(p.eye_height + 0.16) || (pos[2] > 0.1 * rz && pos[1] > -0.35 * ry);
        let is_jaw = pos[1] < mouth_y - 0.02 && pos[2] < 0.05 && !is_hair;
        if is_hair {
            let jitter = rng.random_range(0.9..1.1);
            let pos = pos.map(|c| c * 1.03);
            hair.push(pos, [t * 1.1, t * 1.1, t * 0.5], rot, shade(p.hair.map(|c| c * jitter), n), 0.97, n, curv_skin);
        } else if is_jaw {
            jaw.push(pos, [t, t, t * 0.35], rot, shade(p.skin, n), 0.97, n, curv_skin);
        } else {
            cranium.push(pos, [t, t, t * 0.35], rot, shade(p.skin, n), 0.97, n, curv_skin);
        }
    }

    // mouth interior, slightly inside the shell between the lips
    let mut interior = PartBuilder::new(PartKind::MouthInterior, Vector3::zeros());
    for i in 0..7 {
        for j in 0..4 {
            let x = -0.12 + 0.04 * i as f64;
            let y = mouth_y + 0.01 - 0.035 * j as f64;
            let (s, n) = p.front(x, y);
            let pos = [s[0], s[1], s[2] + 0.05];
            interior.push(pos, [0.03, 0.03, 0.01], frame_for_normal(n), [0.25, 0.05, 0.06], 0.95, n, 0.8);
        }
    }

    // upper lip (static) and lower lip (on the jaw)
    let mut upper = PartBuilder::new(PartKind::UpperLip, Vector3::zeros());
    for i in 0..9 {
        let x = -0.12 + 0.03 * i as f64;
        let bow = 0.012 * (1.0 - (x / 0.13).powi(2));
        let (s, n) = p.front(x, mouth_y + 0.02 + bow);
        let pos = [s[0], s[1], s[2] - 0.012];
        upper.push(pos, [0.022, 0.012, 0.008], frame_for_normal(n), shade(p.lips, n), 0.97, n, 0.6);
        let (s, n) = p.front(x, mouth_y - 0.03 - bow);
        let pos = [s[0], s[1], s[2] - 0.012];
        jaw.push(pos, [0.022, 0.014, 0.008], frame_for_normal(n), shade(p.lips.map(|c| c * 0.92), n), 0.97, n, 0.6);
    }
    let mut corners = Vec::new();
    for (kind, sx) in [(PartKind::MouthCornerLeft, 1.0), (PartKind::MouthCornerRight, -1.0)] {
        let c = Vector3::new(sx * 0.15, mouth_y - 0.005, 0.0);
        let mut b = PartBuilder::new(kind, c);
        for i in 0..4 {
            let x = sx * (0.135 + 0.012 * i as f64);
            let (s, n) = p.front(x, mouth_y - 0.005);
            let pos = [s[0], s[1], s[2] - 0.01];
            b.push(pos, [0.014, 0.012, 0.007], frame_for_normal(n), shade(p.lips.map(|c| c * 0.8), n), 0.95, n, 0.7);
        }
        corners.push(b.part);
    }

    // eyes: isotropic Gaussians (identity rotation) so a vertical scale is exact
    let mut eyes = Vec::new();
    for (kind, sx) in [(PartKind::EyeLeft, 1.0), (PartKind::EyeRight, -1.0)] {
        let (c, n) = p.front(sx * p.eye_spacing, p.eye_height);
        let center = Vector3::new(c[0], c[1], c[2] - 0.015);
        let mut b = PartBuilder::new(kind, center);
        let front = [0.0, 0.0, -1.0];
        for i in 0..5 {
            for j in 0..3 {
                let dx = -0.05 + 0.025 * i as f64;
                let dy = -0.02 + 0.02 * j as f64;
                let pos = [center.x + dx, center.y + dy, center.z];
                b.push(pos, [0.016; 3], Quat::IDENTITY, shade([0.93, 0.92, 0.9], n), 0.97, n, 1.2);
            }
        }
        b.push([center.x, center.y, center.z - 0.012], [0.018; 3], Quat::IDENTITY, p.iris, 0.98, front, 1.5);
        b.push([center.x, center.y, center.z - 0.02], [0.008; 3], Quat::IDENTITY, [0.02; 3], 0.99, front, 2.0);
        eyes.push(b.part);
    }

    // brows
    let mut brows = Vec::new();
    for (kind, sx) in [(PartKind::BrowLeft, 1.0), (PartKind::BrowRight, -1.0)] {
        let mut b = PartBuilder::new(kind, Vector3::zeros());
        for i in 0..6 {
            let x = sx * (p.eye_spacing - 0.06 + 0.024 * i as f64);
            let y = p.eye_height + 0.075 + 0.01 * (1.0 - ((i as f64 - 2.5) / 2.5).powi(2));
            let (s, n) = p.front(x, y);
            let pos = [s[0], s[1], s[2] - 0.012];
            b.push(pos, [0.02, 0.008, 0.006], frame_for_normal(n), shade(p.hair.map(|c| c * 0.6), n), 0.97, n, 0.9);
        }
        brows.push(b.part);
    }

    // nose ridge
    let mut nose = PartBuilder::new(PartKind::Nose, Vector3::zeros());
    for i in 0..8 {
        let f = i as f64 / 7.0;
        let y = p.eye_height - 0.03 - f * p.nose_length;
        let (s, n) = p.front(0.0, y);
        let bump = 0.015 + 0.05 * f;
        let pos = [s[0], s[1], s[2] - bump];
        let w = 0.018 + 0.014 * f;
        let nn = normalize([n[0], n[1] + 0.3, n[2]]);
        nose.push(pos, [w, 0.02, w * 0.8], Quat::IDENTITY, shade(p.skin.map(|c| c * 0.97), nn), 0.97, nn, 1.0);
    }

    let mut parts = vec![cranium.part, hair.part, jaw.part, interior.part, upper.part, nose.part];
    parts.extend(corners);
    parts.extend(eyes);
    parts.extend(brows);
    ProceduralHead { identity_seed, params: p, parts }
}

/// Rig: part transform as an affine function of the (clamped) expression.
pub fn part_transform(kind: PartKind, e: &[f64; EXPR_DIM]) -> PartTransform {
    let mut t = PartTransform::IDENTITY;
    match kind {
        PartKind::Jaw => {
            // negative angle about +x swings the chin down
            t.angle_x = -JAW_ANGLE * e[0];
            t.translation = [JAW_SHIFT * e[1], 0.0, 0.0];
        }
        PartKind::EyeLeft => t.scale = [1.0, 1.0 - BLINK * e[2], 1.0],
        PartKind::EyeRight => t.scale = [1.0, 1.0 - BLINK * e[3], 1.0],
        PartKind::MouthCornerLeft => t.translation = [0.3 * SMILE * e[4], SMILE * e[4], 0.0],
        PartKind::MouthCornerRight => t.translation = [-0.3 * SMILE * e[5], SMILE * e[5], 0.0],
        PartKind::BrowLeft => t.translation = [0.0, BROW * e[6], 0.0],
        PartKind::BrowRight => t.translation = [0.0, BROW * e[7], 0.0],
        _ => {}
    }
    t
}

fn clamp_expression(e: &[f64]) -> ([f64; EXPR_DIM], usize) {
    let mut out = [0.0; EXPR_DIM];
    let mut clamped = 0;
    for (o, &v) in out.iter_mut().zip(e) {
        let c = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
        clamped += usize::from(c != v);
        *o = c;
    }
    (out, clamped)
}

/// Applies the rig and returns the posed Gaussians with their descriptors.
/// Missing trailing components are treated as zero; components outside
/// `[−1, 1]` are clamped and counted.
pub fn pose_head_full(head: &ProceduralHead, e: &[f64]) -> PosedHead {
    let (e, mut clamped) = clamp_expression(e);
    clamped += e.len().saturating_sub(EXPR_DIM);
    let mut out = PosedHead { gaussians: GaussianSet::default(), normals: Vec::new(), curvature: Vec::new(), clamped };
    for part in &head.parts {
        let t = part_transform(part.kind, &e);
        if t == PartTransform::IDENTITY {
            out.gaussians.extend(&part.gaussians);
            out.normals.extend_from_slice(&part.normals);
            out.curvature.extend_from_slice(&part.curvature);
            continue;
        }
        let rot = Quat::from_axis_angle(Vector3::x(), t.angle_x);
        let r = quat_to_rotmat(rot);
        let g = &part.gaussians;
        for i in 0..g.len() {
            let rel = Vector3::from(g.positions[i]) - part.pivot;
            let scaled = Vector3::new(rel.x * t.scale[0], rel.y * t.scale[1], rel.z * t.scale[2]);
            let p = r * scaled + part.pivot + Vector3::from(t.translation);
            out.gaussians.positions.push([p.x, p.y, p.z]);
            // scale applies in the Gaussian's local frame; rig scales only
            // touch identity-rotation parts, so this is exact there
            let s = g.scales[i];
            out.gaussians.scales.push([s[0] * t.scale[0], s[1] * t.scale[1], s[2] * t.scale[2]]);
            let q = rot.mul(Quat::from_array(g.rotations[i])).normalized();
            out.gaussians.rotations.push(q.to_array());
            out.gaussians.colors.push(g.colors[i]);
            out.gaussians.opacities.push(g.opacities[i]);
            let n = r * Vector3::from(part.normals[i]);
            out.normals.push([n.x, n.y, n.z]);
            out.curvature.push(part.curvature[i]);
        }
    }
    out
}

pub fn pose_head(head: &ProceduralHead, e: &[f64]) -> GaussianSet {
    pose_head_full(head, e).gaussians
}

impl ProceduralHead {
    pub fn gaussian_count(&self) -> usize {
        self.parts.iter().map(|p| p.gaussians.len()).sum()
    }

    pub fn part(&self, kind: PartKind) -> Option<&Part> {
        self.parts.iter().find(|p| p.kind == kind)
    }

    /// Index range of a part inside the posed Gaussian set.
    pub fn part_range(&self, kind: PartKind) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for p in &self.parts {
            if p.kind == kind {
                return Some(start..start + p.gaussians.len());
            }
            start += p.gaussians.len();
        }
        None
    }
}
