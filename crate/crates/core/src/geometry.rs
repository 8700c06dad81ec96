//! Camera model, Plücker rays, quaternion algebra and the perspective (EWA)
//! projection of 3D Gaussians.
//!
//! Conventions, used everywhere in the crate:
//!
//! * camera space is right-handed with +x right, +y down and +z forward;
//! * a pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)` in continuous
//!   image coordinates, and the principal point `(cx, cy)` is expressed in the
//!   same continuous coordinates;
//! * a camera stores the world-to-camera transform `p_cam = R p_world + t`;
//! * quaternions are stored `(w, x, y, z)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

/// Camera-space depth below which a Gaussian is culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Isotropic low-pass added to every projected 2D covariance, in pixel².
pub const LOW_PASS: f64 = 0.3;

/// Unit quaternion `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotmat(m: &Matrix3<f64>) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s)
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new((m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s)
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new((m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s)
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat::new((m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s)
        };
        q.normalized()
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        Quat::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn mul(self, rhs: Quat) -> Quat {
        let (a, b) = (self, rhs);
        Quat::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

/// Rotation matrix of a quaternion. Non-unit input is renormalized silently.
pub fn quat_to_rotmat(q: Quat) -> Matrix3<f64> {
    let Quat { w, x, y, z } = q.normalized();
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back to the raw (possibly
/// non-unit) quaternion it was built from, including the normalization.
pub fn quat_to_rotmat_backward(q: Quat, d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = q.norm();
    let u = q.normalized();
    let (w, x, y, z) = (u.w, u.x, u.y, u.z);
    let g = d_rot;
    // d R / d(w, x, y, z) contracted with g, for the unit quaternion.
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    // through u = q / |q|: d/dq = (I - u u^T) / |q| applied to d/du
    let du = [dw, dx, dy, dz];
    let uu = [w, x, y, z];
    let dot: f64 = du.iter().zip(uu.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (du[i] - uu[i] * dot) / n;
    }
    out
}

/// `Σ = R diag(s)² Rᵀ`.
pub fn build_covariance(scale: [f64; 3], rotation: Quat) -> Matrix3<f64> {
    let m = quat_to_rotmat(rotation) * Matrix3::from_diagonal(&Vector3::from(scale));
    m * m.transpose()
}

/// Pinhole camera with a world-to-camera pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Quat,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `eye` looking at `target`; `up` is the world up direction,
    /// which maps to image-space "up" (camera −y).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        // rows of the world-to-camera rotation are the camera axes in world space
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let translation = -(rot * eye);
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 * 0.5,
            cy: height as f64 * 0.5,
            rotation: Quat::from_rotmat(&rot),
            translation,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && (self.rotation.norm() - 1.0).abs() <= 1e-6
            && self.translation.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidCamera(format!("{self:?}")))
        }
    }

    pub fn rotmat(&self) -> Matrix3<f64> {
        quat_to_rotmat(self.rotation)
    }

    /// Camera center in world coordinates.
    pub fn origin(&self) -> Vector3<f64> {
        -(self.rotmat().transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotmat() * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotmat().transpose() * (p - self.translation)
    }

    /// Pixel coordinates of a camera-space point (no culling).
    pub fn project_camera_point(&self, t: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy)
    }

    /// Rescales intrinsics for a different output resolution with the same
    /// field of view.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy, width, height, ..*self }
    }

    /// World-space unit direction through continuous pixel coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotmat().transpose() * d).normalize()
    }

    /// World point at camera-space depth `z` along the ray through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let t = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        self.camera_to_world(&t)
    }
}

/// Per-pixel Plücker coordinates `(d, m)` with `m = o × d`, row-major
/// `height × width × 6`.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl PluckerMap {
    pub fn at(&self, x: usize, y: usize) -> ([f64; 3], [f64; 3]) {
        let o = (y * self.width + x) * 6;
        let d = &self.data[o..o + 6];
        ([d[0], d[1], d[2]], [d[3], d[4], d[5]])
    }
}

pub fn plucker_rays(camera: &Camera) -> PluckerMap {
    let origin = camera.origin();
    let rt = camera.rotmat().transpose();
    let mut data = Vec::with_capacity(camera.width * camera.height * 6);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let dc =
                Vector3::new((x as f64 + 0.5 - camera.cx) / camera.fx, (y as f64 + 0.5 - camera.cy) / camera.fy, 1.0);
            let d = (rt * dc).normalize();
            let m = origin.cross(&d);
            data.extend_from_slice(&[d.x, d.y, d.z, m.x, m.y, m.z]);
        }
    }
    PluckerMap { width: camera.width, height: camera.height, data }
}

/// A single renderable 3D Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    pub scale: [f64; 3],
    pub rotation: Quat,
    pub color: [f64; 3],
    pub opacity: f64,
}

/// Screen-space footprint of a Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected2D {
    pub mean2d: Vector2<f64>,
    /// Covariance including the low-pass term.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Intermediates of a projection that the backward pass needs.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionCache {
    pub cam_point: Vector3<f64>,
    /// `J W`, the linearized world-to-pixel map.
    pub jw: Matrix2x3<f64>,
    pub cov3d: Matrix3<f64>,
}

/// Gradients of a projected Gaussian pulled back to its 3D attributes.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProjectionGrad {
    pub position: Vector3<f64>,
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
}

/// Perspective projection of a Gaussian. `None` when the mean lies in front
/// of the near plane (the Gaussian is culled).
pub fn project_gaussian(
    position: &Vector3<f64>,
    scale: [f64; 3],
    rotation: Quat,
    camera: &Camera,
) -> Option<(Projected2D, ProjectionCache)> {
    let w = camera.rotmat();
    let t = w * position + camera.translation;
    if t.z <= NEAR_PLANE {
        return None;
    }
    let (tz, tz2) = (t.z, t.z * t.z);
    let j = Matrix2x3::new(camera.fx / tz, 0.0, -camera.fx * t.x / tz2, 0.0, camera.fy / tz, -camera.fy * t.y / tz2);
    let jw = j * w;
    let cov3d = build_covariance(scale, rotation);
    let mut cov2d = jw * cov3d * jw.transpose();
    // exact symmetry regardless of rounding in the triple product
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += LOW_PASS;
    cov2d[(1, 1)] += LOW_PASS;
    Some((
        Projected2D { mean2d: camera.project_camera_point(&t), cov2d, depth: tz },
        ProjectionCache { cam_point: t, jw, cov3d },
    ))
}

/// Pulls gradients w.r.t. `mean2d` and `cov2d` (full symmetric matrix
/// gradient) back to position, scale and raw rotation.
pub fn project_gaussian_backward(
    scale: [f64; 3],
    rotation: Quat,
    camera: &Camera,
    cache: &ProjectionCache,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> ProjectionGrad {
    let w = camera.rotmat();
    let t = cache.cam_point;
    let (fx, fy) = (camera.fx, camera.fy);
    let (tz, tz2, tz3) = (t.z, t.z * t.z, t.z * t.z * t.z);

    // covariance branch
    let d_cov3d = cache.jw.transpose() * d_cov2d * cache.jw;
    let d_jw = 2.0 * d_cov2d * cache.jw * cache.cov3d;
    let d_j = d_jw * w.transpose();

    let r = quat_to_rotmat(rotation);
    let s = Matrix3::from_diagonal(&Vector3::from(scale));
    let m = r * s;
    let d_m = 2.0 * d_cov3d * m;
    let mut d_scale = [0.0; 3];
    for k in 0..3 {
        d_scale[k] = (0..3).map(|i| d_m[(i, k)] * r[(i, k)]).sum();
    }
    let d_r = d_m * s;
    let d_rot = quat_to_rotmat_backward(rotation, &d_r);

    // camera-space point: through J and through the mean
    let mut dt = Vector3::zeros();
    dt.x += d_j[(0, 2)] * (-fx / tz2);
    dt.y += d_j[(1, 2)] * (-fy / tz2);
    dt.z += d_j[(0, 0)] * (-fx / tz2)
        + d_j[(0, 2)] * (2.0 * fx * t.x / tz3)
        + d_j[(1, 1)] * (-fy / tz2)
        + d_j[(1, 2)] * (2.0 * fy * t.y / tz3);
    dt.x += d_mean2d.x * fx / tz;
    dt.y += d_mean2d.y * fy / tz;
    dt.z += -d_mean2d.x * fx * t.x / tz2 - d_mean2d.y * fy * t.y / tz2;

    ProjectionGrad { position: w.transpose() * dt, scale: d_scale, rotation: d_rot }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn axis_camera(origin: Vector3<f64>) -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            rotation: Quat::IDENTITY,
            translation: -origin,
            width: 64,
            height: 64,
        }
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-2)
            .prop_map(|(a, b, c, d)| Quat::new(a, b, c, d).normalized())
    }

    #[test]
    fn origin_camera_principal_ray_has_zero_moment() {
        // pixel (31, 31) has center (31.5, 31.5); move the principal point onto it
        let mut cam = axis_camera(Vector3::zeros());
        cam.cx = 31.5;
        cam.cy = 31.5;
        let map = plucker_rays(&cam);
        let (d, m) = map.at(31, 31);
        assert!((d[0]).abs() < 1e-12 && (d[1]).abs() < 1e-12 && (d[2] - 1.0).abs() < 1e-12);
        assert!(m.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn shifted_camera_moment() {
        let mut cam = axis_camera(Vector3::new(1.0, 0.0, 0.0));
        cam.cx = 31.5;
        cam.cy = 31.5;
        let (d, m) = plucker_rays(&cam).at(31, 31);
        assert!((d[2] - 1.0).abs() < 1e-12);
        assert!((m[0]).abs() < 1e-12 && (m[1] + 1.0).abs() < 1e-12 && m[2].abs() < 1e-12);
    }

    #[test]
    fn plucker_constraints_hold_for_look_at_cameras() {
        for k in 0..8 {
            let a = k as f64 * 0.7;
            let eye = Vector3::new(2.5 * a.sin(), 0.4 * a.cos(), 2.5 * a.cos());
            let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 80.0, 24, 20);
            cam.validate().unwrap();
            let map = plucker_rays(&cam);
            for px in map.data.chunks(6) {
                let d = Vector3::new(px[0], px[1], px[2]);
                let m = Vector3::new(px[3], px[4], px[5]);
                assert!((d.norm() - 1.0).abs() < 1e-6);
                assert!(d.dot(&m).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn look_at_points_principal_ray_at_target() {
        let eye = Vector3::new(1.0, 0.5, 2.0);
        let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 50.0, 32, 32);
        let t = cam.world_to_camera(&Vector3::zeros());
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12 && (t.z - eye.norm()).abs() < 1e-12);
        assert!((cam.origin() - eye).norm() < 1e-12);
        // world up projects upwards in the image
        let up = cam.world_to_camera(&Vector3::new(0.0, 0.1, 0.0));
        assert!(cam.project_camera_point(&up).y < cam.cy);
    }

    #[test]
    fn identity_and_quarter_turn() {
        assert_eq!(quat_to_rotmat(Quat::IDENTITY), Matrix3::identity());
        let q = Quat::from_axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        let v = quat_to_rotmat(q) * Vector3::x();
        assert!((v - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn non_unit_quaternion_is_renormalized() {
        let q = Quat::new(2.0, 0.0, 0.0, 2.0);
        let r = quat_to_rotmat(q);
        let v = r * Vector3::x();
        assert!((v - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn diagonal_covariance_for_identity_rotation() {
        let c = build_covariance([1.0, 2.0, 3.0], Quat::IDENTITY);
        assert_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn rotmat_roundtrip_through_quaternion() {
        let q = Quat::new(0.3, -0.5, 0.1, 0.8).normalized();
        let back = Quat::from_rotmat(&quat_to_rotmat(q));
        let same = (back.to_array().iter().zip(q.to_array()).all(|(a, b)| (a - b).abs() < 1e-12))
            || (back.to_array().iter().zip(q.to_array()).all(|(a, b)| (a + b).abs() < 1e-12));
        assert!(same);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn rotmat_is_orthonormal_and_double_covered(q in arb_quat()) {
            let r = quat_to_rotmat(q);
            prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-6);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-6);
            let neg = Quat::new(-q.w, -q.x, -q.y, -q.z);
            prop_assert!((quat_to_rotmat(neg) - r).abs().max() < 1e-12);
        }

        #[test]
        fn covariance_is_symmetric_psd_with_squared_scale_spectrum(
            q in arb_quat(),
            s in (0.01..3.0f64, 0.01..3.0f64, 0.01..3.0f64),
        ) {
            let s = [s.0, s.1, s.2];
            let c = build_covariance(s, q);
            prop_assert!((c - c.transpose()).abs().max() < 1e-12);
            let mut eig: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut sq: Vec<f64> = s.iter().map(|v| v * v).collect();
            sq.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e, t) in eig.iter().zip(sq) {
                prop_assert!(*e >= -1e-12);
                prop_assert!((e - t).abs() < 1e-9 * (1.0 + t));
            }
        }
    }

    #[test]
    fn on_axis_projection_closed_form() {
        let cam = axis_camera(Vector3::zeros());
        let (z, sigma) = (4.0, 0.2);
        let (p, _) = project_gaussian(&Vector3::new(0.0, 0.0, z), [sigma; 3], Quat::IDENTITY, &cam).unwrap();
        assert!((p.mean2d - Vector2::new(cam.cx, cam.cy)).norm() < 1e-12);
        let expect = (cam.fx * sigma / z).powi(2) + LOW_PASS;
        assert!((p.cov2d[(0, 0)] - expect).abs() < 1e-9);
        assert!((p.cov2d[(1, 1)] - expect).abs() < 1e-9);
        assert!(p.cov2d[(0, 1)].abs() < 1e-12);
        assert_eq!(p.depth, z);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(Vector3::zeros());
        assert!(project_gaussian(&Vector3::new(0.0, 0.0, -1.0), [0.1; 3], Quat::IDENTITY, &cam).is_none());
        assert!(project_gaussian(&Vector3::new(0.0, 0.0, 0.005), [0.1; 3], Quat::IDENTITY, &cam).is_none());
    }

    #[test]
    fn mean_jacobian_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let eye = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), 3.0);
            let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 60.0, 64, 48);
            let mu =
                Vector3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8));
            let (_, cache) = project_gaussian(&mu, [0.1; 3], Quat::IDENTITY, &cam).unwrap();
            let h = 1e-4;
            for k in 0..3 {
                let mut a = mu;
                let mut b = mu;
                a[k] += h;
                b[k] -= h;
                let pa = project_gaussian(&a, [0.1; 3], Quat::IDENTITY, &cam).unwrap().0.mean2d;
                let pb = project_gaussian(&b, [0.1; 3], Quat::IDENTITY, &cam).unwrap().0.mean2d;
                let fd = (pa - pb) / (2.0 * h);
                let col = cache.jw.column(k);
                for r in 0..2 {
                    let rel = (fd[r] - col[r]).abs() / col[r].abs().max(fd[r].abs()).max(1e-3);
                    assert!(rel < 1e-4, "component {r},{k}: fd {} vs analytic {}", fd[r], col[r]);
                }
            }
        }
    }

    #[test]
    fn projection_backward_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let eye = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), 2.5);
            let cam = Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 70.0, 64, 64);
            let mu =
                Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let s = [rng.random_range(0.02..0.3), rng.random_range(0.02..0.3), rng.random_range(0.02..0.3)];
            let q = Quat::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let gm = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let off = rng.random_range(-1.0..1.0);
            let gc = Matrix2::new(rng.random_range(-1.0..1.0), off, off, rng.random_range(-1.0..1.0));
            let objective = |mu: &Vector3<f64>, s: [f64; 3], q: Quat| {
                let (p, _) = project_gaussian(mu, s, q, &cam).unwrap();
                gm.dot(&p.mean2d) + gc.component_mul(&p.cov2d).sum()
            };
            let (_, cache) = project_gaussian(&mu, s, q, &cam).unwrap();
            let g = project_gaussian_backward(s, q, &cam, &cache, &gm, &gc);
            let h = 1e-5;
            let check = |fd: f64, an: f64| {
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "fd {fd} vs analytic {an}");
            };
            for k in 0..3 {
                let (mut a, mut b) = (mu, mu);
                a[k] += h;
                b[k] -= h;
                check((objective(&a, s, q) - objective(&b, s, q)) / (2.0 * h), g.position[k]);
                let (mut sa, mut sb) = (s, s);
                sa[k] += h;
                sb[k] -= h;
                check((objective(&mu, sa, q) - objective(&mu, sb, q)) / (2.0 * h), g.scale[k]);
            }
            for k in 0..4 {
                let (mut qa, mut qb) = (q.to_array(), q.to_array());
                qa[k] += h;
                qb[k] -= h;
                let fd =
                    (objective(&mu, s, Quat::from_array(qa)) - objective(&mu, s, Quat::from_array(qb))) / (2.0 * h);
                check(fd, g.rotation[k]);
            }
        }
    }
}
