//! Synthetic camera rig and input-view selection.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Camera;

/// Cameras on elevation rings around the head, all looking at the origin
/// with world `+y` up. Azimuth 0 faces the front of the head (`−z`).
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    /// Elevation of each ring, degrees.
    pub rings: Vec<f64>,
    pub per_ring: usize,
    /// Azimuths span `[−azimuth_span, azimuth_span]` degrees.
    pub azimuth_span: f64,
    /// Cameras with `|azimuth|` above this are never used as inputs.
    pub input_azimuth_max: f64,
    pub radius: f64,
    /// Focal length in units of the image side.
    pub focal_factor: f64,
    /// Camera `i` is held out iff `i % modulus == residue`.
    pub heldout_modulus: usize,
    pub heldout_residue: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            rings: vec![-20.0, 20.0],
            per_ring: 20,
            azimuth_span: 110.0,
            input_azimuth_max: 90.0,
            radius: 2.5,
            focal_factor: 1.14,
            heldout_modulus: 8,
            heldout_residue: 3,
        }
    }
}

/// One camera of the pool with its placement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigCamera {
    pub id: usize,
    pub azimuth: f64,
    pub elevation: f64,
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        if self.rings.is_empty() || self.per_ring < 2 || self.heldout_modulus == 0 {
            return Err(Error::config("camera rig needs rings, at least 2 cameras per ring and a held-out modulus"));
        }
        if !(self.radius > 1.2 && self.focal_factor > 0.0 && self.azimuth_span > 0.0) {
            return Err(Error::config("camera radius must clear the unit ball; focal and span must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rings.len() * self.per_ring
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn placement(&self, id: usize) -> RigCamera {
        let ring = id / self.per_ring;
        let k = id % self.per_ring;
        let azimuth = -self.azimuth_span + 2.0 * self.azimuth_span * k as f64 / (self.per_ring - 1) as f64;
        RigCamera { id, azimuth, elevation: self.rings[ring] }
    }

    /// Unit vector from the origin towards camera `id`.
    pub fn direction(&self, id: usize) -> Vector3<f64> {
        let p = self.placement(id);
        orbit_direction(p.azimuth, p.elevation)
    }

    pub fn camera(&self, id: usize, size: usize) -> Camera {
        let p = self.placement(id);
        self.orbit_camera(p.azimuth, p.elevation, size)
    }

    /// A camera at the rig's radius and focal length looking at the origin
    /// from any azimuth and elevation (degrees).
    pub fn orbit_camera(&self, azimuth: f64, elevation: f64, size: usize) -> Camera {
        Camera::look_at(
            orbit_direction(azimuth, elevation) * self.radius,
            Vector3::zeros(),
            Vector3::y(),
            self.focal_factor * size as f64,
            size,
            size,
        )
    }

    pub fn is_heldout(&self, id: usize) -> bool {
        id % self.heldout_modulus == self.heldout_residue
    }

    /// Cameras that may supervise training.
    pub fn training_pool(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_heldout(i)).collect()
    }

    /// Cameras that may provide input views.
    pub fn input_pool(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !self.is_heldout(i) && self.placement(i).azimuth.abs() <= self.input_azimuth_max + 1e-9)
            .collect()
    }

    pub fn heldout_pool(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_heldout(i)).collect()
    }
}

/// Azimuth 0 looks at the face from −z; positive elevation is above it.
pub fn orbit_direction(azimuth: f64, elevation: f64) -> Vector3<f64> {
    let (az, el) = (azimuth.to_radians(), elevation.to_radians());
    Vector3::new(el.cos() * az.sin(), el.sin(), -el.cos() * az.cos())
}

/// Angle between two unit directions.
pub fn angular_distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

/// Greedy farthest-point selection of `k` entries of `directions`, starting
/// at `start`. Each step adds the entry maximizing the minimum angular
/// distance to the chosen set; ties go to the lowest index. Returns indices
/// into `directions`.
pub fn k_farthest(directions: &[Vector3<f64>], start: usize, k: usize) -> Vec<usize> {
    let k = k.min(directions.len());
    if k == 0 {
        return Vec::new();
    }
    let mut chosen = vec![start];
    let mut nearest: Vec<f64> = directions.iter().map(|d| angular_distance(d, &directions[start])).collect();
    while chosen.len() < k {
        let mut best: Option<usize> = None;
        for (i, &d) in nearest.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|b| d > nearest[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("k is at most the pool size");
        chosen.push(b);
        for (i, n) in nearest.iter_mut().enumerate() {
            *n = n.min(angular_distance(&directions[i], &directions[b]));
        }
    }
    chosen
}

/// Chooses `views` input cameras from `pool`: a random start, `candidate_k`
/// farthest-point candidates, then a uniform subset of those in candidate
/// order.
pub fn sample_viewpoints<R: Rng + ?Sized>(
    rig: &CameraRig,
    pool: &[usize],
    views: usize,
    candidate_k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let k = candidate_k.min(pool.len());
    if views == 0 || views > k {
        return Err(Error::config(format!("cannot pick {views} views from {k} candidates (pool of {})", pool.len())));
    }
    let dirs: Vec<Vector3<f64>> = pool.iter().map(|&i| rig.direction(i)).collect();
    let start = rng.random_range(0..pool.len());
    let cand = k_farthest(&dirs, start, k);
    let mut pick = sample(rng, k, views).into_vec();
    pick.sort_unstable();
    Ok(pick.into_iter().map(|j| pool[cand[j]]).collect())
}
