use crate::error::{Error, Result};
use crate::geometry::{plucker_rays, Camera};

/// Per-view network inputs. All maps are view-major, row-major, channel-last
/// `f32` arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBundle {
    /// Square input resolution.
    pub size: usize,
    /// `V × H × W × 3`, in `[0, 1]`.
    pub images: Vec<f32>,
    /// `V × H × W × 3` canonical-frame points.
    pub positions: Vec<f32>,
    /// `V × H × W`, in `[0, 1]`.
    pub confidence: Vec<f32>,
    /// `V × H_f × W_f × C_f`.
    pub features: Vec<f32>,
    pub feature_size: usize,
    pub feature_channels: usize,
    pub cameras: Vec<Camera>,
}

impl InputBundle {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn pixels_per_view(&self) -> usize {
        self.size * self.size
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.views();
        let n = v * self.pixels_per_view();
        let nf = v * self.feature_size * self.feature_size * self.feature_channels;
        if v == 0
            || self.images.len() != 3 * n
            || self.positions.len() != 3 * n
            || self.confidence.len() != n
            || self.features.len() != nf
        {
            return Err(Error::shape(format!(
                "bundle arrays do not match {v} views of {0}x{0} (features {1}x{1}x{2})",
                self.size, self.feature_size, self.feature_channels
            )));
        }
        for cam in &self.cameras {
            cam.validate()?;
            if cam.width != self.size || cam.height != self.size {
                return Err(Error::shape(format!("camera {}x{} in a {} bundle", cam.width, cam.height, self.size)));
            }
        }
        let finite = |a: &[f32]| a.iter().all(|x| x.is_finite());
        if !(finite(&self.images) && finite(&self.positions) && finite(&self.features)) {
            return Err(Error::InvalidArgument("non-finite bundle values".into()));
        }
        if self.images.iter().chain(&self.confidence).any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument("image or confidence values outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Subset of views, in the given order.
    pub fn select(&self, views: &[usize]) -> InputBundle {
        let n = self.pixels_per_view();
        let nf = self.feature_size * self.feature_size * self.feature_channels;
        let pick = |a: &[f32], k: usize| views.iter().flat_map(|&v| a[v * k..(v + 1) * k].iter().copied()).collect();
        InputBundle {
            size: self.size,
            images: pick(&self.images, 3 * n),
            positions: pick(&self.positions, 3 * n),
            confidence: pick(&self.confidence, n),
            features: pick(&self.features, nf),
            feature_size: self.feature_size,
            feature_channels: self.feature_channels,
            cameras: views.iter().map(|&v| self.cameras[v]).collect(),
        }
    }

    /// Network input grid `V × H × W × 12`: image, position map and the
    /// world-frame Plücker ray `(d, o × d)` of every pixel.
    pub fn input_grid<T: crate::nn::Real>(&self) -> Vec<T> {
        let n = self.pixels_per_view();
        let mut out = Vec::with_capacity(self.views() * n * 12);
        for (v, cam) in self.cameras.iter().enumerate() {
            let pl = plucker_rays(cam);
            for i in 0..n {
                let q = v * n + i;
                out.extend(self.images[3 * q..3 * q + 3].iter().map(|&x| T::from_f64(x as f64)));
                out.extend(self.positions[3 * q..3 * q + 3].iter().map(|&x| T::from_f64(x as f64)));
                out.extend(pl.data[6 * i..6 * i + 6].iter().map(|&x| T::from_f64(x)));
            }
        }
        out
    }
}
