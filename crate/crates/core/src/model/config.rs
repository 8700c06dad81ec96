use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Hyperparameters of the reconstruction model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input views seen during training (inference accepts any count).
    pub views: usize,
    /// Square input resolution `H = W`.
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub self_depth: usize,
    pub cross_depth: usize,
    /// Expression tokens `S`.
    pub expr_tokens: usize,
    /// Expression code width `C_exp`.
    pub expr_dim: usize,
    pub expr_hidden: usize,
    /// Feature-map channels `C_f`.
    pub feature_channels: usize,
    /// Feature-map side `H_f = W_f`.
    pub feature_size: usize,
    /// Confidence threshold `τ`; pixels with `conf > τ` spawn a Gaussian.
    pub tau: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Bound of the predicted position offset.
    pub position_radius: f64,
    /// Standard deviation of the truncated-normal weight init.
    pub init_std: f64,
    /// Initial bias of the scale and opacity channels of the attribute head.
    pub head_scale_bias: f64,
    pub head_opacity_bias: f64,
    /// Window side (in tokens) of the upsampler's local attention.
    pub upsample_window: usize,
}

/// Channels of a raw attribute map: position offset 3, scale 3, rotation 4,
/// color offset 3, opacity 1.
pub const ATTRIBUTE_CHANNELS: usize = 14;
/// Input channels per pixel: image 3, position map 3, Plücker ray 6.
pub const INPUT_CHANNELS: usize = 12;

impl ModelConfig {
    /// Full-scale hyperparameters (documentation preset; not trainable on a desk).
    pub fn paper() -> Self {
        ModelConfig {
            views: 4,
            image_size: 512,
            patch: 8,
            dim: 768,
            heads: 24,
            self_depth: 8,
            cross_depth: 8,
            expr_tokens: 4,
            expr_dim: 256,
            expr_hidden: 256,
            feature_channels: 1920,
            feature_size: 128,
            ..Self::desk()
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            views: 4,
            image_size: 128,
            patch: 8,
            dim: 128,
            heads: 4,
            self_depth: 4,
            cross_depth: 4,
            expr_tokens: 4,
            expr_dim: 8,
            expr_hidden: 256,
            feature_channels: 12,
            feature_size: 32,
            tau: 0.5,
            scale_min: 1e-3,
            scale_max: 0.1,
            position_radius: 0.1,
            init_std: 0.02,
            head_scale_bias: -2.0,
            head_opacity_bias: 0.0,
            upsample_window: 4,
        }
    }

    /// Smallest useful configuration, for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        ModelConfig {
            views: 2,
            image_size: 16,
            patch: 8,
            dim: 16,
            heads: 2,
            self_depth: 1,
            cross_depth: 1,
            expr_hidden: 16,
            feature_size: 4,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(Error::config(format!("unknown model preset {name:?} (paper, desk, tiny)"))),
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return fail(format!("image_size {} is not divisible by patch {}", self.image_size, self.patch));
        }
        if self.self_depth == 0 || self.cross_depth == 0 {
            return fail("self_depth and cross_depth must be at least 1".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if [self.views, self.expr_tokens, self.expr_dim, self.expr_hidden, self.feature_channels, self.feature_size]
            .contains(&0)
            || self.upsample_window == 0
        {
            return fail("counts and sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(self.scale_min > 0.0 && self.scale_max > self.scale_min) {
            return fail(format!("invalid scale bounds [{}, {}]", self.scale_min, self.scale_max));
        }
        let finite = [self.position_radius, self.init_std, self.head_scale_bias, self.head_opacity_bias];
        if !finite.iter().all(|v| v.is_finite()) || self.position_radius < 0.0 || self.init_std < 0.0 {
            return fail("radius, init std and head biases must be finite and non-negative where applicable".into());
        }
        Ok(())
    }

    /// `key=value` lines, one per field, parseable by [`ModelConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("views", self.views.to_string()),
            ("image_size", self.image_size.to_string()),
            ("patch", self.patch.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("self_depth", self.self_depth.to_string()),
            ("cross_depth", self.cross_depth.to_string()),
            ("expr_tokens", self.expr_tokens.to_string()),
            ("expr_dim", self.expr_dim.to_string()),
            ("expr_hidden", self.expr_hidden.to_string()),
            ("feature_channels", self.feature_channels.to_string()),
            ("feature_size", self.feature_size.to_string()),
            ("tau", self.tau.to_string()),
            ("scale_min", self.scale_min.to_string()),
            ("scale_max", self.scale_max.to_string()),
            ("position_radius", self.position_radius.to_string()),
            ("init_std", self.init_std.to_string()),
            ("head_scale_bias", self.head_scale_bias.to_string()),
            ("head_opacity_bias", self.head_opacity_bias.to_string()),
            ("upsample_window", self.upsample_window.to_string()),
        ]
    }

    /// Sets one field from its textual key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "views" => self.views = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "self_depth" => self.self_depth = num(key, value)?,
            "cross_depth" => self.cross_depth = num(key, value)?,
            "expr_tokens" => self.expr_tokens = num(key, value)?,
            "expr_dim" => self.expr_dim = num(key, value)?,
            "expr_hidden" => self.expr_hidden = num(key, value)?,
            "feature_channels" => self.feature_channels = num(key, value)?,
            "feature_size" => self.feature_size = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "scale_min" => self.scale_min = num(key, value)?,
            "scale_max" => self.scale_max = num(key, value)?,
            "position_radius" => self.position_radius = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "head_scale_bias" => self.head_scale_bias = num(key, value)?,
            "head_opacity_bias" => self.head_opacity_bias = num(key, value)?,
            "upsample_window" => self.upsample_window = num(key, value)?,
            _ => return Err(Error::config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored; an optional `preset=` line must come
    /// first and resets every field.
    pub fn overlay(mut self, text: &str) -> Result<Self> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            if k.trim() == "preset" {
                self = Self::preset(v.trim())?;
            } else {
                self.set(k.trim(), v.trim())?;
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// Parses a complete configuration on top of the desk preset.
    pub fn parse(text: &str) -> Result<Self> {
        Self::desk().overlay(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_round_trip() {
        for c in [ModelConfig::paper(), ModelConfig::desk(), ModelConfig::tiny()] {
            c.validate().unwrap();
            assert_eq!(ModelConfig::parse(&c.to_text()).unwrap(), c);
        }
        assert_eq!(ModelConfig::paper().dim / ModelConfig::paper().heads, 32);
        assert_eq!(ModelConfig::desk().dim / ModelConfig::desk().heads, 32);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(ModelConfig::parse("depth=3").is_err());
        assert!(ModelConfig::parse("dim=abc").is_err());
        assert!(ModelConfig::parse("no equals sign").is_err());
        assert!(ModelConfig::parse("image_size=100").is_err());
        assert!(ModelConfig::parse("tau=1.5").is_err());
        let c = ModelConfig::parse("# comment\npreset=tiny\n\ndim=32\n").unwrap();
        assert_eq!((c.dim, c.image_size), (32, 16));
    }
}
