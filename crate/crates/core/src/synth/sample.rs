//! Deterministic training and evaluation samples.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::Image;
use crate::model::InputBundle;
use crate::synth::cameras::{sample_viewpoints, CameraRig};
use crate::synth::head::{make_head, pose_head_full, PosedHead, ProceduralHead, EXPR_DIM};
use crate::synth::maps::{feature_map, position_and_confidence, render_ground_truth, FEATURE_CHANNELS};

pub const GENERATOR_VERSION: &str = "splathead-synth-1";

/// Everything that determines a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Training identities.
    pub identities: usize,
    /// Identities never seen in training.
    pub heldout_identities: usize,
    pub expressions_per_identity: usize,
    pub views: usize,
    pub input_size: usize,
    pub supervision_size: usize,
    /// Supervision views of a training sample.
    pub supervision_views: usize,
    pub feature_size: usize,
    pub sigma_pos: f64,
    /// Probability that an input view shows an expression other than the target.
    pub p_inc: f64,
    pub candidate_k: usize,
    pub rig: CameraRig,
    /// Samples written per identity by the dataset writer.
    pub samples_per_identity: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            identities: 64,
            heldout_identities: 8,
            expressions_per_identity: 8,
            views: 4,
            input_size: 128,
            supervision_size: 160,
            supervision_views: 8,
            feature_size: 32,
            sigma_pos: 0.01,
            p_inc: 0.0,
            candidate_k: 10,
            rig: CameraRig::default(),
            samples_per_identity: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    /// Training identities, training cameras, pooled expressions.
    Train,
    /// Training identities and pooled expressions seen from held-out cameras.
    Val,
    /// Held-out identities with fresh expressions, seen from held-out cameras.
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Heldout => "heldout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "heldout" => Ok(Split::Heldout),
            _ => Err(Error::config(format!("unknown split {s:?} (train, val, heldout)"))),
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Heldout => 3,
        }
    }
}

/// Per-call overrides of the sampling policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub p_inc: f64,
    pub views: usize,
}

/// One generated sample: the network inputs plus supervision renders of the
/// target expression.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub split: Split,
    pub index: u64,
    pub identity: u32,
    /// Target expression `e*`, also the expression code fed to the model.
    pub target_expression: Vec<f32>,
    /// Expression shown in each input view.
    pub input_expressions: Vec<Vec<f32>>,
    pub input_camera_ids: Vec<u32>,
    pub bundle: InputBundle,
    pub supervision_camera_ids: Vec<u32>,
    pub supervision_cameras: Vec<Camera>,
    pub supervision_size: usize,
    /// `S × H_s × W_s × 3`.
    pub supervision: Vec<f32>,
}

impl SceneSample {
    pub fn supervision_views(&self) -> usize {
        self.supervision_cameras.len()
    }

    pub fn supervision_image(&self, view: usize) -> Image {
        let n = self.supervision_size * self.supervision_size * 3;
        Image::from_f32(self.supervision_size, self.supervision_size, &self.supervision[view * n..(view + 1) * n])
            .expect("supervision layout")
    }

    pub fn is_consistent(&self) -> bool {
        self.input_expressions.iter().all(|e| *e == self.target_expression)
    }
}

/// splitmix64 finalizer
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc ^ mix(p)))
}

/// Uniform expression inside the rig's natural range: jaw opening and
/// blinks in `[0, 1]`, the rest in `[−1, 1]`.
pub fn random_expression<R: Rng + ?Sized>(rng: &mut R) -> Vec<f32> {
    (0..EXPR_DIM)
        .map(|k| match k {
            0 | 2 | 3 => rng.random_range(0.0..1.0f32),
            _ => rng.random_range(-1.0..1.0f32),
        })
        .collect()
}

fn distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// `count` well-spread expressions: farthest-point selection among 64
/// random candidates, starting from the first.
pub fn expression_pool(seed: u64, count: usize) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cands: Vec<Vec<f32>> = (0..64.max(count)).map(|_| random_expression(&mut rng)).collect();
    let mut chosen = vec![0usize];
    while chosen.len() < count {
        let (best, _) = cands
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .map(|(i, c)| (i, chosen.iter().map(|&j| distance(c, &cands[j])).fold(f32::INFINITY, f32::min)))
            .fold((usize::MAX, -1.0), |b, x| if x.1 > b.1 { x } else { b });
        chosen.push(best);
    }
    chosen.truncate(count);
    chosen.into_iter().map(|i| cands[i].clone()).collect()
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        if self.identities == 0 || self.expressions_per_identity == 0 || self.views == 0 {
            return Err(Error::config("identities, expressions and views must be positive"));
        }
        if self.input_size == 0 || self.supervision_size == 0 || self.feature_size == 0 || self.supervision_views == 0 {
            return Err(Error::config("image sizes and supervision views must be positive"));
        }
        if !self.input_size.is_multiple_of(self.feature_size) {
            return Err(Error::config("feature_size must divide input_size"));
        }
        if !(0.0..=1.0).contains(&self.p_inc) || !(self.sigma_pos >= 0.0 && self.sigma_pos.is_finite()) {
            return Err(Error::config("p_inc must lie in [0, 1] and sigma_pos be finite and non-negative"));
        }
        if self.views > self.candidate_k || self.candidate_k > self.rig.input_pool().len() {
            return Err(Error::config(format!(
                "need views {} <= candidate_k {} <= input pool {}",
                self.views,
                self.candidate_k,
                self.rig.input_pool().len()
            )));
        }
        if self.supervision_views > self.rig.training_pool().len() {
            return Err(Error::config("more supervision views than training cameras"));
        }
        Ok(())
    }

    pub fn identity_seed(&self, identity: usize) -> u64 {
        derive_seed(&[self.seed, 0x1D, identity as u64])
    }

    pub fn identity_count(&self, split: Split) -> usize {
        match split {
            Split::Train | Split::Val => self.identities,
            Split::Heldout => self.heldout_identities,
        }
    }

    pub fn default_options(&self) -> SampleOptions {
        SampleOptions { p_inc: self.p_inc, views: self.views }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let r = &self.rig;
        let rings: Vec<String> = r.rings.iter().map(|v| v.to_string()).collect();
        vec![
            ("generator", GENERATOR_VERSION.to_string()),
            ("seed", self.seed.to_string()),
            ("identities", self.identities.to_string()),
            ("heldout_identities", self.heldout_identities.to_string()),
            ("expressions_per_identity", self.expressions_per_identity.to_string()),
            ("views", self.views.to_string()),
            ("input_size", self.input_size.to_string()),
            ("supervision_size", self.supervision_size.to_string()),
            ("supervision_views", self.supervision_views.to_string()),
            ("feature_size", self.feature_size.to_string()),
            ("sigma_pos", self.sigma_pos.to_string()),
            ("p_inc", self.p_inc.to_string()),
            ("candidate_k", self.candidate_k.to_string()),
            ("samples_per_identity", self.samples_per_identity.to_string()),
            ("camera_rings", rings.join(",")),
            ("cameras_per_ring", r.per_ring.to_string()),
            ("azimuth_span", r.azimuth_span.to_string()),
            ("input_azimuth_max", r.input_azimuth_max.to_string()),
            ("camera_radius", r.radius.to_string()),
            ("focal_factor", r.focal_factor.to_string()),
            ("heldout_camera_modulus", r.heldout_modulus.to_string()),
            ("heldout_camera_residue", r.heldout_residue.to_string()),
        ]
    }

    /// Sets one field from its textual key. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
        }
        let r = &mut self.rig;
        match key {
            "generator" => {
                if value != GENERATOR_VERSION {
                    return Err(Error::config(format!("unsupported generator {value:?}")));
                }
            }
            "seed" => self.seed = num(key, value)?,
            "identities" => self.identities = num(key, value)?,
            "heldout_identities" => self.heldout_identities = num(key, value)?,
            "expressions_per_identity" => self.expressions_per_identity = num(key, value)?,
            "views" => self.views = num(key, value)?,
            "input_size" => self.input_size = num(key, value)?,
            "supervision_size" => self.supervision_size = num(key, value)?,
            "supervision_views" => self.supervision_views = num(key, value)?,
            "feature_size" => self.feature_size = num(key, value)?,
            "sigma_pos" => self.sigma_pos = num(key, value)?,
            "p_inc" => self.p_inc = num(key, value)?,
            "candidate_k" => self.candidate_k = num(key, value)?,
            "samples_per_identity" => self.samples_per_identity = num(key, value)?,
            "camera_rings" => {
                r.rings = value.split(',').map(|v| num(key, v)).collect::<Result<Vec<f64>>>()?;
            }
            "cameras_per_ring" => r.per_ring = num(key, value)?,
            "azimuth_span" => r.azimuth_span = num(key, value)?,
            "input_azimuth_max" => r.input_azimuth_max = num(key, value)?,
            "camera_radius" => r.radius = num(key, value)?,
            "focal_factor" => r.focal_factor = num(key, value)?,
            "heldout_camera_modulus" => r.heldout_modulus = num(key, value)?,
            "heldout_camera_residue" => r.heldout_residue = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses `key=value` lines on top of the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = DatasetConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            if !c.set(k.trim(), v.trim())? {
                return Err(Error::config(format!("unknown dataset key {:?}", k.trim())));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Procedural dataset: heads and expression pools are built once, samples
/// are rendered on demand and depend only on `(config, split, index)`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    heads: Vec<ProceduralHead>,
    pools: Vec<Vec<Vec<f32>>>,
}

fn to_f64(e: &[f32]) -> Vec<f64> {
    e.iter().map(|&v| v as f64).collect()
}

impl Dataset {
    pub fn new(config: DatasetConfig) -> Result<Self> {
        config.validate()?;
        let total = config.identities + config.heldout_identities;
        let heads = (0..total).map(|i| make_head(config.identity_seed(i))).collect();
        let pools = (0..total)
            .map(|i| expression_pool(derive_seed(&[config.seed, 0xE9, i as u64]), config.expressions_per_identity))
            .collect();
        Ok(Dataset { config, heads, pools })
    }

    /// Global identity index (held-out identities follow the training ones).
    pub fn identity_for(&self, split: Split, index: u64) -> usize {
        let n = self.config.identity_count(split).max(1) as u64;
        let local = (index % n) as usize;
        match split {
            Split::Heldout => self.config.identities + local,
            _ => local,
        }
    }

    pub fn head(&self, identity: usize) -> &ProceduralHead {
        &self.heads[identity]
    }

    pub fn expression_pool(&self, identity: usize) -> &[Vec<f32>] {
        &self.pools[identity]
    }

    pub fn pose(&self, identity: usize, expression: &[f32]) -> PosedHead {
        pose_head_full(&self.heads[identity], &to_f64(expression))
    }

    /// Ground-truth render of camera `camera_id` at `size`.
    pub fn render(&self, identity: usize, expression: &[f32], camera_id: usize, size: usize) -> Result<Image> {
        render_ground_truth(&self.pose(identity, expression), &self.config.rig.camera(camera_id, size))
    }

    /// Input bundle with per-view expressions.
    pub fn input_bundle<R: Rng + ?Sized>(
        &self,
        identity: usize,
        expressions: &[Vec<f32>],
        camera_ids: &[usize],
        rng: &mut R,
    ) -> Result<InputBundle> {
        if expressions.len() != camera_ids.len() {
            return Err(Error::shape("one expression per input view"));
        }
        let c = &self.config;
        let (s, fs) = (c.input_size, c.feature_size);
        let mut b = InputBundle {
            size: s,
            images: Vec::with_capacity(camera_ids.len() * s * s * 3),
            positions: Vec::with_capacity(camera_ids.len() * s * s * 3),
            confidence: Vec::with_capacity(camera_ids.len() * s * s),
            features: Vec::with_capacity(camera_ids.len() * fs * fs * FEATURE_CHANNELS),
            feature_size: fs,
            feature_channels: FEATURE_CHANNELS,
            cameras: Vec::with_capacity(camera_ids.len()),
        };
        for (e, &id) in expressions.iter().zip(camera_ids) {
            let posed = self.pose(identity, e);
            let cam = c.rig.camera(id, s);
            b.images.extend(render_ground_truth(&posed, &cam)?.to_f32());
            let (pos, conf) = position_and_confidence(&posed, &cam, c.sigma_pos, rng)?;
            b.positions.extend(pos.to_f32());
            b.confidence.extend(conf.iter().map(|&v| v as f32));
            b.features.extend(feature_map(&posed, &cam, fs)?);
            b.cameras.push(cam);
        }
        Ok(b)
    }

    pub fn sample(&self, split: Split, index: u64) -> Result<SceneSample> {
        self.sample_with(split, index, &self.config.default_options())
    }

    pub fn sample_with(&self, split: Split, index: u64, opts: &SampleOptions) -> Result<SceneSample> {
        let c = &self.config;
        if self.config.identity_count(split) == 0 {
            return Err(Error::config(format!("split {} has no identities", split.name())));
        }
        if !(0.0..=1.0).contains(&opts.p_inc) || opts.views == 0 || opts.views > c.candidate_k {
            return Err(Error::config(format!("invalid sample options {opts:?}")));
        }
        let identity = self.identity_for(split, index);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[c.seed, split.tag(), index]));
        let pool = &self.pools[identity];
        let fresh = split == Split::Heldout;
        let target_slot = rng.random_range(0..pool.len());
        let target = if fresh { random_expression(&mut rng) } else { pool[target_slot].clone() };
        let input_ids = sample_viewpoints(&c.rig, &c.rig.input_pool(), opts.views, c.candidate_k, &mut rng)?;
        let input_expressions: Vec<Vec<f32>> = (0..opts.views)
            .map(|_| {
                let other = rng.random_bool(opts.p_inc);
                if !other {
                    target.clone()
                } else if fresh || pool.len() < 2 {
                    random_expression(&mut rng)
                } else {
                    // uniform over the pool without the target
                    let k = rng.random_range(0..pool.len() - 1);
                    pool[if k >= target_slot { k + 1 } else { k }].clone()
                }
            })
            .collect();
        let sup_ids: Vec<usize> = match split {
            Split::Train => {
                let tp = c.rig.training_pool();
                let mut idx = rand::seq::index::sample(&mut rng, tp.len(), c.supervision_views).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| tp[i]).collect()
            }
            _ => c.rig.heldout_pool(),
        };
        let bundle = self.input_bundle(identity, &input_expressions, &input_ids, &mut rng)?;
        let posed = self.pose(identity, &target);
        let mut supervision = Vec::with_capacity(sup_ids.len() * c.supervision_size * c.supervision_size * 3);
        let mut sup_cams = Vec::with_capacity(sup_ids.len());
        for &id in &sup_ids {
            let cam = c.rig.camera(id, c.supervision_size);
            supervision.extend(render_ground_truth(&posed, &cam)?.to_f32());
            sup_cams.push(cam);
        }
        Ok(SceneSample {
            split,
            index,
            identity: identity as u32,
            target_expression: target,
            input_expressions,
            input_camera_ids: input_ids.iter().map(|&i| i as u32).collect(),
            bundle,
            supervision_camera_ids: sup_ids.iter().map(|&i| i as u32).collect(),
            supervision_cameras: sup_cams,
            supervision_size: c.supervision_size,
            supervision,
        })
    }
}
