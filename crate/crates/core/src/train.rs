//! Training loop: sample, reconstruct, render every supervision view,
//! photometric loss, backpropagate through rasterizer and network, Adam.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{format_report, photometric_loss, view_metrics, LossWeights, ViewMetrics};
use crate::model::{assemble_backward, assemble_gaussians, ModelConfig, Reconstructor};
use crate::nn::{adam_step, AdamConfig, Checkpoint, ParamStore};
use crate::render::{rasterize, rasterize_backward, GaussianGradients};
use crate::synth::format::DiskSamples;
use crate::synth::head::EXPR_DIM;
use crate::synth::maps::{BACKGROUND, FEATURE_CHANNELS};
use crate::synth::sample::{derive_seed, Dataset, DatasetConfig, SampleOptions, SceneSample, Split};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: u64,
    pub lr: f64,
    pub grad_clip: f64,
    pub loss: LossWeights,
    /// Step from which the (inert) perceptual term would be enabled.
    pub lpips_start_step: u64,
    pub views: usize,
    pub supervision_views: usize,
    pub p_inc: f64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Zero disables periodic evaluation.
    pub eval_every: u64,
    /// Validation samples per periodic evaluation.
    pub eval_samples: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            seed: 0,
            steps: 20_000,
            lr: 5e-5,
            grad_clip: 1.0,
            loss: LossWeights::default(),
            lpips_start_step: 3_000_000,
            views: 4,
            supervision_views: 8,
            p_inc: 0.0,
            checkpoint_every: 1000,
            eval_every: 0,
            eval_samples: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite() && self.grad_clip > 0.0) {
            return Err(Error::config("lr and grad_clip must be positive"));
        }
        if self.steps == 0 || self.views == 0 || self.supervision_views == 0 {
            return Err(Error::config("steps, views and supervision_views must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_inc) {
            return Err(Error::config("p_inc must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Rejects a dataset whose samples this config cannot consume as stored.
    pub fn check_dataset(&self, data: &DatasetConfig) -> Result<()> {
        let m = &self.model;
        let pairs = [
            ("views", self.views as f64, data.views as f64),
            ("supervision_views", self.supervision_views as f64, data.supervision_views as f64),
            ("p_inc", self.p_inc, data.p_inc),
            ("model.image_size", m.image_size as f64, data.input_size as f64),
            ("model.feature_size", m.feature_size as f64, data.feature_size as f64),
            ("model.feature_channels", m.feature_channels as f64, FEATURE_CHANNELS as f64),
            ("model.expr_dim", m.expr_dim as f64, EXPR_DIM as f64),
        ];
        for (key, ours, theirs) in pairs {
            if ours != theirs {
                return Err(Error::config(format!("{key}={ours} but the dataset was generated with {theirs}")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions { p_inc: self.p_inc, views: self.views }
    }

    /// `key=value` text; model keys carry a `model.` prefix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.loss;
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", self.lr.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("loss_l1", l.l1.to_string()),
            ("loss_ssim", l.ssim.to_string()),
            ("loss_lpips", l.lpips.to_string()),
            ("lpips_start_step", self.lpips_start_step.to_string()),
            ("views", self.views.to_string()),
            ("supervision_views", self.supervision_views.to_string()),
            ("p_inc", self.p_inc.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        for line in self.model.to_text().lines() {
            writeln!(s, "model.{line}").unwrap();
        }
        s
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
        }
        if let Some(mk) = key.strip_prefix("model.") {
            if mk == "preset" {
                self.model = ModelConfig::preset(value)?;
                return Ok(());
            }
            return self.model.set(mk, value);
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "loss_l1" => self.loss.l1 = num(key, value)?,
            "loss_ssim" => self.loss.ssim = num(key, value)?,
            "loss_lpips" => self.loss.lpips = num(key, value)?,
            "lpips_start_step" => self.lpips_start_step = num(key, value)?,
            "views" => self.views = num(key, value)?,
            "supervision_views" => self.supervision_views = num(key, value)?,
            "p_inc" => self.p_inc = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "eval_samples" => self.eval_samples = num(key, value)?,
            _ => return Err(Error::config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines (blank and `#` lines ignored) and validates.
    pub fn overlay(mut self, text: &str) -> Result<Self> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::default().overlay(text)
    }
}

/// Indexed access to training samples.
pub trait SampleSource {
    fn len(&self) -> u64;
    fn get(&self, index: u64) -> Result<SceneSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples rendered on demand from a procedural dataset.
pub struct GeneratedSamples<'a> {
    pub dataset: &'a Dataset,
    pub split: Split,
    pub options: SampleOptions,
    /// Number of distinct indices.
    pub count: u64,
}

impl SampleSource for GeneratedSamples<'_> {
    fn len(&self) -> u64 {
        self.count
    }

    fn get(&self, index: u64) -> Result<SceneSample> {
        self.dataset.sample_with(self.split, index, &self.options)
    }
}

impl SampleSource for DiskSamples {
    fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    fn get(&self, index: u64) -> Result<SceneSample> {
        DiskSamples::get(self, index as usize)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub store: ParamStore<f32>,
    /// Steps whose update was skipped because of a non-finite loss or gradient.
    pub skipped_steps: u64,
    /// Exponential moving average of the loss (factor 0.99), from the first
    /// finite step on.
    pub loss_ema: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Step number after the update (1-based).
    pub step: u64,
    pub loss: f64,
    pub l1: f64,
    /// Weighted `1 − SSIM` contribution.
    pub ssim_term: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub skipped: bool,
    pub gaussians: usize,
    /// Images touched: inputs plus rendered supervision views.
    pub images: usize,
    pub wallclock_ms: f64,
}

impl StepReport {
    /// `step loss l1 ssim_term grad_norm wallclock_ms`
    pub fn log_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.1}",
            self.step, self.loss, self.l1, self.ssim_term, self.grad_norm, self.wallclock_ms
        )
    }
}

pub const LOG_HEADER: &str = "# step loss l1 ssim_term grad_norm wallclock_ms";

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Reconstructor,
    pub state: TrainState,
}

/// Loss, its parts and the accumulated Gaussian gradients of one prediction
/// against all supervision views (averaged over views).
struct Supervised {
    loss: f64,
    l1: f64,
    ssim_term: f64,
    grads: GaussianGradients,
}

fn supervise(set: &crate::render::GaussianSet, sample: &SceneSample, weights: &LossWeights) -> Result<Supervised> {
    let s = sample.supervision_views();
    if s == 0 {
        return Err(Error::InvalidArgument("sample has no supervision views".into()));
    }
    let inv = 1.0 / s as f64;
    let mut out = Supervised { loss: 0.0, l1: 0.0, ssim_term: 0.0, grads: GaussianGradients::zeros(set.len()) };
    for (v, cam) in sample.supervision_cameras.iter().enumerate() {
        let gt = sample.supervision_image(v);
        let fwd = rasterize(set, cam, BACKGROUND)?;
        let lo = photometric_loss(&fwd.image, &gt, weights)?;
        out.loss += lo.total * inv;
        out.l1 += lo.l1 * inv;
        out.ssim_term += weights.ssim * (1.0 - lo.ssim) * inv;
        let d = Image { data: lo.grad.data.iter().map(|g| g * inv).collect(), ..lo.grad };
        let g = rasterize_backward(set, cam, BACKGROUND, &fwd, &d)?;
        out.grads.add_scaled(&g, 1.0);
    }
    Ok(out)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = Reconstructor::new::<f32>(&config.model, config.seed)?;
        Ok(Trainer { config, model, state: TrainState { step: 0, store, skipped_steps: 0, loss_ema: None } })
    }

    /// Index of the sample used at `step`.
    pub fn sample_index(&self, step: u64, len: u64) -> u64 {
        derive_seed(&[self.config.seed, 0x7A, step]) % len.max(1)
    }

    /// One optimization step on `sample`.
    pub fn train_step(&mut self, sample: &SceneSample) -> Result<StepReport> {
        let t0 = Instant::now();
        let cfg = &self.config;
        let store = &mut self.state.store;
        let bundle = &sample.bundle;
        let (maps, tape) = self.model.predict_maps::<f32>(store, bundle, &sample.target_expression)?;
        let (set, record) = assemble_gaussians(&maps, bundle, &cfg.model);
        let sup = supervise(&set, sample, &cfg.loss)?;
        let d_maps = assemble_backward(&maps, &record, bundle, &cfg.model, &sup.grads);
        let mut grads = store.zero_grads();
        self.model.backward(store, &mut grads, &tape, &d_maps);
        let grad_norm = grads.global_norm();
        let finite = sup.loss.is_finite() && grads.all_finite() && grad_norm.is_finite();
        if finite {
            if grad_norm > cfg.grad_clip {
                grads.scale((cfg.grad_clip / grad_norm) as f32);
            }
            adam_step(store, &grads, &cfg.adam())?;
            self.state.loss_ema = Some(self.state.loss_ema.map_or(sup.loss, |e| 0.99 * e + 0.01 * sup.loss));
        } else {
            self.state.skipped_steps += 1;
        }
        self.state.step += 1;
        Ok(StepReport {
            step: self.state.step,
            loss: sup.loss,
            l1: sup.l1,
            ssim_term: sup.ssim_term,
            grad_norm,
            skipped: !finite,
            gaussians: set.len(),
            images: bundle.views() + sample.supervision_views(),
            wallclock_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs steps until `config.steps`, calling `on_step` after each one.
    pub fn run<S: SampleSource + ?Sized>(
        &mut self,
        source: &S,
        mut on_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<()> {
        if source.is_empty() {
            return Err(Error::config("training source is empty"));
        }
        while self.state.step < self.config.steps {
            let sample = source.get(self.sample_index(self.state.step, source.len()))?;
            let report = self.train_step(&sample)?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = self.config.to_text();
        if let Some(e) = self.state.loss_ema {
            writeln!(meta, "state.loss_ema_bits={:016x}", e.to_bits()).unwrap();
        }
        let mut c = Checkpoint {
            global_step: self.state.step,
            seed: self.config.seed,
            skipped_updates: 0,
            meta,
            tensors: Vec::new(),
        };
        c.push_store(&self.state.store);
        c.skipped_updates = self.state.skipped_steps;
        c
    }

    /// Rebuilds a trainer (config, weights, optimizer and counters) from a
    /// checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut cfg_text = String::new();
        let mut ema = None;
        for line in ckpt.meta.lines() {
            match line.strip_prefix("state.loss_ema_bits=") {
                Some(hex) => {
                    ema = Some(f64::from_bits(
                        u64::from_str_radix(hex, 16).map_err(|_| Error::corrupt("checkpoint", "bad loss_ema_bits"))?,
                    ))
                }
                None => {
                    cfg_text.push_str(line);
                    cfg_text.push('\n');
                }
            }
        }
        let config = TrainConfig::parse(&cfg_text).map_err(|e| Error::corrupt("checkpoint", e.to_string()))?;
        let mut t = Trainer::new(config)?;
        ckpt.load_store(&mut t.state.store)?;
        t.state.step = ckpt.global_step;
        t.state.skipped_steps = ckpt.skipped_updates;
        t.state.loss_ema = ema;
        Ok(t)
    }

    /// Renders the model's prediction at every supervision camera of `sample`.
    pub fn render_views(&self, sample: &SceneSample) -> Result<Vec<Image>> {
        render_prediction(&self.model, &self.state.store, sample)
    }
}

pub fn render_prediction(model: &Reconstructor, store: &ParamStore<f32>, sample: &SceneSample) -> Result<Vec<Image>> {
    let (set, _) = model.reconstruct(store, &sample.bundle, &sample.target_expression)?;
    sample.supervision_cameras.iter().map(|c| Ok(rasterize(&set, c, BACKGROUND)?.image)).collect()
}

/// Per-view metrics of one evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub sample: u64,
    pub identity: u32,
    pub metrics: ViewMetrics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn metrics(&self) -> Vec<ViewMetrics> {
        self.rows.iter().map(|r| r.metrics).collect()
    }

    /// `(psnr, ssim, l1)` means over every evaluated view.
    pub fn mean(&self) -> Option<(f64, f64, f64)> {
        crate::loss::aggregate(&self.metrics())
    }

    /// Mean metrics per identity, sorted by identity.
    pub fn per_identity(&self) -> Vec<(u32, (f64, f64, f64))> {
        let mut ids: Vec<u32> = self.rows.iter().map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .map(|id| {
                let m: Vec<ViewMetrics> = self.rows.iter().filter(|r| r.identity == id).map(|r| r.metrics).collect();
                (id, crate::loss::aggregate(&m).expect("non-empty"))
            })
            .collect()
    }

    /// Metric report: per sample a `# sample <index> identity <id>` comment
    /// followed by `view_id psnr ssim l1` rows, then one
    /// `identity <id> psnr ssim l1` line per identity and a final `mean` line.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# view_id psnr ssim l1\n");
        let mut i = 0;
        while i < self.rows.len() {
            let r = &self.rows[i];
            writeln!(s, "# sample {} identity {}", r.sample, r.identity).unwrap();
            let j = (i..self.rows.len()).find(|&j| self.rows[j].sample != r.sample).unwrap_or(self.rows.len());
            let block: Vec<ViewMetrics> = self.rows[i..j].iter().map(|r| r.metrics).collect();
            // rows only; the shared header and mean come from this report
            for line in format_report(&block).lines().skip(1).filter(|l| !l.starts_with("mean")) {
                writeln!(s, "{line}").unwrap();
            }
            i = j;
        }
        for (id, (p, q, l)) in self.per_identity() {
            writeln!(s, "identity {id} {p:.4} {q:.6} {l:.6}").unwrap();
        }
        if let Some((p, q, l)) = self.mean() {
            writeln!(s, "mean {p:.4} {q:.6} {l:.6}").unwrap();
        }
        s
    }
}

/// Renders every supervision view of every sample and scores it. Pure with
/// respect to the model and store.
pub fn evaluate<'a, I>(model: &Reconstructor, store: &ParamStore<f32>, samples: I) -> Result<EvalReport>
where
    I: IntoIterator<Item = &'a SceneSample>,
{
    let mut report = EvalReport::default();
    for s in samples {
        let views = render_prediction(model, store, s)?;
        for (v, img) in views.iter().enumerate() {
            let m = view_metrics(s.supervision_camera_ids[v], img, &s.supervision_image(v))?;
            report.rows.push(EvalRow { sample: s.index, identity: s.identity, metrics: m });
        }
    }
    Ok(report)
}
