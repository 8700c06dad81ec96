//! `splathead` command-line tool: dataset generation, training, inference,
//! animation, evaluation and splat export. Every subcommand reads and writes
//! plain files; formats are described in FORMATS.md.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use splathead::image::Image;
use splathead::loss::{format_report, view_metrics};
use splathead::nn::Checkpoint;
use splathead::render::{rasterize, write_splats, GaussianSet};
use splathead::synth::maps::BACKGROUND;
use splathead::synth::{
    read_sample, write_dataset, CameraRig, DatasetConfig, DiskSamples, Manifest, SceneSample, Split,
};
use splathead::train::{evaluate, TrainConfig, Trainer, LOG_HEADER};

#[derive(Parser, Debug)]
#[command(name = "splathead", version, about = "Animatable sparse-view Gaussian head reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (sample files plus manifest.txt).
    GenData(GenDataArgs),
    /// Train a reconstructor on a generated dataset.
    Train(TrainArgs),
    /// Reconstruct one sample: splat file plus renders at its supervision cameras.
    Reconstruct(ReconstructArgs),
    /// Render an expression sweep from a ring of orbit cameras.
    Animate(AnimateArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Write the reconstructed Gaussians of one sample as a SPLATV01 file.
    ExportSplats(ExportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Dataset config or existing manifest to take settings from.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of training identities.
    #[arg(long)]
    identities: Option<usize>,
    /// Number of held-out identities.
    #[arg(long)]
    heldout_identities: Option<usize>,
    /// Dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra dataset key, repeatable; applied after the file, before the flags above.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config file (`key=value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; its config is used and --config is ignored.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total number of steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Training seed; must match the checkpoint on resume.
    #[arg(long)]
    seed: Option<u64>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Extra config key, repeatable; applied after the file, before the flags above.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// Checkpoint file (CKPTV01).
    #[arg(long)]
    ckpt: PathBuf,
    /// A SAMPV01 sample file.
    #[arg(long)]
    sample: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Store the source-view index of every Gaussian in the splat file.
    #[arg(long)]
    tags: bool,
}

#[derive(Args, Debug)]
struct AnimateArgs {
    /// Checkpoint file (CKPTV01).
    #[arg(long)]
    ckpt: PathBuf,
    /// A SAMPV01 sample file.
    #[arg(long)]
    sample: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `A:B:N`: N codes interpolated from A to B. A and B are `target`,
    /// `neutral`, `input<k>` or comma-separated code values.
    #[arg(long, default_value = "target:target:1", value_parser = parse_sweep)]
    expr_sweep: Sweep,
    /// Number of orbit cameras.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    orbit: u32,
    /// Orbit half-span in degrees of azimuth.
    #[arg(long, default_value_t = 60.0)]
    orbit_span: f64,
    /// Orbit elevation in degrees.
    #[arg(long, default_value_t = 0.0)]
    elevation: f64,
    /// Render side length; defaults to the sample's supervision size.
    #[arg(long)]
    size: Option<usize>,
    /// Also write the Gaussians of every sweep step.
    #[arg(long)]
    splats: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file (CKPTV01).
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// train, val or heldout.
    #[arg(long, default_value = "heldout", value_parser = parse_split)]
    split: Split,
    /// Score only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Report file; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint file (CKPTV01).
    #[arg(long)]
    ckpt: PathBuf,
    /// A SAMPV01 sample file.
    #[arg(long)]
    sample: PathBuf,
    /// Output SPLATV01 file.
    #[arg(long)]
    out: PathBuf,
    /// Store the source-view index of every Gaussian.
    #[arg(long)]
    tags: bool,
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

/// One endpoint of an expression sweep.
#[derive(Clone, Debug, PartialEq)]
enum ExprSpec {
    Target,
    Neutral,
    Input(usize),
    Code(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
struct Sweep {
    from: ExprSpec,
    to: ExprSpec,
    steps: usize,
}

fn parse_expr(s: &str) -> std::result::Result<ExprSpec, String> {
    match s {
        "target" => Ok(ExprSpec::Target),
        "neutral" => Ok(ExprSpec::Neutral),
        _ => {
            if let Some(k) = s.strip_prefix("input") {
                return k.parse().map(ExprSpec::Input).map_err(|_| format!("bad input view in {s:?}"));
            }
            s.split(',')
                .map(|v| v.trim().parse::<f32>().map_err(|_| format!("bad expression value {v:?}")))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(ExprSpec::Code)
        }
    }
}

fn parse_sweep(s: &str) -> std::result::Result<Sweep, String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected A:B:N, got {s:?}"));
    }
    let steps: usize = parts[2].parse().map_err(|_| format!("bad count {:?}", parts[2]))?;
    if steps == 0 {
        return Err("the sweep needs at least one step".into());
    }
    Ok(Sweep { from: parse_expr(parts[0])?, to: parse_expr(parts[1])?, steps })
}

fn resolve_expr(spec: &ExprSpec, sample: &SceneSample) -> Result<Vec<f32>> {
    let dim = sample.target_expression.len();
    let code = match spec {
        ExprSpec::Target => sample.target_expression.clone(),
        ExprSpec::Neutral => vec![0.0; dim],
        ExprSpec::Input(k) => sample
            .input_expressions
            .get(*k)
            .cloned()
            .with_context(|| format!("sample has {} input views, no input{k}", sample.input_expressions.len()))?,
        ExprSpec::Code(v) => v.clone(),
    };
    if code.len() != dim {
        bail!("expression code has {} values, the model expects {dim}", code.len());
    }
    Ok(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Animate(a) => animate(a),
        Command::Eval(a) => eval(a),
        Command::ExportSplats(a) => export_splats(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.manifest {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Manifest::parse(&text).with_context(|| format!("parsing {}", p.display()))?.config
        }
        None => DatasetConfig::default(),
    };
    for (k, v) in &a.set {
        if !cfg.set(k, v)? {
            bail!("unknown dataset key {k:?}");
        }
    }
    if let Some(n) = a.identities {
        cfg.identities = n;
    }
    if let Some(n) = a.heldout_identities {
        cfg.heldout_identities = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let m = write_dataset(&a.out, &cfg)?;
    println!("wrote {} samples to {}", m.entries.len(), a.out.display());
    Ok(())
}

fn load_trainer(path: &Path) -> Result<Trainer> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let ckpt = Checkpoint::read_from(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    Ok(Trainer::from_checkpoint(&ckpt)?)
}

fn load_sample(path: &Path) -> Result<SceneSample> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_sample(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn save_checkpoint(t: &Trainer, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    t.checkpoint().write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_image(img: &Image, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    img.write_ppm(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_splat_file(set: &GaussianSet, tags: bool, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_splats(set, tags, &mut w)?;
    w.flush()?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut cfg, resumed) = match &a.resume {
        Some(p) => {
            if a.set.iter().any(|(k, _)| k.starts_with("model.")) {
                bail!("model keys cannot change when resuming");
            }
            let t = load_trainer(p)?;
            (t.config.clone(), Some(t))
        }
        None => {
            let mut cfg = TrainConfig::default();
            if let Some(p) = &a.config {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                cfg = cfg.overlay(&text).with_context(|| format!("parsing {}", p.display()))?;
            }
            (cfg, None)
        }
    };
    for (k, v) in &a.set {
        cfg.set(k, v)?;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        if resumed.is_some() && s != cfg.seed {
            bail!("--seed differs from the checkpoint's seed {}", cfg.seed);
        }
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate()?;
    let resuming = resumed.is_some();
    let mut trainer = match resumed {
        Some(mut t) => {
            t.config = cfg;
            t
        }
        None => Trainer::new(cfg)?,
    };

    let (manifest, train_set) = DiskSamples::open(&a.data, Split::Train)?;
    trainer.config.check_dataset(&manifest.config)?;
    let val = if trainer.config.eval_every > 0 {
        let (_, v) = DiskSamples::open(&a.data, Split::Val)?;
        let n = (trainer.config.eval_samples as usize).min(v.len());
        (0..n).map(|i| v.get(i)).collect::<splathead::Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.txt"), trainer.config.to_text())?;
    let log_path = a.out.join("train.log");
    let mut log = if resuming {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        let mut f = File::create(&log_path)?;
        writeln!(f, "{LOG_HEADER}")?;
        f
    };
    let mut eval_log = None;
    if !val.is_empty() {
        let path = a.out.join("eval.log");
        let mut f =
            if resuming { OpenOptions::new().create(true).append(true).open(&path)? } else { File::create(&path)? };
        if !resuming {
            writeln!(f, "# step psnr ssim l1")?;
        }
        eval_log = Some(f);
    }

    let out = a.out.clone();
    trainer.run(&train_set, |t, r| {
        writeln!(log, "{}", r.log_line())?;
        let every = t.config.checkpoint_every;
        if every > 0 && r.step % every == 0 {
            save_checkpoint(t, &out.join(format!("ckpt_{:08}.ckpt", r.step))).map_err(io_error)?;
        }
        if let Some(f) = eval_log.as_mut() {
            if r.step % t.config.eval_every == 0 {
                let report = evaluate(&t.model, &t.state.store, &val)?;
                if let Some((p, s, l)) = report.mean() {
                    writeln!(f, "{} {p:.4} {s:.6} {l:.6}", r.step)?;
                }
            }
        }
        if r.step % 10 == 0 || r.step == t.config.steps {
            eprintln!("step {} loss {:.5}", r.step, r.loss);
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&trainer, &a.out.join("final.ckpt"))?;
    println!(
        "trained to step {} ({} skipped); checkpoint {}",
        trainer.state.step,
        trainer.state.skipped_steps,
        a.out.join("final.ckpt").display()
    );
    Ok(())
}

fn io_error(e: anyhow::Error) -> splathead::Error {
    splathead::Error::Io(std::io::Error::other(format!("{e:#}")))
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let t = load_trainer(&a.ckpt)?;
    let sample = load_sample(&a.sample)?;
    let (set, _) = t.model.reconstruct(&t.state.store, &sample.bundle, &sample.target_expression)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_splat_file(&set, a.tags, &a.out.join("splats.splat"))?;
    let mut rows = Vec::new();
    for (v, cam) in sample.supervision_cameras.iter().enumerate() {
        let id = sample.supervision_camera_ids[v];
        let img = rasterize(&set, cam, BACKGROUND)?.image;
        write_image(&img, &a.out.join(format!("view_{v:02}_cam{id:03}.ppm")))?;
        rows.push(view_metrics(id, &img, &sample.supervision_image(v))?);
    }
    fs::write(a.out.join("metrics.txt"), format_report(&rows))?;
    println!("{} gaussians, {} views written to {}", set.len(), rows.len(), a.out.display());
    Ok(())
}

fn animate(a: AnimateArgs) -> Result<()> {
    let t = load_trainer(&a.ckpt)?;
    let sample = load_sample(&a.sample)?;
    let from = resolve_expr(&a.expr_sweep.from, &sample)?;
    let to = resolve_expr(&a.expr_sweep.to, &sample)?;
    let size = a.size.unwrap_or(sample.supervision_size);
    if size == 0 {
        bail!("render size must be positive");
    }
    let rig = CameraRig::default();
    let m = a.orbit as usize;
    let cameras: Vec<_> = (0..m)
        .map(|j| {
            let az = if m == 1 { 0.0 } else { -a.orbit_span + 2.0 * a.orbit_span * j as f64 / (m - 1) as f64 };
            rig.orbit_camera(az, a.elevation, size)
        })
        .collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let n = a.expr_sweep.steps;
    for i in 0..n {
        let w = if n == 1 { 0.0 } else { i as f32 / (n - 1) as f32 };
        let code: Vec<f32> = from.iter().zip(&to).map(|(&x, &y)| x + (y - x) * w).collect();
        let (set, _) = t.model.reconstruct(&t.state.store, &sample.bundle, &code)?;
        if a.splats {
            write_splat_file(&set, false, &a.out.join(format!("expr_{i:03}.splat")))?;
        }
        for (j, cam) in cameras.iter().enumerate() {
            let img = rasterize(&set, cam, BACKGROUND)?.image;
            write_image(&img, &a.out.join(format!("frame_e{i:03}_c{j:03}.ppm")))?;
        }
    }
    println!("{} frames written to {}", n * m, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let t = load_trainer(&a.ckpt)?;
    let (_, disk) = DiskSamples::open(&a.data, a.split)?;
    if disk.is_empty() {
        bail!("split {} has no samples in {}", a.split.name(), a.data.display());
    }
    let n = a.limit.unwrap_or(disk.len()).min(disk.len());
    let samples = (0..n).map(|i| disk.get(i)).collect::<splathead::Result<Vec<_>>>()?;
    let report = evaluate(&t.model, &t.state.store, &samples)?;
    let text = report.to_text();
    match &a.out {
        Some(p) => fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn export_splats(a: ExportArgs) -> Result<()> {
    let t = load_trainer(&a.ckpt)?;
    let sample = load_sample(&a.sample)?;
    let (set, _) = t.model.reconstruct(&t.state.store, &sample.bundle, &sample.target_expression)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_splat_file(&set, a.tags, &a.out)?;
    println!("{} gaussians written to {}", set.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_specs_parse() {
        let s = parse_sweep("target:neutral:5").unwrap();
        assert_eq!((s.from, s.to, s.steps), (ExprSpec::Target, ExprSpec::Neutral, 5));
        let s = parse_sweep("input2:0,1,0.5:2").unwrap();
        assert_eq!(s.from, ExprSpec::Input(2));
        assert_eq!(s.to, ExprSpec::Code(vec![0.0, 1.0, 0.5]));
        for bad in ["target:neutral", "target:neutral:0", "x:target:2", "target:target:two"] {
            assert!(parse_sweep(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
