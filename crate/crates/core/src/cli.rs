//! Command-line entry point.
//!
//! Exit status: 0 on success, 1 on runtime failures (including any failed
//! file in `predict`), 2 on usage and configuration errors. Errors are printed
//! as one line, `error[<kind>]: <message>`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::autoencoder::{train_autoencoder, training_corpus, Autoencoder, AE_CHECKPOINT};
use crate::config::{default_checkpoint_dir, Config, Override, CHECKPOINT_DIR_ENV};
use crate::data::{generate_synthetic, load_dataset, read_edge_png, save_dataset, DatasetLayout};
use crate::error::{Error, Result};
use crate::eval::{average_crispness, evaluate, evaluate_protocol, MatchConfig, Protocol, MATCHER_VERSION};
use crate::inference::{collect_inputs, predict_batch, Predictor};
use crate::manifest::RunManifest;
use crate::random;
use crate::train::{ema_checkpoint_path, latest_step, load_denoiser, net_checkpoint_path, DiffusionTrainer};

#[derive(Parser, Debug)]
#[command(name = "latent-edge", version, about = "Crisp edge detection with latent decoupled diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the edge-map autoencoder and write `<run>/ae.ckpt`.
    TrainAe(TrainArgs),
    /// Train the denoiser on latents of the frozen autoencoder in `<run>`.
    TrainDiffusion(TrainDiffusionArgs),
    /// Predict edge maps for a PNG file or a directory of PNGs.
    Predict(PredictArgs),
    /// Score predicted edge maps against ground truth.
    Evaluate(EvaluateArgs),
    /// Write a synthetic paired dataset.
    SynthData(SynthArgs),
    /// Run the analytic invariant checks.
    Selftest,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root (`images/` + `edges/`, or a list file).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory [default: $LATENT_EDGE_CHECKPOINT_DIR].
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LayoutArg::Paired)]
    pub layout: LayoutArg,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainDiffusionArgs {
    #[command(flatten)]
    pub common: TrainArgs,
    /// Overrides `train.iterations`.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LayoutArg {
    Paired,
    List,
}

impl From<LayoutArg> for DatasetLayout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Paired => DatasetLayout::PairedPng,
            LayoutArg::List => DatasetLayout::ListFile,
        }
    }
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Run directory holding `ae.ckpt` and `net_ema_<step>.ckpt`
    /// [default: $LATENT_EDGE_CHECKPOINT_DIR].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Sampling steps [default: from the checkpoint config].
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Windows per forward pass.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Checkpoint step [default: latest].
    #[arg(long)]
    pub step: Option<usize>,
    /// Use the raw weights instead of the EMA weights.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Seval,
    Ceval,
    Both,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of predicted PNGs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth PNGs with matching file names.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 0.0075)]
    pub max_dist_frac: f64,
    #[arg(long, value_enum, default_value_t = ProtocolArg::Both)]
    pub protocol: ProtocolArg,
    #[arg(long, default_value_t = 99)]
    pub thresholds: usize,
    /// Summary path; the per-image table goes next to it.
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long, default_value_t = 160)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Config file for the `[synthetic]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or(&msg)
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return 2;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let kind = match &e {
                Error::Config(_) | Error::InvalidArgument(_) => "config",
                Error::Checkpoint { .. } => "checkpoint",
                Error::Dataset(_) => "dataset",
                Error::NonFiniteLoss { .. } => "nonfinite_loss",
                Error::Image { .. } | Error::Io { .. } => "io",
                Error::ShapeMismatch { .. } | Error::Tensor(_) => "runtime",
            };
            eprintln!("error[{kind}]: {}", one_line(&e.to_string()));
            if kind == "config" {
                2
            } else {
                1
            }
        }
    }
}

fn one_line(s: &str) -> String {
    s.split('\n').map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join("; ")
}

pub fn run(cli: Cli) -> Result<i32> {
    let device = Device::Cpu;
    match cli.command {
        Command::TrainAe(a) => train_ae_cmd(&a, &device),
        Command::TrainDiffusion(a) => train_diffusion_cmd(&a, &device),
        Command::Predict(a) => predict_cmd(&a, &device),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::SynthData(a) => synth_cmd(&a),
        Command::Selftest => {
            let r = crate::selftest::run(&device);
            print!("{}", r.render());
            Ok(if r.failed() == 0 { 0 } else { 1 })
        }
    }
}

fn run_dir(arg: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.clone().or_else(default_checkpoint_dir).ok_or_else(|| {
        Error::Config(format!("no run directory: pass {flag} or set {CHECKPOINT_DIR_ENV}"))
    })
}

/// Loads the config file and applies flag overrides; validates the result.
fn load_config(path: &Option<PathBuf>, flags: Vec<Override>, apply: impl FnOnce(&mut Config)) -> Result<(Config, Vec<Override>)> {
    let (mut cfg, mut overrides) = Config::load_or_default(path.as_deref())?;
    apply(&mut cfg);
    overrides.extend(flags);
    cfg.validate()?;
    Ok((cfg, overrides))
}

fn flag<T: ToString>(key: &str, v: &Option<T>) -> Option<Override> {
    v.as_ref().map(|v| (format!("{key} (flag)"), v.to_string()))
}

fn train_ae_cmd(a: &TrainArgs, device: &Device) -> Result<i32> {
    let (cfg, overrides) = load_config(&a.config, flag("train.seed", &a.seed).into_iter().collect(), |c| {
        if let Some(s) = a.seed {
            c.train.seed = s;
        }
    })?;
    let run = run_dir(&a.run, "--run")?;
    let samples = load_dataset(&a.data, a.layout.into())?;
    RunManifest::new("train-ae", &cfg, cfg.train.seed, &samples, overrides).write_once(&run)?;
    let corpus = training_corpus(&samples, &cfg.augmentation, cfg.ae_training.crop_size, cfg.train.seed)?;
    let start = Instant::now();
    let trained = train_autoencoder(&corpus, &cfg.autoencoder, &cfg.ae_training, cfg.train.seed, device)?;
    let path = run.join(AE_CHECKPOINT);
    trained.autoencoder.save(&trained.store, &path, &trained.epoch_losses)?;
    println!(
        "autoencoder: {} epochs in {:.1}s, final loss {:.5}, latent scale {:.4}, wrote {}",
        trained.epoch_losses.len(),
        start.elapsed().as_secs_f64(),
        trained.epoch_losses.last().copied().unwrap_or(f64::NAN),
        trained.autoencoder.normalization_scale(),
        path.display()
    );
    Ok(0)
}

fn train_diffusion_cmd(a: &TrainDiffusionArgs, device: &Device) -> Result<i32> {
    let c = &a.common;
    let flags = [flag("train.seed", &c.seed), flag("train.iterations", &a.iterations)]
        .into_iter()
        .flatten()
        .collect();
    let (cfg, overrides) = load_config(&c.config, flags, |cfg| {
        if let Some(s) = c.seed {
            cfg.train.seed = s;
        }
        if let Some(n) = a.iterations {
            cfg.train.iterations = n;
        }
    })?;
    let run = run_dir(&c.run, "--run")?;
    let (_ae_store, ae) = Autoencoder::load(&run.join(AE_CHECKPOINT), device)?;
    let samples = load_dataset(&c.data, c.layout.into())?;
    RunManifest::new("train-diffusion", &cfg, cfg.train.seed, &samples, overrides).write_once(&run)?;
    let mut trainer = match (a.resume, latest_step(&run)) {
        (true, Some(step)) => {
            log::info!("resuming from step {step}");
            DiffusionTrainer::resume(&cfg, &ae, &samples, &run, step, device)?
        }
        _ => DiffusionTrainer::new(&cfg, &ae, &samples, device)?,
    };
    let start = Instant::now();
    let total = cfg.train.iterations;
    let logs = trainer.run(Some(&run), |s| {
        if s.step % 50 == 0 || s.step + 1 == total {
            log::info!(
                "step {} lr {:.2e} total {:.5} (f {:.5} n {:.5} wce {:.5}) {:.1}s",
                s.step,
                s.lr,
                s.loss.total,
                s.loss.f_loss,
                s.loss.n_loss,
                s.loss.wce_loss,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "diffusion: {} steps in {:.1}s, now at step {}, wrote {} and {}",
        logs.len(),
        start.elapsed().as_secs_f64(),
        trainer.step(),
        net_checkpoint_path(&run, trainer.step()).display(),
        ema_checkpoint_path(&run, trainer.step()).display()
    );
    Ok(0)
}

fn predict_cmd(a: &PredictArgs, device: &Device) -> Result<i32> {
    if let (Some(w), Some(s)) = (a.window, a.stride) {
        if s == 0 || s > w {
            return Err(Error::Config(format!(
                "tile: need 0 < stride <= window, got stride {s} and window {w}"
            )));
        }
    }
    let run = run_dir(&a.checkpoint, "--checkpoint")?;
    let step = match a.step.or_else(|| latest_step(&run)) {
        Some(s) => s,
        None => {
            return Err(Error::Checkpoint {
                path: run.clone(),
                msg: "no denoiser checkpoints".into(),
            })
        }
    };
    let net_path = if a.raw {
        net_checkpoint_path(&run, step)
    } else {
        ema_checkpoint_path(&run, step)
    };
    let (mut cfg, _net_store, net) = load_denoiser(&net_path, device)?;
    let (_ae_store, ae) = Autoencoder::load(&run.join(AE_CHECKPOINT), device)?;
    if let Some(v) = a.steps {
        cfg.diffusion.num_steps = v;
    }
    if let Some(v) = a.window {
        cfg.tile.window = v;
    }
    if let Some(v) = a.stride {
        cfg.tile.stride = v;
    }
    if let Some(v) = a.seed {
        cfg.tile.seed = v;
    }
    if let Some(v) = a.batch {
        cfg.tile.batch = v;
    }
    cfg.tile.validate()?;
    cfg.diffusion.validate()?;
    let predictor = Predictor {
        ae: &ae,
        net: &net,
        schedule: cfg.diffusion.clone(),
        tile: cfg.tile.clone(),
        device: device.clone(),
    };
    let inputs = collect_inputs(&a.input)?;
    if inputs.is_empty() {
        return Err(Error::Dataset(format!("no PNG inputs under {}", a.input.display())));
    }
    let report = predict_batch(&inputs, &a.output, &predictor)?;
    println!(
        "predict: {} written, {} failed, outputs in {}",
        report.written.len(),
        report.failed.len(),
        a.output.display()
    );
    Ok(if report.failed.is_empty() { 0 } else { 1 })
}

/// `(id, prediction, ground truth)` for every prediction with a same-named
/// ground-truth file.
fn load_eval_pairs(pred_dir: &Path, gt_dir: &Path) -> Result<(Vec<String>, Vec<crate::maps::EdgeMap>, Vec<crate::maps::EdgeMap>)> {
    let mut ids = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for p in collect_inputs(pred_dir)? {
        let name = p.file_name().unwrap_or_default();
        let g = gt_dir.join(name);
        if !g.is_file() {
            log::warn!("no ground truth for {}", p.display());
            continue;
        }
        ids.push(p.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        preds.push(read_edge_png(&p)?);
        gts.push(read_edge_png(&g)?);
    }
    if ids.is_empty() {
        return Err(Error::Dataset(format!(
            "no prediction in {} has a ground truth in {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    Ok((ids, preds, gts))
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<i32> {
    let cfg = MatchConfig {
        max_dist_frac: a.max_dist_frac,
        thresholds: a.thresholds,
        ..Default::default()
    };
    cfg.validate()?;
    let (ids, preds, gts) = load_eval_pairs(&a.pred, &a.gt)?;
    let text = match a.protocol {
        ProtocolArg::Both => {
            let report = evaluate(&preds, &gts, &ids, &cfg)?;
            report.write(&a.report)?;
            report.summary()
        }
        ProtocolArg::Seval | ProtocolArg::Ceval => {
            let protocol = if a.protocol == ProtocolArg::Seval {
                Protocol::SEval
            } else {
                Protocol::CEval
            };
            let r = evaluate_protocol(&preds, &gts, &ids, &cfg, protocol)?;
            let tag = if protocol == Protocol::SEval { "seval" } else { "ceval" };
            let mean_ac = preds.iter().map(average_crispness).sum::<f64>() / preds.len() as f64;
            let summary = format!(
                "matcher = {MATCHER_VERSION}\nmax_dist_frac = {}\nimages = {}\nods_{tag} = {:.6}\nois_{tag} = {:.6}\nods_{tag}_threshold = {:.4}\nmean_ac = {mean_ac:.6}\n",
                cfg.max_dist_frac,
                ids.len(),
                r.ods,
                r.ois,
                r.ods_threshold
            );
            let mut csv = format!("id,{tag}_threshold,{tag}_f\n");
            for s in &r.per_image {
                csv.push_str(&format!("{},{:.4},{:.6}\n", s.id, s.best_threshold, s.best_f));
            }
            if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(&a.report, &summary).map_err(|e| Error::io(&a.report, e))?;
            let stem = a.report.file_stem().unwrap_or_default().to_string_lossy();
            let csv_path = a.report.with_file_name(format!("{stem}_per_image.csv"));
            std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
            summary
        }
    };
    print!("{text}");
    Ok(0)
}

fn synth_cmd(a: &SynthArgs) -> Result<i32> {
    let (cfg, _) = Config::load_or_default(a.config.as_deref())?;
    let mut rng = random::generator(a.seed, 0);
    let samples = generate_synthetic(a.n, a.size, &cfg.synthetic, &mut rng)?;
    save_dataset(&a.out, &samples)?;
    println!("synth-data: {} samples of {}x{} in {}", samples.len(), a.size, a.size, a.out.display());
    Ok(0)
}
