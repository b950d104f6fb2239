//! Command-line interface: argument definitions and subcommand dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use fldr_core::data_eval::{EvalMode, DEFAULT_SCENE_THRESHOLD};
use fldr_core::synthetic::{make_synthetic_dataset, Triplet};
use fldr_core::training::{calibrate_temperature, grad_check, train, ModelCheckpoint, TrainConfig};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_basis, save_checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_dataset, save_dataset};
use crate::error::{FldrError, Result};
use crate::io::BitDepth;

/// Environment variable consulted when no seed is given on the command line or in the config file.
pub const SEED_ENV: &str = "FLDR_SEED";

#[derive(Debug, Parser)]
#[command(name = "fldr", version, about = "Frame interpolation on block-PCA compressed frames")]
pub struct Cli {
    /// Flat TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Interpolate every consecutive pair of a frame directory.
    Interpolate(InterpolateArgs),
    /// Train a model on a triplet dataset directory.
    Train(TrainArgs),
    /// Fit the fusion temperature of a trained checkpoint.
    Calibrate(CalibrateArgs),
    /// Score a checkpoint on a frame directory split into scenes.
    Eval(EvalArgs),
    /// Reconstruction accuracy of the block projection for several block sizes.
    PcaStudy(StudyArgs),
    /// Compare analytic gradients with finite differences in float64.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic translation triplet dataset.
    MakeData(MakeDataArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Depth {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

impl From<Depth> for BitDepth {
    fn from(d: Depth) -> Self {
        match d {
            Depth::Eight => BitDepth::Eight,
            Depth::Sixteen => BitDepth::Sixteen,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    /// 9-frame clips, 7 consecutive targets.
    S,
    /// 17-frame clips, targets at every second frame.
    L,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    /// Input frame directory (PNG/PPM, lexicographic order).
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Output directory for `frame_%06d.png`.
    #[arg(long = "out", value_name = "DIR")]
    pub output: PathBuf,
    /// Temporal upsampling factor N: N−1 frames per pair.
    #[arg(long, default_value_t = 2)]
    pub factor: usize,
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Coarsest pyramid level at test time (defaults to the training value).
    #[arg(long)]
    pub scales: Option<usize>,
    #[arg(long, value_enum, default_value = "8")]
    pub depth: Depth,
    /// Also write flow, weight-map and warped-candidate images.
    #[arg(long)]
    pub diagnostics: bool,
    /// Frame pairs processed concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training triplet directory (see `make-data`).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Validation triplet directory.
    #[arg(long, value_name = "DIR")]
    pub val: PathBuf,
    /// Output checkpoint.
    #[arg(long = "out", value_name = "FILE")]
    pub output: PathBuf,
    /// Image for the initial projection basis (default: first training frame).
    #[arg(long, value_name = "FILE")]
    pub init_image: Option<PathBuf>,
    /// Also export the trained basis.
    #[arg(long, value_name = "FILE")]
    pub export_basis: Option<PathBuf>,
    /// JSON training history.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunConfig,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub val: PathBuf,
    #[arg(long = "out", value_name = "FILE")]
    pub output: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunConfig,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "s")]
    pub mode: Mode,
    /// Scene cut threshold on the mean absolute difference of consecutive frames.
    #[arg(long, default_value_t = DEFAULT_SCENE_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub scales: Option<usize>,
    /// JSON report; a table is written beside it with extension `.txt`.
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Image the bases are computed from.
    #[arg(long, value_name = "FILE")]
    pub image: PathBuf,
    /// Compression ratio k/d².
    #[arg(long, default_value_t = 0.25)]
    pub r: f64,
    /// Block sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    pub d: Vec<usize>,
    /// Images the reconstruction is measured on (default: the study image).
    #[arg(long, value_name = "DIR")]
    pub held_out: Option<PathBuf>,
    /// Output directory for `study.json`, `study.txt` and `study.png`.
    #[arg(long = "out", value_name = "DIR")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Checkpoint to check (default: a fresh seeded model).
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    /// Side of the synthetic probe triplet.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Coordinates checked per parameter group.
    #[arg(long, default_value_t = 8)]
    pub per_group: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Relative error reported as acceptable.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    #[arg(long = "out", value_name = "DIR")]
    pub output: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    /// Side length of the square frames.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Largest displacement between the outer frames, in pixels.
    #[arg(long, default_value_t = 10.0)]
    pub max_disp: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| FldrError::usage(format_args!("{SEED_ENV}={v:?} is not an integer"))),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: flag, then config file, then the environment, then 0.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    Ok(match flag.or(file) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

/// Config file overlaid with flags and the seed fallback, then validated.
fn resolve_train_config(cli: &Cli, flags: &RunConfig) -> Result<TrainConfig> {
    let file = load_run_config(cli.config.as_deref())?;
    let merged = file.overlay(flags);
    let mut cfg = merged.resolve();
    cfg.seed = resolve_seed(flags.seed, file.seed)?;
    cfg.validate()?;
    log::info!("resolved config:\n{}", RunConfig::from_train(&cfg).to_toml());
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FldrError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("reports serialise");
    std::fs::write(path, text + "\n").map_err(|e| FldrError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| FldrError::io(path, e))
}

fn check_samples(set: &[Triplet<f32>], cfg: &TrainConfig, what: &Path) -> Result<()> {
    let align = fldr_core::pipeline::alignment(cfg.d, cfg.scales);
    if set.is_empty() {
        return Err(FldrError::data(format_args!("{}: dataset is empty", what.display())));
    }
    for s in set {
        let (_, h, w) = s.i0.chw();
        if h % align != 0 || w % align != 0 {
            return Err(FldrError::data(format_args!("{}: {h}x{w} samples are not multiples of {align}", what.display())));
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Interpolate(a) => interpolate(a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Calibrate(a) => calibrate(&cli, a),
        Command::Eval(a) => eval(a),
        Command::PcaStudy(a) => study(a),
        Command::Gradcheck(a) => gradcheck(&cli, a),
        Command::MakeData(a) => make_data(&cli, a),
    }
}

fn interpolate(a: &InterpolateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let opts = crate::sequence::SequenceOptions {
        factor: a.factor,
        scales: a.scales.unwrap_or(ckpt.config.scales),
        depth: a.depth.into(),
        diagnostics: a.diagnostics,
        jobs: a.jobs,
    };
    log::info!("interpolate: factor {}, scales {}, jobs {}", opts.factor, opts.scales, opts.jobs);
    let written = crate::sequence::interpolate_sequence(&a.input, &a.output, &ckpt.model, &opts)?;
    log::info!("wrote {} frames to {}", written.len(), a.output.display());
    Ok(())
}

#[derive(Serialize)]
struct EpochRecord {
    epoch: usize,
    loss: f64,
    recon: f64,
    smooth: f64,
    warp: f64,
    val_psnr: f64,
    lr_main: f64,
}

#[derive(Serialize)]
struct TrainRecord {
    initial_psnr: f64,
    best_epoch: usize,
    best_psnr: f64,
    parameters: crate::eval::ParameterReport,
    history: Vec<EpochRecord>,
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(cli, &a.run)?;
    let train_set = load_dataset(&a.data)?;
    let val_set = load_dataset(&a.val)?;
    check_samples(&train_set, &cfg, &a.data)?;
    check_samples(&val_set, &cfg, &a.val)?;
    let init = match &a.init_image {
        Some(p) => crate::io::read_image(p)?,
        None => train_set[0].i0.clone(),
    };
    log::info!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let (ckpt, report) = train(&cfg, &train_set, &val_set, &init, &mut |_| {})?;
    log::info!("best validation PSNR {:.3} dB at epoch {} (initial {:.3} dB)", report.best_psnr, report.best_epoch, report.initial_psnr);
    save_checkpoint(&a.output, &ckpt)?;
    if let Some(p) = &a.export_basis {
        save_basis(p, &ckpt.model.basis)?;
    }
    if let Some(p) = &a.report {
        let rec = TrainRecord {
            initial_psnr: report.initial_psnr,
            best_epoch: report.best_epoch,
            best_psnr: report.best_psnr,
            parameters: ckpt.model.parameter_breakdown().into(),
            history: report
                .history
                .iter()
                .map(|s| EpochRecord {
                    epoch: s.epoch,
                    loss: s.loss,
                    recon: s.components.recon,
                    smooth: s.components.smooth,
                    warp: s.components.warp,
                    val_psnr: s.val_psnr,
                    lr_main: s.lr_main,
                })
                .collect(),
        };
        write_json(p, &rec)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CalibrationRecord {
    initial_temperature: f64,
    temperature: f64,
    initial_val_mse: f64,
    val_mse: f64,
    history: Vec<(f64, f64)>,
}

fn calibrate(cli: &Cli, a: &CalibrateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    // Calibration keeps the checkpoint's architecture settings; flags and the
    // config file only adjust the optimisation keys.
    let file = load_run_config(cli.config.as_deref())?;
    let mut cfg = ckpt.config.clone();
    file.overlay(&a.run).apply(&mut cfg);
    cfg.d = ckpt.model.d();
    cfg.k = ckpt.model.k();
    cfg.seed = resolve_seed(a.run.seed, file.seed.or(Some(ckpt.config.seed)))?;
    cfg.validate()?;
    log::info!("resolved config:\n{}", RunConfig::from_train(&cfg).to_toml());
    let train_set = load_dataset(&a.data)?;
    let val_set = load_dataset(&a.val)?;
    let (out, report) = calibrate_temperature(&ckpt, &train_set, &val_set, &cfg)?;
    log::info!(
        "temperature {:.5} -> {:.5}, validation MSE {:.6e} -> {:.6e}",
        report.initial_temperature,
        report.temperature,
        report.initial_val_mse,
        report.val_mse
    );
    save_checkpoint(&a.output, &ModelCheckpoint { config: cfg, ..out })?;
    if let Some(p) = &a.report {
        write_json(
            p,
            &CalibrationRecord {
                initial_temperature: report.initial_temperature,
                temperature: report.temperature,
                initial_val_mse: report.initial_val_mse,
                val_mse: report.val_mse,
                history: report.history,
            },
        )?;
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let mode = match a.mode {
        Mode::S => EvalMode::Short,
        Mode::L => EvalMode::Long,
    };
    let scales = a.scales.unwrap_or(ckpt.config.scales);
    let report = crate::eval::evaluate(&a.input, &ckpt.model, mode, a.threshold, scales, a.jobs)?;
    write_json(&a.report, &report)?;
    let table = report.table();
    write_text(&a.report.with_extension("txt"), &table)?;
    log::info!("evaluation:\n{table}");
    Ok(())
}

fn study(a: &StudyArgs) -> Result<()> {
    let report = crate::study::run_study(&a.image, &a.d, a.r, a.held_out.as_deref())?;
    std::fs::create_dir_all(&a.output).map_err(|e| FldrError::io(&a.output, e))?;
    write_json(&a.output.join("study.json"), &report)?;
    let table = report.table();
    write_text(&a.output.join("study.txt"), &table)?;
    crate::study::write_plot(&a.output.join("study.png"), &report)?;
    log::info!("compression study:\n{table}");
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRecord {
    loss: f64,
    tolerance: f64,
    groups: Vec<GroupRecord>,
}

#[derive(Serialize)]
struct GroupRecord {
    group: String,
    checked: usize,
    max_rel_error: f64,
    max_abs_grad: f64,
    pass: bool,
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let file = load_run_config(cli.config.as_deref())?;
    let seed = resolve_seed(a.seed, file.seed)?;
    let mut cfg = file.resolve();
    cfg.seed = seed;
    let probe = make_synthetic_dataset::<f64>(seed, 1, a.size, 3.0).pop().expect("one sample");
    let model = match &a.ckpt {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            cfg.scales = ck.config.scales;
            ck.model.cast::<f64>()
        }
        None => fldr_core::training::initial_model(&cfg, &probe.i0.cast())?.cast::<f64>(),
    };
    let align = model.alignment(cfg.scales);
    if !a.size.is_multiple_of(align) {
        return Err(FldrError::usage(format_args!("probe size {} is not a multiple of {align}", a.size)));
    }
    let report = grad_check(&model, &probe, &cfg, a.per_group, a.step)?;
    let groups: Vec<GroupRecord> = report
        .groups
        .iter()
        .map(|g| GroupRecord {
            group: g.group.clone(),
            checked: g.checked,
            max_rel_error: g.max_rel_error,
            max_abs_grad: g.max_abs_grad,
            pass: g.max_rel_error < a.tolerance,
        })
        .collect();
    for g in &groups {
        log::info!(
            "{:<10} checked {:>3}  max rel err {:.3e}  max |grad| {:.3e}  {}",
            g.group,
            g.checked,
            g.max_rel_error,
            g.max_abs_grad,
            if g.pass { "ok" } else { "ABOVE TOLERANCE" }
        );
    }
    if let Some(p) = &a.report {
        write_json(p, &GradcheckRecord { loss: report.loss, tolerance: a.tolerance, groups })?;
    }
    Ok(())
}

fn make_data(cli: &Cli, a: &MakeDataArgs) -> Result<()> {
    let file = load_run_config(cli.config.as_deref())?;
    let seed = resolve_seed(a.seed, file.seed)?;
    if a.size == 0 || a.count == 0 {
        return Err(FldrError::usage("count and size must be positive"));
    }
    if !(a.max_disp >= 0.0) {
        return Err(FldrError::usage("max-disp must be non-negative"));
    }
    let samples = make_synthetic_dataset::<f32>(seed, a.count, a.size, a.max_disp);
    save_dataset(&a.output, &samples)?;
    log::info!("wrote {} samples ({}x{}, seed {seed}) to {}", a.count, a.size, a.size, a.output.display());
    Ok(())
}
