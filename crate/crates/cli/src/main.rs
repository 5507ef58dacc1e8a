//! Command-line entry points for unsupervised variational segmentation:
//! single-image and multi-phase solves, dataset training and inference,
//! batch evaluation, trace plotting, and synthetic fixtures.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use deepcv::energy::{write_trace_csv, Hyperparams};
use deepcv::gaussian::GaussianPrior;
use deepcv::image::{
    center_crop_resize, center_crop_resize_mask, find_image_path, find_mask_path, load_image,
    load_mask, make_synthetic, read_splits, save_image, save_mask, write_disk_dataset,
    SyntheticKind,
};
use deepcv::metrics::{accuracy, confusion, f_measure, miou, summarize, write_eval_csv, MetricsRow};
use deepcv::nets::Activation;
use deepcv::solver::{
    infer_dataset, load_trained_model, solve_multiphase, solve_single, InitMode, OptimizerKind,
    SolveReport, SolverConfig, TrainConfig, TrainData, TrainItem,
};
use deepcv::{Error, Result};

use config::{resolve, RunConfig};

#[derive(Parser)]
#[command(
    name = "deepcv",
    version,
    about = "Unsupervised variational Chan-Vese segmentation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Segment one image into foreground and background.
    Segment(SegmentArgs),
    /// Segment one image into N regions.
    SegmentMulti(SegmentMultiArgs),
    /// Train a segmentation network on an unlabeled dataset.
    Train(TrainArgs),
    /// Run a trained segmentation network over a directory of images.
    Infer(InferArgs),
    /// Score predicted masks against ground-truth masks.
    Eval(EvalArgs),
    /// Render an energy-trace CSV as a PNG chart.
    PlotTrace(PlotArgs),
    /// Generate a synthetic test image and its ground-truth mask.
    Synth(SynthArgs),
    /// Generate a synthetic disk dataset in the standard layout.
    SynthDataset(SynthDatasetArgs),
}

#[derive(Args)]
struct CommonSolveArgs {
    /// Input image (PNG or JPEG).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output mask path; the report, trace, and resolved config are written
    /// next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Level-field initialization: otsu | center | random | mask:PATH.
    #[arg(long)]
    init: Option<String>,
    /// Boundary-length weight.
    #[arg(long)]
    nu: Option<f64>,
    /// Splitting penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    /// Random seed (the SEED environment variable overrides this).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Shared Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Per-block overrides of the shared rate.
    #[arg(long)]
    lr_theta: Option<f64>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    #[arg(long)]
    lr_phi: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// sigmoid | softplus | silu | relu | leaky_relu
    #[arg(long)]
    activation: Option<String>,
    /// adam | sgd
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Redraw reconstruction noise every iteration.
    #[arg(long)]
    resample_noise: bool,
    /// Encoder/decoder-only initialization steps before the main loop.
    #[arg(long)]
    warmup: Option<usize>,
    /// Optional global gradient-norm clip.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Record wall time in the report (reports are then not byte-replayable).
    #[arg(long)]
    no_repro: bool,
    /// Replay settings from a saved config file (flags override it).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    common: CommonSolveArgs,
    /// Foreground prior mean.
    #[arg(long)]
    mu1: Option<f64>,
    /// Background prior mean.
    #[arg(long)]
    mu2: Option<f64>,
    /// Use the reduced encoder (unit posterior variance); the default.
    #[arg(long)]
    reduced_variance: bool,
    /// Learn the posterior variance instead of fixing it to 1.
    #[arg(long, conflicts_with = "reduced_variance")]
    full_variance: bool,
}

#[derive(Args)]
struct SegmentMultiArgs {
    #[command(flatten)]
    common: CommonSolveArgs,
    /// Number of regions (N >= 2).
    #[arg(long)]
    phases: Option<usize>,
    /// Prior means are `prior_scale * e_i`.
    #[arg(long)]
    prior_scale: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root with images/, masks/, and split files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints, metrics, and config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mu1: Option<f64>,
    #[arg(long)]
    mu2: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Center-crop and rescale images to this side length (0 = native).
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    activation: Option<String>,
    /// Disable the augmentation-consistency regularizer.
    #[arg(long)]
    no_aui: bool,
    /// Disable the region-conservation (adversarial) regularizer.
    #[arg(long)]
    no_cri: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Directory of input images.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory receiving one mask per image.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Center-crop and rescale inputs to this side length (0 = native).
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted masks.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Directory of ground-truth masks.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output CSV path; a summary JSON is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// two_gaussian_disk | three_region_stripes | texture_overlap
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    /// Additive Gaussian noise in 0-255 intensity units.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_image: Option<PathBuf>,
    #[arg(long)]
    out_mask: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthDatasetArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Segment(args) => cmd_segment(args),
        Cmd::SegmentMulti(args) => cmd_segment_multi(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Infer(args) => cmd_infer(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::PlotTrace(args) => cmd_plot_trace(args),
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::SynthDataset(args) => cmd_synth_dataset(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_cfg(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// The SEED environment variable overrides any `--seed` flag or config.
fn resolve_seed(flag: Option<u64>, cfg: &RunConfig, default: u64) -> Result<u64> {
    if let Ok(env_seed) = std::env::var("SEED") {
        return env_seed
            .parse()
            .map_err(|_| Error::validation(format!("bad SEED value: {env_seed}")));
    }
    resolve(flag, cfg, "seed", default)
}

/// `/a/b/mask.png` -> `/a/b/mask.trace.csv` and similar sidecars.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

struct SolveSettings {
    input: PathBuf,
    out: PathBuf,
    hp: Hyperparams,
    solver: SolverConfig,
    run: RunConfig,
}

#[allow(clippy::too_many_arguments)]
fn resolve_solve_settings(
    common: CommonSolveArgs,
    phases: usize,
    priors: Vec<GaussianPrior>,
    latent_dim: usize,
    reduced_variance: bool,
    extra: &[(&str, String)],
) -> Result<SolveSettings> {
    let cfg = load_cfg(&common.config)?;
    let input = match common.input {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("input")
                .ok_or_else(|| Error::validation("missing required --input"))?,
        ),
    };
    let out = match common.out {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("out")
                .ok_or_else(|| Error::validation("missing required --out"))?,
        ),
    };
    let nu = resolve(common.nu, &cfg, "nu", 1.0)?;
    let lambda = resolve(common.lambda, &cfg, "lambda", 10.0)?;
    let mc_samples = resolve(common.mc_samples, &cfg, "mc_samples", 1)?;
    let hp = Hyperparams {
        nu,
        lambda,
        latent_dim,
        priors,
        mc_samples,
        reduced_variance,
    };
    hp.validate(phases)?;

    let init: InitMode = resolve(
        common.init.map(|s| s.parse()).transpose()?,
        &cfg,
        "init",
        InitMode::Otsu,
    )?;
    let solver = SolverConfig {
        max_iters: resolve(common.iters, &cfg, "iters", 1000)?,
        lr: resolve(common.lr, &cfg, "lr", 1e-2)?,
        lr_theta: common.lr_theta.or(cfg.parse("lr_theta")?),
        lr_gamma: common.lr_gamma.or(cfg.parse("lr_gamma")?),
        lr_phi: common.lr_phi.or(cfg.parse("lr_phi")?),
        optimizer: resolve(
            common.optimizer.map(|s| s.parse()).transpose()?,
            &cfg,
            "optimizer",
            OptimizerKind::Adam,
        )?,
        init,
        seed: resolve_seed(common.seed, &cfg, 0)?,
        resample_noise: common.resample_noise
            || cfg.parse::<bool>("resample_noise")?.unwrap_or(false),
        warmup_iters: resolve(common.warmup, &cfg, "warmup", 0)?,
        clip_norm: common.clip_norm.or(cfg.parse("clip_norm")?),
        depth: resolve(common.depth, &cfg, "depth", 4)?,
        base_channels: resolve(common.base_channels, &cfg, "base_channels", 32)?,
        activation: resolve_activation(common.activation, &cfg, Activation::LeakyRelu)?,
        reproducible: !(common.no_repro || cfg.parse::<bool>("no_repro")?.unwrap_or(false)),
        ..SolverConfig::default()
    };

    let mut run = RunConfig::default();
    run.set("input", input.display());
    run.set("out", out.display());
    run.set("nu", hp.nu);
    run.set("lambda", hp.lambda);
    run.set("latent_dim", hp.latent_dim);
    run.set("mc_samples", hp.mc_samples);
    run.set("reduced_variance", hp.reduced_variance);
    run.set("iters", solver.max_iters);
    run.set("lr", solver.lr);
    if let Some(v) = solver.lr_theta {
        run.set("lr_theta", v);
    }
    if let Some(v) = solver.lr_gamma {
        run.set("lr_gamma", v);
    }
    if let Some(v) = solver.lr_phi {
        run.set("lr_phi", v);
    }
    run.set(
        "optimizer",
        match solver.optimizer {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        },
    );
    run.set("init", &solver.init);
    run.set("seed", solver.seed);
    run.set("resample_noise", solver.resample_noise);
    run.set("warmup", solver.warmup_iters);
    if let Some(v) = solver.clip_norm {
        run.set("clip_norm", v);
    }
    run.set("depth", solver.depth);
    run.set("base_channels", solver.base_channels);
    run.set("activation", solver.activation);
    run.set("no_repro", !solver.reproducible);
    for (k, v) in extra {
        run.set(k, v);
    }
    Ok(SolveSettings {
        input,
        out,
        hp,
        solver,
        run,
    })
}

fn resolve_activation(
    flag: Option<String>,
    cfg: &RunConfig,
    default: Activation,
) -> Result<Activation> {
    match flag {
        Some(s) => s.parse(),
        None => match cfg.get("activation") {
            Some(s) => s.parse(),
            None => Ok(default),
        },
    }
}

fn write_solve_outputs(out: &Path, report: &SolveReport, run: &RunConfig) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(sidecar(out, "report.json"), report.to_json())?;
    write_trace_csv(sidecar(out, "trace.csv"), &report.trace)?;
    run.write(sidecar(out, "config.txt"))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let cfg = load_cfg(&args.common.config)?;
    let latent_dim = resolve(args.common.latent_dim, &cfg, "latent_dim", 1)?;
    let mu1 = resolve(args.mu1, &cfg, "mu1", 10.0)?;
    let mu2 = resolve(args.mu2, &cfg, "mu2", -10.0)?;
    let reduced = if args.full_variance {
        false
    } else if args.reduced_variance {
        true
    } else {
        cfg.parse::<bool>("reduced_variance")?.unwrap_or(true)
    };
    let priors = vec![
        GaussianPrior::isotropic(mu1, 1.0, latent_dim)?,
        GaussianPrior::isotropic(mu2, 1.0, latent_dim)?,
    ];
    let mut settings = resolve_solve_settings(
        args.common,
        2,
        priors,
        latent_dim,
        reduced,
        &[("command", "segment".into()), ("mu1", mu1.to_string()), ("mu2", mu2.to_string())],
    )?;
    let img = load_image(&settings.input)?;
    let (mask, report) = solve_single(&img, &settings.hp, &settings.solver)?;
    if let Some(parent) = settings.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_mask(&mask, &settings.out)?;
    settings.run.set("mu1", mu1);
    settings.run.set("mu2", mu2);
    write_solve_outputs(&settings.out, &report, &settings.run)?;
    println!(
        "segmented {} in {} iterations (final energy {:.6})",
        settings.input.display(),
        report.iterations,
        report.trace.last().map(|b| b.total).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_segment_multi(args: SegmentMultiArgs) -> Result<()> {
    let cfg = load_cfg(&args.common.config)?;
    let phases = resolve(args.phases, &cfg, "phases", 0)?;
    if phases < 2 {
        return Err(Error::validation("--phases must be at least 2"));
    }
    let prior_scale = resolve(args.prior_scale, &cfg, "prior_scale", 5.0)?;
    let latent_dim = resolve(args.common.latent_dim, &cfg, "latent_dim", phases)?;
    if latent_dim < phases {
        return Err(Error::validation("latent_dim must be >= phases for axis priors"));
    }
    let priors = (0..phases)
        .map(|i| GaussianPrior::axis(i, prior_scale, latent_dim))
        .collect::<Result<Vec<_>>>()?;
    let settings = resolve_solve_settings(
        args.common,
        phases,
        priors,
        latent_dim,
        true,
        &[
            ("command", "segment-multi".into()),
            ("phases", phases.to_string()),
            ("prior_scale", prior_scale.to_string()),
        ],
    )?;
    let img = load_image(&settings.input)?;
    let (mask, report) = solve_multiphase(&img, phases, &settings.hp, &settings.solver)?;
    if let Some(parent) = settings.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_mask(&mask, &settings.out)?;
    write_solve_outputs(&settings.out, &report, &settings.run)?;
    println!(
        "segmented {} into {} regions in {} iterations",
        settings.input.display(),
        phases,
        report.iterations
    );
    Ok(())
}

fn load_split_items(
    root: &Path,
    ids: &[String],
    image_size: usize,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::with_capacity(ids.len());
    for id in ids {
        let img_path = find_image_path(root, id)?;
        let mut image = load_image(&img_path)?;
        let mut mask = match find_mask_path(root, id) {
            Some(p) => Some(load_mask(p)?),
            None => None,
        };
        if image_size > 0 {
            image = center_crop_resize(&image, image_size)?;
            mask = match mask {
                Some(m) => Some(center_crop_resize_mask(&m, image_size)?),
                None => None,
            };
        }
        items.push(TrainItem {
            id: id.clone(),
            image,
            mask,
        });
    }
    Ok(items)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let data_dir = match args.data {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("data")
                .ok_or_else(|| Error::validation("missing required --data"))?,
        ),
    };
    let out_dir = match args.out {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("out")
                .ok_or_else(|| Error::validation("missing required --out"))?,
        ),
    };
    let epochs = resolve(args.epochs, &cfg, "epochs", 50)?;
    let batch = resolve(args.batch, &cfg, "batch", 128)?;
    let lr = resolve(args.lr, &cfg, "lr", 1e-3)?;
    let seed = resolve_seed(args.seed, &cfg, 0)?;
    let mu1 = resolve(args.mu1, &cfg, "mu1", -3.0)?;
    let mu2 = resolve(args.mu2, &cfg, "mu2", 3.0)?;
    let latent_dim = resolve(args.latent_dim, &cfg, "latent_dim", 1)?;
    let image_size = resolve(args.image_size, &cfg, "image_size", 0)?;
    let depth = resolve(args.depth, &cfg, "depth", 4)?;
    let base_channels = resolve(args.base_channels, &cfg, "base_channels", 32)?;
    let activation = resolve_activation(args.activation, &cfg, Activation::LeakyRelu)?;
    let aui = !(args.no_aui || cfg.parse::<bool>("no_aui")?.unwrap_or(false));
    let cri = !(args.no_cri || cfg.parse::<bool>("no_cri")?.unwrap_or(false));

    let split = read_splits(&data_dir)?;
    if split.train.is_empty() {
        return Err(Error::validation("the train split is empty"));
    }
    let data = TrainData {
        train: load_split_items(&data_dir, &split.train, image_size)?,
        validation: load_split_items(&data_dir, &split.validation, image_size)?,
        test: load_split_items(&data_dir, &split.test, image_size)?,
    };
    let hp = Hyperparams {
        latent_dim,
        priors: vec![
            GaussianPrior::isotropic(mu1, 1.0, latent_dim)?,
            GaussianPrior::isotropic(mu2, 1.0, latent_dim)?,
        ],
        ..Hyperparams::dataset()
    };
    // trim the discriminator to the largest stack the image size supports
    let (ih, iw) = (
        data.train[0].image.height(),
        data.train[0].image.width(),
    );
    let mut disc_channels = TrainConfig::default().disc_channels;
    while !disc_channels.is_empty() {
        let div = 1usize << disc_channels.len();
        if ih % div == 0 && iw % div == 0 && ih / div >= 1 && iw / div >= 1 {
            break;
        }
        disc_channels.pop();
    }
    if disc_channels.is_empty() {
        return Err(Error::validation(format!(
            "image size {ih}x{iw} cannot support a strided discriminator"
        )));
    }
    if disc_channels.len() < TrainConfig::default().disc_channels.len() {
        eprintln!(
            "warning: discriminator trimmed to {} layers for {ih}x{iw} inputs",
            disc_channels.len()
        );
    }
    let train_cfg = TrainConfig {
        epochs,
        batch_size: batch,
        lr,
        seed,
        aui,
        cri,
        depth,
        base_channels,
        activation,
        disc_channels,
        ckpt_dir: Some(out_dir.clone()),
        ..TrainConfig::default()
    };

    std::fs::create_dir_all(&out_dir)?;
    let (_, report) = deepcv::solver::train_dataset(&data, &hp, &train_cfg)?;

    let mut csv = String::from("epoch,mean_energy,mean_aug,mean_disc,mean_cri,val_miou,val_acc,flipped\n");
    for log in &report.epoch_logs {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            log.epoch,
            log.mean_energy,
            log.mean_aug,
            log.mean_disc,
            log.mean_cri,
            log.val_miou.map(|v| v.to_string()).unwrap_or_default(),
            log.val_acc.map(|v| v.to_string()).unwrap_or_default(),
            log.flipped
        ));
    }
    std::fs::write(out_dir.join("metrics.csv"), csv)?;

    let mut run = RunConfig::default();
    run.set("command", "train");
    run.set("data", data_dir.display());
    run.set("out", out_dir.display());
    run.set("epochs", epochs);
    run.set("batch", batch);
    run.set("lr", lr);
    run.set("seed", seed);
    run.set("mu1", mu1);
    run.set("mu2", mu2);
    run.set("latent_dim", latent_dim);
    run.set("image_size", image_size);
    run.set("depth", depth);
    run.set("base_channels", base_channels);
    run.set("activation", activation);
    run.set("no_aui", !aui);
    run.set("no_cri", !cri);
    run.write(out_dir.join("config.txt"))?;

    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    match (report.best_epoch, report.best_val_miou) {
        (Some(e), Some(m)) => println!("trained {epochs} epochs; best epoch {e} (val mIoU {m:.4})"),
        _ => println!("trained {epochs} epochs"),
    }
    Ok(())
}

fn raster_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("cannot read {}: {e}", dir.display())))?
    {
        let path = entry?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            if let Some(stem) = path.file_stem() {
                stems.push(stem.to_string_lossy().to_string());
            }
        }
    }
    stems.sort();
    stems.dedup();
    Ok(stems)
}

fn find_raster(dir: &Path, stem: &str) -> Option<PathBuf> {
    for ext in ["png", "jpg", "jpeg"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Some(p);
        }
    }
    None
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let ckpt = match args.ckpt {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("ckpt")
                .ok_or_else(|| Error::validation("missing required --ckpt"))?,
        ),
    };
    let input = match args.input {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("input")
                .ok_or_else(|| Error::validation("missing required --input"))?,
        ),
    };
    let out = match args.out {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("out")
                .ok_or_else(|| Error::validation("missing required --out"))?,
        ),
    };
    let image_size = resolve(args.image_size, &cfg, "image_size", 0)?;

    let model = load_trained_model(&ckpt)?;
    let stems = raster_stems(&input)?;
    if stems.is_empty() {
        return Err(Error::validation(format!(
            "no images under {}",
            input.display()
        )));
    }
    std::fs::create_dir_all(&out)?;
    let mut failures = 0usize;
    for stem in &stems {
        let path = find_raster(&input, stem).expect("stem listed");
        let run = || -> Result<()> {
            let mut img = load_image(&path)?;
            if image_size > 0 {
                img = center_crop_resize(&img, image_size)?;
            }
            let mask = infer_dataset(&model.seg, &img)?;
            save_mask(&mask, out.join(format!("{stem}.png")))?;
            Ok(())
        };
        if let Err(e) = run() {
            eprintln!("{stem}: {e}");
            failures += 1;
        }
    }
    let mut run = RunConfig::default();
    run.set("command", "infer");
    run.set("ckpt", ckpt.display());
    run.set("input", input.display());
    run.set("out", out.display());
    run.set("image_size", image_size);
    run.write(out.join("config.txt"))?;
    println!("inferred {} masks ({failures} failures)", stems.len() - failures);
    if failures > 0 {
        return Err(Error::validation(format!("{failures} images failed")));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let pred = match args.pred {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("pred")
                .ok_or_else(|| Error::validation("missing required --pred"))?,
        ),
    };
    let truth = match args.truth {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("truth")
                .ok_or_else(|| Error::validation("missing required --truth"))?,
        ),
    };
    let out = match args.out {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("out")
                .ok_or_else(|| Error::validation("missing required --out"))?,
        ),
    };
    let stems: Vec<String> = raster_stems(&pred)?
        .into_iter()
        .filter(|s| find_raster(&truth, s).is_some())
        .collect();
    if stems.is_empty() {
        return Err(Error::validation(
            "no prediction/truth pairs share a file stem",
        ));
    }
    let results: Vec<(String, Result<MetricsRow>)> = stems
        .par_iter()
        .map(|stem| {
            let row = (|| -> Result<MetricsRow> {
                let p = load_mask(find_raster(&pred, stem).expect("listed"))?;
                let t = load_mask(find_raster(&truth, stem).expect("listed"))?;
                let c = confusion(&p, &t)?;
                Ok(MetricsRow {
                    image: stem.clone(),
                    acc: accuracy(&c),
                    f: f_measure(&c),
                    miou: miou(&c),
                })
            })();
            (stem.clone(), row)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = 0usize;
    for (stem, res) in results {
        match res {
            Ok(row) => rows.push(row),
            Err(e) => {
                eprintln!("{stem}: {e}");
                failures += 1;
            }
        }
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_eval_csv(&out, &rows)?;
    let summary = summarize(&rows);
    std::fs::write(
        sidecar(&out, "summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary json"),
    )?;
    let mut run = RunConfig::default();
    run.set("command", "eval");
    run.set("pred", pred.display());
    run.set("truth", truth.display());
    run.set("out", out.display());
    run.write(sidecar(&out, "config.txt"))?;
    println!(
        "evaluated {} images: mean acc {:.4}, F {:.4}, mIoU {:.4}",
        summary.count, summary.mean_acc, summary.mean_f, summary.mean_miou
    );
    if failures > 0 {
        return Err(Error::validation(format!("{failures} images failed")));
    }
    Ok(())
}

fn cmd_plot_trace(args: PlotArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let trace_path = match args.trace {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("trace")
                .ok_or_else(|| Error::validation("missing required --trace"))?,
        ),
    };
    let out = match args.out {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("out")
                .ok_or_else(|| Error::validation("missing required --out"))?,
        ),
    };
    let trace = deepcv::energy::read_trace_csv(&trace_path)?;
    if trace.is_empty() {
        return Err(Error::validation("trace has no rows"));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    plot::plot_trace(&trace, &out)?;
    let mut run = RunConfig::default();
    run.set("command", "plot-trace");
    run.set("trace", trace_path.display());
    run.set("out", out.display());
    run.write(sidecar(&out, "config.txt"))?;
    println!("plotted {} iterations to {}", trace.len(), out.display());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let kind: SyntheticKind = match args.kind {
        Some(s) => s.parse()?,
        None => match cfg.get("kind") {
            Some(s) => s.parse()?,
            None => return Err(Error::validation("missing required --kind")),
        },
    };
    let n = resolve(args.n, &cfg, "n", 64)?;
    let m = resolve(args.m, &cfg, "m", 64)?;
    let sigma = resolve(args.sigma, &cfg, "sigma", 0.0)?;
    let seed = resolve_seed(args.seed, &cfg, 0)?;
    let out_image = match args.out_image {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("out_image")
                .ok_or_else(|| Error::validation("missing required --out-image"))?,
        ),
    };
    let out_mask = match args.out_mask {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("out_mask")
                .ok_or_else(|| Error::validation("missing required --out-mask"))?,
        ),
    };
    let (img, mask) = make_synthetic(kind, n, m, sigma, seed)?;
    for p in [&out_image, &out_mask] {
        if let Some(parent) = p.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
    }
    save_image(&img, &out_image)?;
    save_mask(&mask, &out_mask)?;
    let mut run = RunConfig::default();
    run.set("command", "synth");
    run.set("kind", kind);
    run.set("n", n);
    run.set("m", m);
    run.set("sigma", sigma);
    run.set("seed", seed);
    run.set("out_image", out_image.display());
    run.set("out_mask", out_mask.display());
    run.write(sidecar(&out_image, "config.txt"))?;
    println!("wrote {} and {}", out_image.display(), out_mask.display());
    Ok(())
}

fn cmd_synth_dataset(args: SynthDatasetArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let out = match args.out {
        Some(p) => p,
        None => PathBuf::from(
            cfg.get("out")
                .ok_or_else(|| Error::validation("missing required --out"))?,
        ),
    };
    let count = resolve(args.count, &cfg, "count", 200)?;
    let n = resolve(args.n, &cfg, "n", 64)?;
    let m = resolve(args.m, &cfg, "m", 64)?;
    let seed = resolve_seed(args.seed, &cfg, 0)?;
    let split = write_disk_dataset(&out, count, n, m, seed)?;
    let mut run = RunConfig::default();
    run.set("command", "synth-dataset");
    run.set("out", out.display());
    run.set("count", count);
    run.set("n", n);
    run.set("m", m);
    run.set("seed", seed);
    run.write(out.join("config.txt"))?;
    println!(
        "wrote {} images ({} train / {} val / {} test) under {}",
        count,
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}
