//! Command-line front end: train the network, run motion inference, extract
//! and match features, and evaluate segmentation / two-view geometry /
//! trajectories.
//!
//! Exit codes: 0 success, 2 usage error, 3 input format error,
//! 4 numerical failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;
use mdnet_core::dataset::{load_dataset, load_image_padded, LoadOptions, MotionLabelGrid};
use mdnet_core::features::{correspondences, extract_features, match_features, ExtractConfig, FeatureSet};
use mdnet_core::geometry::{
    align_trajectories, correspondences_to_text, estimate_fundamental_ransac, final_drift,
    inlier_ratio, load_correspondences, Trajectory,
};
use mdnet_core::metrics::{argmax_labels, ConfusionMatrix};
use mdnet_core::model::{MdNetParams, TeacherParams};
use mdnet_core::training::{format_loss_log, train};

#[derive(Parser)]
#[command(name = "mdnet", version, about = "Motion-aware local feature pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network on an image/label manifest.
    Train(TrainArgs),
    /// Predict the coarse motion-attribute grid for one image.
    InferMotion(InferArgs),
    /// Detect keypoints and write attributed, described features.
    Extract(ExtractArgs),
    /// Match two feature files into point correspondences.
    Match(MatchArgs),
    /// Evaluation reports on standard output.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args)]
struct TrainArgs {
    /// key=value configuration file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest of `image<TAB>label` lines.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Teacher checkpoint; a seeded teacher is used when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss log path (defaults to `<out>.log`).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output label-grid text file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep only points whose motion attribute is static.
    #[arg(long)]
    filter_static: bool,
    #[arg(long)]
    max_points: Option<usize>,
    /// Detector contrast threshold on [0, 1] intensities.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    nms_radius: Option<f64>,
    /// Keep only points whose static probability reaches this value.
    #[arg(long)]
    min_static_prob: Option<f64>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    /// Output correspondence file (`x1 y1 x2 y2` lines).
    #[arg(long)]
    out: PathBuf,
    /// Lowe ratio-test threshold.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Segmentation quality of a predicted grid against a truth grid.
    Iou {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Robust two-view estimation over a correspondence file.
    Ransac {
        #[arg(long)]
        corrs: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        confidence: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Similarity-align an estimated trajectory to ground truth.
    Align {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Fix the scale to 1 instead of estimating it.
        #[arg(long)]
        no_scale: bool,
    },
    /// Planar displacement between the first and last poses.
    Drift {
        #[arg(long)]
        traj: PathBuf,
    },
}

/// Failures mapped to documented exit codes.
enum CliError {
    Usage(String),
    Input(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Numeric(m) => m,
        }
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn numeric_err(e: impl std::fmt::Display) -> CliError {
    CliError::Numeric(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::InferMotion(args) => cmd_infer_motion(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Match(args) => cmd_match(args),
        Command::Eval(cmd) => match cmd {
            EvalCommand::Iou { pred, truth } => cmd_eval_iou(&pred, &truth),
            EvalCommand::Ransac {
                corrs,
                threshold,
                max_iters,
                confidence,
                seed,
                config,
            } => cmd_eval_ransac(&corrs, threshold, max_iters, confidence, seed, config.as_deref()),
            EvalCommand::Align { est, gt, no_scale } => cmd_eval_align(&est, &gt, no_scale),
            EvalCommand::Drift { traj } => cmd_eval_drift(&traj),
        },
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", p.display())))?;
            Config::parse(&text).map_err(input_err)
        }
    }
}

/// Write via a sibling temp file and rename, so outputs are never partial.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.train.epochs = epochs;
    }
    let manifest = args
        .manifest
        .or(cfg.manifest.clone())
        .ok_or_else(|| CliError::Usage("train needs --manifest (or a manifest= config entry)".into()))?;
    let out = args
        .out
        .or(cfg.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("train needs --out (or a checkpoint= config entry)".into()))?;
    let log_path = args
        .log
        .or(cfg.log.clone())
        .unwrap_or_else(|| {
            let mut p = out.as_os_str().to_owned();
            p.push(".log");
            PathBuf::from(p)
        });

    let samples = load_dataset(&manifest, &LoadOptions::default()).map_err(input_err)?;
    let teacher = match args.teacher.or(cfg.teacher.clone()) {
        Some(path) => TeacherParams::load(&path).map_err(input_err)?,
        None => TeacherParams::seeded(cfg.train.seed),
    };

    let outcome = train(&samples, &teacher, &cfg.train).map_err(numeric_err)?;
    outcome.params.save(&out).map_err(input_err)?;

    let mut log = format_loss_log(&outcome.history);
    log.push_str(&format!("accuracy {:.6}\n", outcome.final_accuracy));
    write_atomic(&log_path, &log)?;
    println!("checkpoint {}", out.display());
    println!("accuracy {:.6}", outcome.final_accuracy);
    Ok(())
}

fn cmd_infer_motion(args: InferArgs) -> Result<(), CliError> {
    let params = MdNetParams::load(&args.checkpoint).map_err(input_err)?;
    let (image, _, _) = load_image_padded(&args.image).map_err(input_err)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let batched = mdnet_core::autodiff::Tensor::new(vec![1, 1, h, w], image.values().to_vec())
        .expect("same numel");
    let (probs, _) = params.infer(&batched).map_err(numeric_err)?;
    let grid = argmax_labels(&probs.batch_slice(0).expect("one image")).map_err(numeric_err)?;
    write_atomic(&args.out, &grid.to_text())?;
    println!("grid {}", args.out.display());
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let mut extract_cfg = ExtractConfig {
        detector: cfg.detector.clone(),
        filter_static: args.filter_static,
        min_static_prob: args.min_static_prob.or(cfg.min_static_prob),
    };
    if let Some(t) = args.threshold {
        extract_cfg.detector.threshold = t;
    }
    if let Some(r) = args.nms_radius {
        extract_cfg.detector.nms_radius = r;
    }
    if let Some(m) = args.max_points {
        extract_cfg.detector.max_points = m;
    }

    let params = MdNetParams::load(&args.checkpoint).map_err(input_err)?;
    let (image, orig_h, orig_w) = load_image_padded(&args.image).map_err(input_err)?;
    let mut set = extract_features(&params, &image, &extract_cfg).map_err(numeric_err)?;
    // padding extends right/bottom only; drop detections landing there
    set.features
        .retain(|f| f.keypoint.x < orig_w as f64 && f.keypoint.y < orig_h as f64);
    write_atomic(&args.out, &set.to_text())?;
    println!("features {} ({} points)", args.out.display(), set.features.len());
    Ok(())
}

fn cmd_match(args: MatchArgs) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let ratio = args.ratio.unwrap_or(cfg.match_ratio);
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(CliError::Usage(format!("ratio must be in (0, 1], got {ratio}")));
    }
    let read = |p: &Path| -> Result<FeatureSet, CliError> {
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
        FeatureSet::from_text(&text).map_err(input_err)
    };
    let left = read(&args.left)?;
    let right = read(&args.right)?;
    let matches = match_features(&left, &right, ratio);
    let corrs = correspondences(&left, &right, &matches);
    write_atomic(&args.out, &correspondences_to_text(&corrs))?;
    println!("matches {} ({} pairs)", args.out.display(), corrs.len());
    Ok(())
}

fn cmd_eval_iou(pred: &Path, truth: &Path) -> Result<(), CliError> {
    let read = |p: &Path| -> Result<MotionLabelGrid, CliError> {
        let text = fs::read_to_string(p)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", p.display())))?;
        MotionLabelGrid::from_text(&text).map_err(input_err)
    };
    let pred = read(pred)?;
    let truth = read(truth)?;
    let mut cm = ConfusionMatrix::new();
    cm.accumulate(&pred, &truth).map_err(input_err)?;
    print!("{}", cm.report().map_err(numeric_err)?);
    Ok(())
}

fn cmd_eval_ransac(
    corrs_path: &Path,
    threshold: Option<f64>,
    max_iters: Option<usize>,
    confidence: Option<f64>,
    seed: Option<u64>,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let mut ransac = cfg.ransac.clone();
    if let Some(t) = threshold {
        ransac.threshold_px = t;
    }
    if let Some(m) = max_iters {
        ransac.max_iters = m;
    }
    if let Some(c) = confidence {
        ransac.confidence = c;
    }
    if let Some(s) = seed {
        ransac.seed = s;
    }
    let corrs = load_correspondences(corrs_path).map_err(input_err)?;
    let (_, mask) = estimate_fundamental_ransac(&corrs, &ransac).map_err(numeric_err)?;
    let inliers = mask.iter().filter(|&&b| b).count();
    let ratio = inlier_ratio(&mask).map_err(numeric_err)?;
    println!("inliers {inliers}");
    println!("total {}", mask.len());
    println!("ratio {ratio:.6}");
    Ok(())
}

fn cmd_eval_align(est: &Path, gt: &Path, no_scale: bool) -> Result<(), CliError> {
    let est = Trajectory::load(est).map_err(input_err)?;
    let gt = Trajectory::load(gt).map_err(input_err)?;
    let (transform, err, report) =
        align_trajectories(&est, &gt, !no_scale).map_err(numeric_err)?;
    println!("pairs {}", report.pairs);
    println!("dropped {} {}", report.dropped_a, report.dropped_b);
    println!("scale {:.6}", transform.scale);
    println!("rmse {err:.6}");
    Ok(())
}

fn cmd_eval_drift(traj: &Path) -> Result<(), CliError> {
    let traj = Trajectory::load(traj).map_err(input_err)?;
    let (dx, dy, norm) = final_drift(&traj).map_err(numeric_err)?;
    println!("drift {dx:.2} {dy:.2} {norm:.2}");
    println!("drift_raw {dx:.4} {dy:.4} {norm:.4}");
    Ok(())
}
