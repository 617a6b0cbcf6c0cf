//! Command-line front end. Every command resolves a [`RunConfig`], writes it
//! to `output_dir/run_id/config.resolved.toml` and keeps all outputs in that
//! directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evalkit::{
    cluster_class_confusion, grad_cam, miou, save_heatmap_png, save_labels_png, save_overlay_png, MetricReport,
};
use crate::phantom::{corruption_report, generate_phantom};
use crate::pseudolabel::{generate_pseudolabels, PseudoLabelReport};
use crate::segnet::{build_model, pad_to_multiple, segment_slices, segment_volume_with, LayerId};
use crate::selftrain::{final_checkpoint_path, train_stage2, train_stage3, RunOutputs, StageSetup};
use crate::volume::{
    extract_stack, load_labels, load_volume, normalize, save_labels, save_volume_raw, write_atomic, LabelVolume, Volume,
};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tomoseg", version, about = "Unsupervised segmentation of tomography volumes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.delta=0.6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic volume with ground truth from the `phantom` section.
    Phantom,
    /// Cluster voxel intensities into pseudo labels.
    Pseudolabel,
    /// Train stage 2 (pseudo-label supervision) or stage 3 (self-correction).
    Train(TrainArgs),
    /// Score a checkpoint (or a label volume) against ground truth and render overlays.
    Eval(EvalArgs),
    /// Grad-CAM heatmap for one slice and class.
    Gradcam(GradcamArgs),
    /// Cluster-to-class confusion matrix between pseudo and final labels.
    Confusion(ConfusionArgs),
    /// Print the fully resolved configuration and exit.
    Config,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub stage: u8,
    /// Stage 3: starting checkpoint (default: this run's final stage-2 checkpoint).
    /// Stage 2: checkpoint to resume from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Defaults to the run's final stage-3, then stage-2 checkpoint.
    #[arg(long, conflicts_with = "labels")]
    pub checkpoint: Option<PathBuf>,
    /// Score this label volume instead of segmenting with a checkpoint.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcamArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub slice: usize,
    #[arg(long)]
    pub class: u8,
    /// Layer name; defaults to `eval.gradcam_layer`.
    #[arg(long)]
    pub layer: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConfusionArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Final labels to compare against instead of segmenting with a checkpoint.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Keep the background cluster row.
    #[arg(long)]
    pub keep_background: bool,
}

/// Paths of the files a run produces.
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { dir: cfg.run_dir() }
    }
    pub fn phantom_volume(&self) -> PathBuf {
        self.dir.join("phantom_volume.raw")
    }
    pub fn phantom_labels(&self) -> PathBuf {
        self.dir.join("phantom_labels.raw")
    }
    pub fn pseudo_labels(&self) -> PathBuf {
        self.dir.join("pseudo_labels.raw")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
    pub fn metrics_log(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
    pub fn resolved_config(&self) -> PathBuf {
        self.dir.join("config.resolved.toml")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("{key} is not set")))
}

fn load_input(cfg: &RunConfig) -> Result<Volume> {
    let raw = load_volume(require(&cfg.io.input, "io.input")?, cfg.io.format)?;
    normalize(&raw, cfg.io.normalize)
}

fn ground_truth(cfg: &RunConfig) -> Result<Option<LabelVolume>> {
    cfg.io.ground_truth.as_deref().map(load_labels).transpose()
}

fn pseudo_path(cfg: &RunConfig, layout: &RunLayout) -> PathBuf {
    cfg.io.pseudo_labels.clone().unwrap_or_else(|| layout.pseudo_labels())
}

fn default_checkpoint(layout: &RunLayout, explicit: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.clone());
    }
    for stage in [3, 2] {
        let p = final_checkpoint_path(&layout.checkpoints(), stage);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Config(format!(
        "no checkpoint given and none found under {}",
        layout.checkpoints().display()
    )))
}

fn stage_setup<'a>(cfg: &RunConfig, layout: &RunLayout, gt: Option<&'a LabelVolume>) -> StageSetup<'a> {
    StageSetup {
        train: cfg.train.clone(),
        loss: cfg.loss,
        augment: cfg.augment.clone(),
        ground_truth: gt,
        outputs: RunOutputs {
            checkpoint_dir: Some(layout.checkpoints()),
            metrics_log: Some(layout.metrics_log()),
        },
    }
}

/// Executes one command; returns a short human-readable summary.
pub fn run(cfg: &RunConfig, command: &Command) -> Result<String> {
    if let Command::Config = command {
        return cfg.to_toml();
    }
    let layout = RunLayout::new(cfg);
    std::fs::create_dir_all(&layout.dir).map_err(|e| Error::io(&layout.dir, e))?;
    write_atomic(&layout.resolved_config(), cfg.to_toml()?.as_bytes())?;
    match command {
        Command::Phantom => cmd_phantom(cfg, &layout),
        Command::Pseudolabel => cmd_pseudolabel(cfg, &layout),
        Command::Train(a) => cmd_train(cfg, &layout, a),
        Command::Eval(a) => cmd_eval(cfg, &layout, a),
        Command::Gradcam(a) => cmd_gradcam(cfg, &layout, a),
        Command::Confusion(a) => cmd_confusion(cfg, &layout, a),
        Command::Config => unreachable!(),
    }
}

fn cmd_phantom(cfg: &RunConfig, layout: &RunLayout) -> Result<String> {
    let p = generate_phantom(&cfg.phantom)?;
    save_volume_raw(&p.volume, &layout.phantom_volume())?;
    save_labels(&p.ground_truth, &layout.phantom_labels())?;
    let (d, h, w) = p.volume.shape();
    Ok(format!(
        "phantom {d}x{h}x{w} written to {} and {}",
        layout.phantom_volume().display(),
        layout.phantom_labels().display()
    ))
}

#[derive(Serialize)]
struct PseudoOutput<'a> {
    #[serde(flatten)]
    report: PseudoLabelReport<'a>,
    /// Present when `io.ground_truth` is set.
    against_ground_truth: Option<MetricReport>,
}

fn cmd_pseudolabel(cfg: &RunConfig, layout: &RunLayout) -> Result<String> {
    let volume = load_input(cfg)?;
    let (labels, model) = generate_pseudolabels(&volume, &cfg.pseudolabel)?;
    let out = pseudo_path(cfg, layout);
    save_labels(&labels, &out)?;
    let against = match ground_truth(cfg)? {
        Some(gt) => Some(corruption_report(&gt, &labels)?),
        None => None,
    };
    let summary = format!(
        "{:?} K={} objective {:.6} in {:.3}s -> {}",
        model.method,
        model.k,
        model.objective,
        model.fit_seconds,
        out.display()
    );
    write_json(
        &layout.dir.join("pseudolabel_report.json"),
        &PseudoOutput {
            report: PseudoLabelReport::new(&cfg.pseudolabel, &model),
            against_ground_truth: against,
        },
    )?;
    Ok(summary)
}

fn cmd_train(cfg: &RunConfig, layout: &RunLayout, args: &TrainArgs) -> Result<String> {
    cfg.validate_training()?;
    let volume = load_input(cfg)?;
    let gt = ground_truth(cfg)?;
    let setup = stage_setup(cfg, layout, gt.as_ref());
    let outcome = if args.stage == 2 {
        let pseudo = load_labels(&pseudo_path(cfg, layout))?;
        let resume = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
        let model = build_model(&cfg.model, cfg.train.seed)?;
        train_stage2(model, &volume, &pseudo, &setup, resume.as_ref())?
    } else {
        let path = args
            .checkpoint
            .clone()
            .unwrap_or_else(|| final_checkpoint_path(&layout.checkpoints(), 2));
        if !path.exists() {
            return Err(Error::Config(format!(
                "stage 3 needs a stage-2 checkpoint; {} does not exist",
                path.display()
            )));
        }
        train_stage3(&Checkpoint::load(&path)?, &volume, &setup)?
    };
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let last = outcome.history.last();
    Ok(format!(
        "stage {} finished at epoch {}{}",
        args.stage,
        outcome.checkpoint.epoch,
        last.and_then(|r| r.loss)
            .map(|l| format!(", loss {l:.5}"))
            .unwrap_or_default()
    ))
}

fn selected_slices(cfg: &RunConfig, depth: usize) -> Result<Vec<usize>> {
    if let Some(&z) = cfg.eval.slices.iter().find(|&&z| z >= depth) {
        return Err(Error::Config(format!(
            "eval.slices contains {z} but the volume has {depth} slices"
        )));
    }
    Ok(if cfg.eval.slices.is_empty() {
        (0..depth).collect()
    } else {
        cfg.eval.slices.clone()
    })
}

fn cmd_eval(cfg: &RunConfig, layout: &RunLayout, args: &EvalArgs) -> Result<String> {
    let volume = load_input(cfg)?;
    let gt = ground_truth(cfg)?.ok_or_else(|| Error::Config("eval needs io.ground_truth".into()))?;
    if gt.shape() != volume.shape() {
        return Err(Error::Shape(format!(
            "ground truth {:?} vs volume {:?}",
            gt.shape(),
            volume.shape()
        )));
    }
    let given = args.labels.as_deref().map(load_labels).transpose()?;
    let model = match &given {
        Some(l) if l.shape() != gt.shape() => {
            return Err(Error::Shape(format!(
                "labels {:?} vs ground truth {:?}",
                l.shape(),
                gt.shape()
            )));
        }
        Some(_) => None,
        None => Some(Checkpoint::load(&default_checkpoint(layout, &args.checkpoint)?)?.deployed()?),
    };
    let slices = selected_slices(cfg, volume.depth())?;
    let preds = match (&model, &given) {
        (Some(m), _) => segment_slices(m, &volume, &slices, cfg.workers)?,
        (None, Some(l)) => slices.iter().map(|&z| l.slice_map(z)).collect(),
        (None, None) => unreachable!(),
    };
    let mut pred_all = Vec::new();
    let mut gt_all = Vec::new();
    for (n, (&z, pred)) in slices.iter().zip(&preds).enumerate() {
        if n < cfg.eval.max_overlays {
            save_overlay_png(
                volume.slice(z),
                pred,
                cfg.eval.overlay_alpha,
                &layout.dir.join(format!("overlay_z{z:04}.png")),
            )?;
            save_labels_png(pred, &layout.dir.join(format!("labels_z{z:04}.png")))?;
        }
        pred_all.extend_from_slice(&pred.labels);
        gt_all.extend_from_slice(gt.slice(z));
    }
    let report = miou(&pred_all, &gt_all, &cfg.eval.ignore)?;
    write_json(&layout.dir.join("eval_report.json"), &report)?;
    Ok(format!(
        "accuracy {:.4}, mIoU {:.4} over {} slices",
        report.pixel_accuracy,
        report.miou,
        slices.len()
    ))
}

fn cmd_gradcam(cfg: &RunConfig, layout: &RunLayout, args: &GradcamArgs) -> Result<String> {
    let ck = Checkpoint::load(&default_checkpoint(layout, &args.checkpoint)?)?;
    let model = ck.deployed()?;
    let volume = load_input(cfg)?;
    if args.slice >= volume.depth() {
        return Err(Error::InvalidArgument(format!(
            "slice {} is outside the volume",
            args.slice
        )));
    }
    let layer: LayerId = args.layer.as_deref().unwrap_or(&cfg.eval.gradcam_layer).parse()?;
    let stack = extract_stack(&volume, args.slice, model.net.config().in_channels)?;
    let padded = pad_to_multiple(&stack, model.net.config().divisor());
    let mut cam = grad_cam(&model, &padded, args.class, layer)?;
    if (padded.height, padded.width) != (stack.height, stack.width) {
        let mut values = Vec::with_capacity(stack.plane_len());
        for r in 0..stack.height {
            values.extend_from_slice(&cam.values[r * padded.width..r * padded.width + stack.width]);
        }
        cam.values = values;
        cam.height = stack.height;
        cam.width = stack.width;
    }
    let stem = format!("gradcam_z{:04}_c{}_{}", args.slice, args.class, layer);
    save_heatmap_png(&cam, &layout.dir.join(format!("{stem}.png")))?;
    write_json(&layout.dir.join(format!("{stem}.json")), &cam)?;
    Ok(format!(
        "{stem}.png written{}",
        if cam.class_absent {
            " (class not predicted: all-zero map)"
        } else {
            ""
        }
    ))
}

fn cmd_confusion(cfg: &RunConfig, layout: &RunLayout, args: &ConfusionArgs) -> Result<String> {
    let pseudo = load_labels(&pseudo_path(cfg, layout))?;
    let final_labels = match &args.labels {
        Some(p) => load_labels(p)?,
        None => {
            let ck = Checkpoint::load(&default_checkpoint(layout, &args.checkpoint)?)?;
            segment_volume_with(&ck.deployed()?, &load_input(cfg)?, cfg.workers)?
        }
    };
    let m = cluster_class_confusion(&pseudo, &final_labels, !args.keep_background)?;
    let table = m.to_table();
    write_atomic(&layout.dir.join("confusion.tsv"), table.as_bytes())?;
    write_json(&layout.dir.join("confusion.json"), &m)?;
    Ok(table)
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let result =
        RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides).and_then(|cfg| run(&cfg, &cli.command));
    match result {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                EXIT_CONFIG
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
