//! Stage 2 (supervised training on pseudo labels) and stage 3
//! (student/teacher self-correction).
//!
//! Every epoch visits each training slice once, in an order shuffled from
//! `(seed, stage, epoch)`. Because all randomness of an epoch is derived from
//! that triple, resuming from an epoch checkpoint replays exactly the same
//! samples as an uninterrupted run.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_strong, AugmentPolicy, StrongPolicy, WeakOp};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evalkit::evaluate_volumes;
use crate::losses::{loss_sum_and_grad, LossConfig};
use crate::nn::{Adam, AdamConfig};
use crate::segnet::{segment_volume, softmax_probs, LogitsMap, Mode, Model, ProbMap};
use crate::volume::{extract_stack, random_crop, LabelMap, LabelVolume, SliceStack, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub batch_size: usize,
    #[serde(serialize_with = "crate::config::short_f32")]
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    /// Square training crop; must fit in a slice and be divisible by the
    /// network's downsampling factor.
    pub crop_size: usize,
    pub num_slices: usize,
    /// Confidence threshold: a teacher pixel supervises the student only if
    /// its top probability is strictly greater.
    pub delta: f64,
    /// EMA momentum of the teacher.
    #[serde(serialize_with = "crate::config::short_f32")]
    pub alpha: f32,
    pub seed: u64,
    /// Loss used in stage 3 (stage 2 uses the run's `loss` section).
    pub stage3_loss: LossConfig,
    /// Start stage 3 with the stage-2 optimizer moments instead of a fresh
    /// Adam, avoiding the large first steps of an uncalibrated optimizer.
    pub stage3_keep_optimizer: bool,
    /// Write an epoch checkpoint every N epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Consecutive empty-mask steps tolerated before a warning is issued.
    pub empty_mask_patience: usize,
    /// Evaluate against ground truth (when supplied) every N epochs; the last
    /// epoch is always evaluated. 0 evaluates only the last epoch.
    pub eval_every: usize,
    /// Restrict training to these slice indices; empty means every slice.
    pub slices: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_stage2: 200,
            epochs_stage3: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            crop_size: 512,
            num_slices: 7,
            delta: 0.5,
            alpha: 0.99,
            seed: 0,
            stage3_loss: LossConfig::cross_entropy(),
            stage3_keep_optimizer: true,
            checkpoint_every: 0,
            empty_mask_patience: 100,
            eval_every: 10,
            slices: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("train.delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("train.alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.num_slices % 2 == 0 {
            return bad(format!("train.num_slices must be odd, got {}", self.num_slices));
        }
        if self.crop_size == 0 {
            return bad("train.crop_size must be positive".into());
        }
        self.stage3_loss.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    fn check_against(&self, model: &Model, volume: &Volume) -> Result<()> {
        let mc = model.net.config();
        if mc.in_channels != self.num_slices {
            return Err(Error::Config(format!(
                "train.num_slices = {} but the model expects {} input channels",
                self.num_slices, mc.in_channels
            )));
        }
        let (d, h, w) = volume.shape();
        if self.crop_size > h || self.crop_size > w {
            return Err(Error::Config(format!(
                "train.crop_size {} does not fit in {h}x{w} slices",
                self.crop_size
            )));
        }
        if self.crop_size % mc.divisor() != 0 {
            return Err(Error::Config(format!(
                "train.crop_size {} is not a multiple of {} (2^model.depth)",
                self.crop_size,
                mc.divisor()
            )));
        }
        if let Some(&z) = self.slices.iter().find(|&&z| z >= d) {
            return Err(Error::Config(format!(
                "train.slices contains {z} but the volume has {d} slices"
            )));
        }
        Ok(())
    }

    fn training_slices(&self, depth: usize) -> Vec<usize> {
        if self.slices.is_empty() {
            (0..depth).collect()
        } else {
            self.slices.clone()
        }
    }
}

/// Teacher parameters tracked as an exponential moving average of the student.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub params: Vec<f32>,
    pub alpha: f32,
    pub update_count: u64,
}

impl TeacherState {
    pub fn from_student(student: &[f32], alpha: f32) -> Self {
        Self {
            params: student.to_vec(),
            alpha,
            update_count: 0,
        }
    }
}

/// `theta_T <- alpha theta_T + (1 - alpha) theta_S`.
pub fn ema_update(teacher: &mut TeacherState, student: &[f32]) -> Result<()> {
    if teacher.params.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} parameters, student {}",
            teacher.params.len(),
            student.len()
        )));
    }
    let a = teacher.alpha;
    for (t, &s) in teacher.params.iter_mut().zip(student) {
        *t = a * *t + (1.0 - a) * s;
    }
    teacher.update_count += 1;
    Ok(())
}

/// `m_i = [max_k p_ik > delta]`.
pub fn confidence_mask(p: &ProbMap, delta: f64) -> Vec<bool> {
    p.max_prob().into_iter().map(|m| m > delta).collect()
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Mean step loss; `None` when every step of the epoch had an empty mask.
    pub loss: Option<f64>,
    /// Fraction of pixels that contributed to the loss (1 in stage 2).
    pub mask_fraction: f64,
    /// Mean top-class probability of the target-producing model on the
    /// training views (student in stage 2, teacher in stage 3).
    pub mean_confidence: f64,
    pub steps: usize,
    pub empty_mask_steps: usize,
    pub student_miou: Option<f64>,
    pub student_accuracy: Option<f64>,
    pub teacher_miou: Option<f64>,
    pub teacher_accuracy: Option<f64>,
}

/// Where a training run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
}

/// Everything a training stage needs besides the model and the volume.
#[derive(Debug, Clone)]
pub struct StageSetup<'a> {
    pub train: TrainConfig,
    /// Stage-2 loss.
    pub loss: LossConfig,
    pub augment: AugmentPolicy,
    /// Ground truth for per-epoch metrics; class 0 is ignored.
    pub ground_truth: Option<&'a LabelVolume>,
    pub outputs: RunOutputs,
}

impl<'a> StageSetup<'a> {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            loss: LossConfig::cross_entropy(),
            augment: AugmentPolicy::default(),
            ground_truth: None,
            outputs: RunOutputs::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// Deterministic generator for one `(seed, stage, epoch, purpose)` stream.
fn stream(seed: u64, stage: u8, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stage as u64 + 1));
    rng.set_stream(((epoch as u64) << 8) | purpose);
    rng
}

fn sample_crop(volume: &Volume, z: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<SliceStack> {
    let stack = extract_stack(volume, z, cfg.num_slices)?;
    random_crop(&stack, (cfg.crop_size, cfg.crop_size), rng)
}

fn append_record(path: &Path, rec: &EpochRecord) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads a metrics log written during training.
pub fn read_metrics_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

fn epoch_checkpoint_path(dir: &Path, stage: u8, epoch: usize) -> PathBuf {
    dir.join(format!("stage{stage}_epoch{epoch:04}.ckpt"))
}

pub fn final_checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}_final.ckpt"))
}

fn metrics_for(model: &Model, volume: &Volume, gt: &LabelVolume) -> Result<(f64, f64)> {
    let pred = segment_volume(model, volume)?;
    let r = evaluate_volumes(&pred, gt, &[0])?;
    Ok((r.miou, r.pixel_accuracy))
}

fn should_eval(cfg: &TrainConfig, epoch: usize, last: usize) -> bool {
    epoch == last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0)
}

fn all_finite(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn mean_max_prob(logits: &[f32], classes: usize, h: usize, w: usize) -> f64 {
    let z = LogitsMap {
        values: logits.iter().map(|&v| v as f64).collect(),
        classes,
        height: h,
        width: w,
    };
    let mp = softmax_probs(&z).max_prob();
    mp.iter().sum::<f64>() / mp.len() as f64
}

/// Bookkeeping shared by both stages at the end of an epoch.
struct EpochEnd<'s, 'a> {
    setup: &'s StageSetup<'a>,
    stage: u8,
    last_good: Option<PathBuf>,
}

impl EpochEnd<'_, '_> {
    fn finish(
        &mut self,
        rec: &EpochRecord,
        ck: impl FnOnce() -> Checkpoint,
        epoch: usize,
        last: usize,
    ) -> Result<Checkpoint> {
        if let Some(p) = &self.setup.outputs.metrics_log {
            append_record(p, rec)?;
        }
        let ck = ck();
        if let Some(dir) = &self.setup.outputs.checkpoint_dir {
            let every = self.setup.train.checkpoint_every;
            if every > 0 && epoch % every == 0 {
                let p = epoch_checkpoint_path(dir, self.stage, epoch);
                ck.save(&p)?;
                self.last_good = Some(p);
            }
            if epoch == last {
                let p = final_checkpoint_path(dir, self.stage);
                ck.save(&p)?;
                self.last_good = Some(p);
            }
        }
        Ok(ck)
    }

    fn diverged(&self, epoch: usize) -> Error {
        Error::Diverged {
            stage: self.stage,
            epoch,
            last_good: self.last_good.clone(),
        }
    }
}

/// Supervised training on pseudo labels. When `resume` holds a stage-2
/// checkpoint, training continues after its epoch counter with its
/// optimizer state.
pub fn train_stage2(
    model: Model,
    volume: &Volume,
    pseudo: &LabelVolume,
    setup: &StageSetup,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.loss.validate()?;
    setup.augment.validate()?;
    cfg.check_against(&model, volume)?;
    if pseudo.shape() != volume.shape() {
        return Err(Error::Shape(format!(
            "pseudo labels {:?} do not match the volume {:?}",
            pseudo.shape(),
            volume.shape()
        )));
    }
    let k = model.net.config().num_classes;
    if pseudo.num_classes() > k {
        return Err(Error::Config(format!(
            "pseudo labels have {} classes but the model predicts {k}",
            pseudo.num_classes()
        )));
    }

    let mut model = model;
    let mut opt = Adam::new(cfg.adam(), model.params.len());
    let mut start = 0;
    if let Some(ck) = resume {
        if ck.stage != 2 {
            return Err(Error::Checkpoint(format!(
                "cannot resume stage 2 from a stage-{} checkpoint",
                ck.stage
            )));
        }
        model = ck.student_model()?;
        opt = ck.optimizer.clone().unwrap_or(opt);
        start = ck.epoch;
    }

    let slices = cfg.training_slices(volume.depth());
    let last = cfg.epochs_stage2;
    let mut end = EpochEnd {
        setup,
        stage: 2,
        last_good: None,
    };
    let mut history = Vec::new();
    let make_ck = |model: &Model, opt: &Adam, epoch: usize| Checkpoint {
        model: model.net.config().clone(),
        stage: 2,
        epoch,
        seed: cfg.seed,
        student: model.params.clone(),
        teacher: None,
        teacher_updates: 0,
        optimizer: Some(opt.clone()),
    };
    let mut ck = make_ck(&model, &opt, start);
    let mut grads = vec![0.0f32; model.params.len()];

    for epoch in start + 1..=last {
        let mut order = slices.clone();
        let mut data_rng = stream(cfg.seed, 2, epoch, 0);
        let mut drop_rng = stream(cfg.seed, 2, epoch, 1);
        order.shuffle(&mut data_rng);
        let mut loss_sum = 0.0;
        let mut conf_sum = 0.0;
        let mut conf_n = 0usize;
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            let mut samples = Vec::with_capacity(batch.len());
            for &z in batch {
                let stack = sample_crop(volume, z, cfg, &mut data_rng)?;
                let labels = pseudo
                    .slice_map(z)
                    .crop(stack.crop_origin, (stack.height, stack.width))?;
                let op = setup.augment.weak.sample(&mut data_rng);
                samples.push((op.apply_stack(&stack)?, op.apply_labels(&labels)?));
            }
            let total_px: usize = samples.iter().map(|(s, _)| s.plane_len()).sum();
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut step_loss = 0.0;
            for (stack, labels) in &samples {
                let (logits, trace) = model.net.forward_sample(
                    &model.params,
                    &stack.data,
                    stack.height,
                    stack.width,
                    &mut Mode::Train(&mut drop_rng),
                )?;
                conf_sum += mean_max_prob(&logits, k, stack.height, stack.width);
                conf_n += 1;
                let (sum, g, _) = loss_sum_and_grad(&setup.loss, &logits, k, &labels.labels, None);
                step_loss += sum;
                let scale = 1.0 / total_px as f64;
                let dlogits: Vec<f32> = g.iter().map(|&v| (v * scale) as f32).collect();
                model
                    .net
                    .backward_sample(&model.params, &trace, &dlogits, &mut grads, None);
            }
            let step_loss = step_loss / total_px as f64;
            if !step_loss.is_finite() || !all_finite(&grads) {
                return Err(end.diverged(epoch));
            }
            opt.update(&mut model.params, &grads);
            if !all_finite(&model.params) {
                return Err(end.diverged(epoch));
            }
            loss_sum += step_loss;
            steps += 1;
        }
        let (student_miou, student_accuracy) = match setup.ground_truth {
            Some(gt) if should_eval(cfg, epoch, last) => {
                let (m, a) = metrics_for(&model, volume, gt)?;
                (Some(m), Some(a))
            }
            _ => (None, None),
        };
        let rec = EpochRecord {
            stage: 2,
            epoch,
            loss: Some(loss_sum / steps.max(1) as f64),
            mask_fraction: 1.0,
            mean_confidence: conf_sum / conf_n.max(1) as f64,
            steps,
            empty_mask_steps: 0,
            student_miou,
            student_accuracy,
            teacher_miou: None,
            teacher_accuracy: None,
        };
        ck = end.finish(&rec, || make_ck(&model, &opt, epoch), epoch, last)?;
        history.push(rec);
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        history,
        warnings: Vec::new(),
    })
}

/// Views and targets of one stage-3 sample.
#[derive(Debug, Clone)]
pub struct Stage3Sample {
    pub weak_op: WeakOp,
    /// Geometrically augmented crop, shown to the teacher.
    pub weak_view: SliceStack,
    /// Photometric augmentation of `weak_view`, shown to the student.
    pub strong_view: SliceStack,
    /// Teacher argmax on the weak view.
    pub targets: LabelMap,
    pub mask: Vec<bool>,
    /// Teacher top-class probability per pixel.
    pub confidence: Vec<f64>,
}

/// Builds a stage-3 sample from a crop: teacher targets come from the weak
/// view and the student input is a photometric-only transform of that same
/// view, so the two stay pixel-aligned.
pub fn prepare_stage3_sample(
    teacher: &Model,
    crop: &SliceStack,
    weak_op: WeakOp,
    strong: &StrongPolicy,
    delta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Stage3Sample> {
    let weak_view = weak_op.apply_stack(crop)?;
    let (logits, _) = teacher.net.forward_sample(
        &teacher.params,
        &weak_view.data,
        weak_view.height,
        weak_view.width,
        &mut Mode::Eval,
    )?;
    let probs = softmax_probs(&LogitsMap {
        values: logits.iter().map(|&v| v as f64).collect(),
        classes: teacher.net.config().num_classes,
        height: weak_view.height,
        width: weak_view.width,
    });
    let targets = crate::segnet::predict(&probs);
    let confidence = probs.max_prob();
    let mask = confidence.iter().map(|&c| c > delta).collect();
    let params = strong.sample(rng);
    let strong_view = apply_strong(&weak_view, &params);
    Ok(Stage3Sample {
        weak_op,
        weak_view,
        strong_view,
        targets,
        mask,
        confidence,
    })
}

/// Result of one student/teacher step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// Masked loss before the update, and the number of supervising pixels.
    Updated { loss: f64, pixels: usize },
    /// No pixel passed the mask; neither model was changed.
    EmptyMask,
}

/// Student update on a batch of prepared samples followed by the EMA step.
pub fn stage3_step(
    student: &mut Model,
    teacher: &mut TeacherState,
    opt: &mut Adam,
    samples: &[Stage3Sample],
    loss: &LossConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let k = student.net.config().num_classes;
    let n: usize = samples.iter().map(|s| s.mask.iter().filter(|&&m| m).count()).sum();
    if n == 0 {
        return Ok(StepOutcome::EmptyMask);
    }
    let mut grads = vec![0.0f32; student.params.len()];
    let mut total = 0.0;
    for s in samples {
        let v = &s.strong_view;
        let (logits, trace) = student.net.forward_sample(
            &student.params,
            &v.data,
            v.height,
            v.width,
            &mut Mode::Train(dropout_rng),
        )?;
        let (sum, g, _) = loss_sum_and_grad(loss, &logits, k, &s.targets.labels, Some(&s.mask));
        total += sum;
        let scale = 1.0 / n as f64;
        let dlogits: Vec<f32> = g.iter().map(|&x| (x * scale) as f32).collect();
        student
            .net
            .backward_sample(&student.params, &trace, &dlogits, &mut grads, None);
    }
    let value = total / n as f64;
    if !value.is_finite() || !all_finite(&grads) {
        return Err(Error::NonFiniteLoss);
    }
    opt.update(&mut student.params, &grads);
    ema_update(teacher, &student.params)?;
    Ok(StepOutcome::Updated { loss: value, pixels: n })
}

/// Self-correction from a stage-2 checkpoint (or resumption from a stage-3
/// one). The returned checkpoint's teacher is the deployed model.
pub fn train_stage3(start: &Checkpoint, volume: &Volume, setup: &StageSetup) -> Result<TrainOutcome> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.augment.validate()?;
    let mut student = start.student_model()?;
    cfg.check_against(&student, volume)?;
    let (mut teacher, mut opt, first) = match start.stage {
        2 => {
            let fresh = || Adam::new(cfg.adam(), student.params.len());
            let opt = match &start.optimizer {
                Some(o) if cfg.stage3_keep_optimizer => Adam {
                    cfg: cfg.adam(),
                    ..o.clone()
                },
                _ => fresh(),
            };
            (TeacherState::from_student(&student.params, cfg.alpha), opt, 1)
        }
        3 => {
            let t = start
                .teacher
                .clone()
                .ok_or_else(|| Error::Checkpoint("stage-3 checkpoint without teacher weights".into()))?;
            let opt = start
                .optimizer
                .clone()
                .unwrap_or_else(|| Adam::new(cfg.adam(), student.params.len()));
            (
                TeacherState {
                    params: t,
                    alpha: cfg.alpha,
                    update_count: start.teacher_updates,
                },
                opt,
                start.epoch + 1,
            )
        }
        s => {
            return Err(Error::Checkpoint(format!(
                "stage 3 needs a stage-2 or stage-3 checkpoint, got stage {s}"
            )))
        }
    };

    let slices = cfg.training_slices(volume.depth());
    let last = cfg.epochs_stage3;
    let mut end = EpochEnd {
        setup,
        stage: 3,
        last_good: None,
    };
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut teacher_model = Model {
        net: student.net.clone(),
        params: teacher.params.clone(),
    };
    let make_ck = |student: &Model, teacher: &TeacherState, opt: &Adam, epoch: usize| Checkpoint {
        model: student.net.config().clone(),
        stage: 3,
        epoch,
        seed: cfg.seed,
        student: student.params.clone(),
        teacher: Some(teacher.params.clone()),
        teacher_updates: teacher.update_count,
        optimizer: Some(opt.clone()),
    };
    let mut ck = make_ck(&student, &teacher, &opt, first - 1);
    let mut empty_streak = 0usize;

    for epoch in first..=last {
        let mut order = slices.clone();
        let mut data_rng = stream(cfg.seed, 3, epoch, 0);
        let mut drop_rng = stream(cfg.seed, 3, epoch, 1);
        let mut photo_rng = stream(cfg.seed, 3, epoch, 2);
        order.shuffle(&mut data_rng);
        let (mut loss_sum, mut loss_steps) = (0.0, 0usize);
        let (mut conf_sum, mut conf_n) = (0.0, 0usize);
        let (mut kept, mut seen) = (0usize, 0usize);
        let (mut steps, mut empty_steps) = (0, 0);
        for batch in order.chunks(cfg.batch_size) {
            teacher_model.params.copy_from_slice(&teacher.params);
            let mut samples = Vec::with_capacity(batch.len());
            for &z in batch {
                let crop = sample_crop(volume, z, cfg, &mut data_rng)?;
                let op = setup.augment.weak.sample(&mut data_rng);
                let s = prepare_stage3_sample(
                    &teacher_model,
                    &crop,
                    op,
                    &setup.augment.strong,
                    cfg.delta,
                    &mut photo_rng,
                )?;
                conf_sum += s.confidence.iter().sum::<f64>();
                conf_n += s.confidence.len();
                kept += s.mask.iter().filter(|&&m| m).count();
                seen += s.mask.len();
                samples.push(s);
            }
            steps += 1;
            match stage3_step(
                &mut student,
                &mut teacher,
                &mut opt,
                &samples,
                &cfg.stage3_loss,
                &mut drop_rng,
            ) {
                Ok(StepOutcome::Updated { loss, .. }) => {
                    empty_streak = 0;
                    loss_sum += loss;
                    loss_steps += 1;
                }
                Ok(StepOutcome::EmptyMask) => {
                    empty_steps += 1;
                    empty_streak += 1;
                    if empty_streak == cfg.empty_mask_patience.max(1) {
                        warnings.push(format!(
                            "stage 3 epoch {epoch}: {empty_streak} consecutive steps had no pixel above confidence {}",
                            cfg.delta
                        ));
                    }
                }
                Err(_) => return Err(end.diverged(epoch)),
            }
            if !all_finite(&teacher.params) {
                return Err(end.diverged(epoch));
            }
        }
        teacher_model.params.copy_from_slice(&teacher.params);
        let (mut sm, mut sa, mut tm, mut ta) = (None, None, None, None);
        if let Some(gt) = setup.ground_truth {
            if should_eval(cfg, epoch, last) {
                let (m, a) = metrics_for(&student, volume, gt)?;
                sm = Some(m);
                sa = Some(a);
                let (m, a) = metrics_for(&teacher_model, volume, gt)?;
                tm = Some(m);
                ta = Some(a);
            }
        }
        let rec = EpochRecord {
            stage: 3,
            epoch,
            loss: (loss_steps > 0).then(|| loss_sum / loss_steps as f64),
            mask_fraction: kept as f64 / seen.max(1) as f64,
            mean_confidence: conf_sum / conf_n.max(1) as f64,
            steps,
            empty_mask_steps: empty_steps,
            student_miou: sm,
            student_accuracy: sa,
            teacher_miou: tm,
            teacher_accuracy: ta,
        };
        ck = end.finish(&rec, || make_ck(&student, &teacher, &opt, epoch), epoch, last)?;
        history.push(rec);
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        history,
        warnings,
    })
}
