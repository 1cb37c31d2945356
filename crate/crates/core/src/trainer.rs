//! Progressive multi-phase training.
//!
//! Every batch runs `StageNum + 1` phases. Phase `n` feeds mosaic images of
//! depth `N - n + 1` through the whole network, supervises head `n`, and
//! immediately applies one optimizer update to the parameters that head's
//! prediction used. The final phase supervises the concatenation head on
//! the untouched images.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, Checkpoint, RngState};
use crate::data::{apply_transform, Dataset, TransformMode, TransformSpec};
use crate::error::{Error, Result};
use crate::evalkit::{argmax, evaluate, EvalReport};
use crate::image::ImageTensor;
use crate::model::{HeadId, Heads, Model, ModelConfig};
use crate::nn::{cross_entropy, cross_entropy_backward, Mode};
use crate::optim::{GroupRates, Sgd};
use crate::rmg::{self, MAX_DEFAULT_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub head: HeadId,
    /// Mosaic recursion depth of this phase's input.
    pub r: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
}

impl PhaseSchedule {
    pub fn max_depth(&self) -> u32 {
        self.phases.iter().map(|p| p.r).max().unwrap_or(0)
    }

    /// Depths above 3 need an explicit override.
    pub fn requires_override(&self) -> bool {
        self.max_depth() > MAX_DEFAULT_DEPTH
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

/// Stage phases `n = N - StageNum + 1 ..= N` with `r = N - n + 1`, then the
/// concatenation phase with `r = 0`.
pub fn build_schedule(stages: usize, stage_num: usize) -> Result<PhaseSchedule> {
    if stage_num == 0 || stage_num > stages {
        return Err(Error::InvalidStageNum { stage_num, stages });
    }
    let mut phases: Vec<Phase> = (stages - stage_num + 1..=stages)
        .map(|n| Phase {
            head: HeadId::Stage(n),
            r: (stages - n + 1) as u32,
        })
        .collect();
    phases.push(Phase {
        head: HeadId::Concat,
        r: 0,
    });
    Ok(PhaseSchedule { phases })
}

/// Which of the training mechanisms are switched on. Interaction itself is
/// a model property ([`ModelConfig::interaction`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainingMechanisms {
    /// Stage phases before the concatenation phase.
    pub progressive: bool,
    /// Mosaic inputs for stage phases (only meaningful with `progressive`).
    pub mosaic: bool,
}

impl Default for TrainingMechanisms {
    fn default() -> Self {
        Self {
            progressive: true,
            mosaic: true,
        }
    }
}

/// Schedule for a mechanism combination: single concat phase without
/// progression, depth 0 everywhere without mosaics.
pub fn schedule_for(stages: usize, stage_num: usize, mech: TrainingMechanisms) -> Result<PhaseSchedule> {
    let mut schedule = build_schedule(stages, stage_num)?;
    if !mech.progressive {
        schedule.phases.retain(|p| p.head == HeadId::Concat);
    } else if !mech.mosaic {
        schedule.phases.iter_mut().for_each(|p| p.r = 0);
    }
    Ok(schedule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_pretrained: f64,
    pub lr_new: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub freeze_epochs: usize,
    pub stage_num: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub mechanisms: TrainingMechanisms,
    /// Permits mosaic depths above 3.
    pub allow_deep_mosaic: bool,
    pub transform: TransformSpec,
}

impl Default for TrainConfig {
    /// Full-scale protocol: 150 epochs, batch 32, SGD(0.9, 5e-4),
    /// lr 1e-4 / 1e-3, backbone frozen for 5 epochs.
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            lr_pretrained: 1e-4,
            lr_new: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
            freeze_epochs: 5,
            stage_num: 3,
            seed: 0,
            schedule: LrSchedule::Cosine,
            mechanisms: TrainingMechanisms::default(),
            allow_deep_mosaic: false,
            transform: TransformSpec::full(TransformMode::Train),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_pretrained", self.lr_pretrained),
            ("lr_new", self.lr_new),
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 || self.freeze_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.freeze_epochs ({}) must be below train.epochs ({})",
                self.freeze_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn rates(&self) -> GroupRates {
        GroupRates {
            pretrained: self.lr_pretrained,
            new: self.lr_new,
        }
    }

    /// Rates in force during 0-based `epoch`.
    pub fn rates_at(&self, epoch: usize) -> GroupRates {
        match self.schedule {
            LrSchedule::Cosine => self.rates().cosine(epoch, self.epochs),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub head: HeadId,
    pub r: u32,
    pub loss: f64,
    pub correct: usize,
    pub tensors_updated: usize,
    /// Whether the phase input equals the untransformed batch.
    pub input_unmodified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub phases: Vec<PhaseReport>,
    pub forward_passes: usize,
    pub optimizer_updates: usize,
}

impl StepReport {
    pub fn total_loss(&self) -> f64 {
        self.phases.iter().map(|p| p.loss).sum()
    }
}

/// Per-step knobs the trainer derives from the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPolicy {
    pub rates: GroupRates,
    pub freeze_backbone: bool,
}

/// One training iteration over a batch. Mosaic randomness is drawn per image
/// per phase from `rng`.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    optimizer: &mut Sgd,
    images: &[ImageTensor],
    labels: &[usize],
    schedule: &PhaseSchedule,
    policy: StepPolicy,
    rng: &mut R,
) -> Result<StepReport> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if images.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: images.len(),
            actual: labels.len(),
        });
    }
    let forwards_before = model.counters.forward_passes;
    let steps_before = optimizer.steps;
    let mut phases = Vec::with_capacity(schedule.len());
    for (index, phase) in schedule.phases.iter().enumerate() {
        let inputs: Vec<ImageTensor> = if phase.r == 0 {
            images.to_vec()
        } else {
            images
                .iter()
                .map(|img| rmg::generate_with_rng(img, phase.r, rng).map(|(out, _)| out))
                .collect::<Result<_>>()?
        };
        let input_unmodified = inputs.as_slice() == images;
        let refs: Vec<&ImageTensor> = inputs.iter().collect();
        let batch = model.batch(&refs)?;
        let out = model.forward(&batch, Mode::Train, Heads::Only(phase.head))?;
        let probs = match phase.head {
            HeadId::Stage(n) => out.stage_probs.get(&n).cloned(),
            HeadId::Concat => out.concat_probs.clone(),
        }
        .expect("requested head was evaluated");
        let loss = cross_entropy(&probs, labels);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss,
                phase: index + 1,
                epoch: 0,
                batch: 0,
            });
        }
        let correct = probs
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(&row.to_vec()) == y)
            .count();
        let grad = cross_entropy_backward(&probs, labels);
        let back = model.backward(phase.head, &grad, false)?;
        let used = back.used;
        let freeze = policy.freeze_backbone;
        let tensors_updated = optimizer.step(model, policy.rates, &|g| used.contains(g) && !(freeze && g.is_backbone()));
        phases.push(PhaseReport {
            head: phase.head,
            r: phase.r,
            loss,
            correct,
            tensors_updated,
            input_unmodified,
        });
    }
    Ok(StepReport {
        phases,
        forward_passes: model.counters.forward_passes - forwards_before,
        optimizer_updates: optimizer.steps - steps_before,
    })
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    /// Phase number (1-based) or `eval`.
    pub phase: String,
    /// Stage index, `concat`, or empty for eval rows.
    pub stage: String,
    pub loss: f64,
    pub acc_concat: Option<f64>,
    pub acc_mix: Option<f64>,
    pub lr_pretrained: f64,
    pub lr_new: f64,
}

pub const METRICS_HEADER: &str = "epoch,phase,stage,loss,acc_concat,acc_mix,lr_pretrained,lr_new";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{},{},{:.8},{:.8}",
            self.epoch,
            self.phase,
            self.stage,
            self.loss,
            opt(self.acc_concat),
            opt(self.acc_mix),
            self.lr_pretrained,
            self.lr_new
        )
    }

    pub fn is_eval(&self) -> bool {
        self.phase == "eval"
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.to_csv());
        }
        out
    }

    pub fn eval_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.is_eval())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::CorruptCheckpoint("metrics header".into()));
        }
        let bad = |l: &str| Error::CorruptCheckpoint(format!("metrics row `{l}`"));
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            rows.push(MetricsRow {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                phase: f[1].to_string(),
                stage: f[2].to_string(),
                loss: num(f[3])?,
                acc_concat: opt(f[4])?,
                acc_mix: opt(f[5])?,
                lr_pretrained: num(f[6])?,
                lr_new: num(f[7])?,
            });
        }
        Ok(Self { rows })
    }
}

/// Stop predicate evaluated after each epoch's eval row (1-based epoch).
pub type EarlyStop<'a> = &'a dyn Fn(usize, &EvalReport) -> bool;

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Dataset for the per-epoch eval row; the training set when absent.
    pub eval: Option<&'a Dataset>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs (counted from the start of
    /// training, not from the resume point).
    pub stop_after: Option<usize>,
    /// Written after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    /// Rewritten after every epoch.
    pub metrics_path: Option<PathBuf>,
    pub early_stop: Option<EarlyStop<'a>>,
}

#[derive(Debug)]
pub struct FitResult {
    pub model: Model,
    pub optimizer: Sgd,
    pub metrics: MetricsLog,
    pub rng: RngState,
    pub epochs_completed: usize,
    pub last_eval: Option<EvalReport>,
}

impl FitResult {
    pub fn checkpoint(&self, train: &TrainConfig) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: train.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.clone(),
            epochs_completed: self.epochs_completed,
            metrics: self.metrics.clone(),
        }
    }
}

fn load_batch(
    dataset: &Dataset,
    indices: &[usize],
    spec: &TransformSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ImageTensor>, Vec<usize>)> {
    let mut images = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let sample = &dataset.samples[i];
        images.push(apply_transform(&sample.load()?, spec, rng)?);
        labels.push(sample.label);
    }
    Ok((images, labels))
}

/// Runs the full training protocol.
pub fn fit(train: &Dataset, model_config: &ModelConfig, config: &TrainConfig, options: FitOptions<'_>) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    if model_config.stage_num != config.stage_num {
        return Err(Error::Config(format!(
            "model StageNum {} differs from train StageNum {}",
            model_config.stage_num, config.stage_num
        )));
    }
    if model_config.classes != train.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            model_config.classes,
            train.num_classes()
        )));
    }
    if let Some(bad) = train.samples.iter().find(|s| s.label >= model_config.classes) {
        return Err(Error::Config(format!("label {} out of range", bad.label)));
    }

    let (mut model, mut optimizer, mut rng, mut metrics, start_epoch) = match options.resume {
        Some(ckpt) => {
            ckpt.check_compatible(model_config, config)?;
            let rng = ckpt.rng.restore();
            (ckpt.model, ckpt.optimizer, rng, ckpt.metrics, ckpt.epochs_completed)
        }
        None => (
            Model::new(model_config.clone())?,
            Sgd::new(config.momentum, config.weight_decay),
            ChaCha8Rng::seed_from_u64(config.seed),
            MetricsLog::default(),
            0,
        ),
    };
    let schedule = schedule_for(model.stages(), config.stage_num, config.mechanisms)?;
    if schedule.requires_override() && !config.allow_deep_mosaic {
        return Err(Error::RecursionLimit(schedule.max_depth()));
    }
    config.transform.validate(schedule.max_depth())?;
    let train_spec = config.transform.with_mode(TransformMode::Train);
    let eval_spec = config.transform.with_mode(TransformMode::Eval);
    let eval_set = options.eval.unwrap_or(train);
    let end_epoch = options.stop_after.unwrap_or(config.epochs).min(config.epochs);
    let mut last_eval = None;
    let mut epochs_completed = start_epoch;

    for epoch in start_epoch..end_epoch {
        let policy = StepPolicy {
            rates: config.rates_at(epoch),
            freeze_backbone: epoch < config.freeze_epochs,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut phase_loss = vec![0.0; schedule.len()];
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let (images, labels) = load_batch(train, chunk, &train_spec, &mut batch_rng)?;
            let report = train_step(&mut model, &mut optimizer, &images, &labels, &schedule, policy, &mut batch_rng)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { loss, phase, .. } => Error::NonFiniteLoss {
                        loss,
                        phase,
                        epoch: epoch + 1,
                        batch: b + 1,
                    },
                    other => other,
                })?;
            for (acc, p) in phase_loss.iter_mut().zip(&report.phases) {
                *acc += p.loss;
            }
            batches += 1;
        }
        let rates = policy.rates;
        let mut total = 0.0;
        for (i, (phase, loss)) in schedule.phases.iter().zip(&phase_loss).enumerate() {
            let mean = loss / batches as f64;
            total += mean;
            metrics.rows.push(MetricsRow {
                epoch: epoch + 1,
                phase: (i + 1).to_string(),
                stage: phase.head.to_string(),
                loss: mean,
                acc_concat: None,
                acc_mix: None,
                lr_pretrained: rates.pretrained,
                lr_new: rates.new,
            });
        }
        let report = evaluate(&mut model, eval_set, &eval_spec)?;
        metrics.rows.push(MetricsRow {
            epoch: epoch + 1,
            phase: "eval".into(),
            stage: String::new(),
            loss: total,
            acc_concat: Some(report.acc_concat),
            acc_mix: Some(report.acc_mix),
            lr_pretrained: rates.pretrained,
            lr_new: rates.new,
        });
        log::info!(
            "epoch {}/{}: loss {:.4} acc_concat {:.4} acc_mix {:.4}",
            epoch + 1,
            config.epochs,
            total,
            report.acc_concat,
            report.acc_mix
        );
        epochs_completed = epoch + 1;
        let stop = options.early_stop.is_some_and(|f| f(epoch + 1, &report));
        last_eval = Some(report);

        if let Some(path) = &options.metrics_path {
            fs::write(path, metrics.to_csv())?;
        }
        if let Some(path) = &options.checkpoint_path {
            let ckpt = Checkpoint {
                model: model.clone(),
                train: config.clone(),
                optimizer: optimizer.clone(),
                rng: RngState::capture(&rng),
                epochs_completed: epoch + 1,
                metrics: metrics.clone(),
            };
            save_checkpoint(&ckpt, path)?;
        }
        if stop {
            break;
        }
    }
    Ok(FitResult {
        rng: RngState::capture(&rng),
        model,
        optimizer,
        metrics,
        epochs_completed,
        last_eval,
    })
}
