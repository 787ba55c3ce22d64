//! Loss, schedules and the training loops.

mod loss;
mod schedule;

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{epoch_seed, sampling_plan, Label, Manifest, SamplingTarget};
use crate::error::{Error, Result};
use crate::imaging::{derive_seed, resize_bilinear, AugmentSpec, ImageBuffer};
use crate::models::{build_covid_net, CovidNetConfig, ModelGraph, STAGE1_CLASSES, STAGE2_CLASSES};
use crate::tensor::{adam_step, AdamHyper, Tensor};

pub use loss::{
    class_weights, smooth_indices, smooth_targets, weighted_smoothed_ce, ClassWeights, LossOutput,
    SmoothedTarget, WeightsMode, PROB_FLOOR,
};
pub use schedule::{EarlyStopping, Schedule, Scheduler};

/// Decoded images with class indices into a model's `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<ImageBuffer>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Vec<ImageBuffer>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    /// Loads `indices` of `manifest`, resizing every image to `size × size`
    /// up front so augmentation works at network resolution.
    pub fn from_manifest(manifest: &Manifest, indices: &[usize], classes: &[Label], size: usize) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let label = manifest.records[i].label;
            let class = classes.iter().position(|&l| l == label).ok_or_else(|| {
                Error::InvalidInput(format!("label {label} is not among {classes:?}"))
            })?;
            images.push(resize_bilinear(&manifest.load_image(i)?, size, size));
            labels.push(class);
        }
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn map_labels(&self, f: impl Fn(usize) -> usize) -> Self {
        Self {
            images: self.images.clone(),
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Batches per epoch; `None` walks the whole sampling plan once.
    pub steps_per_epoch: Option<usize>,
    pub max_epochs: usize,
    pub initial_lr: f64,
    pub schedule: Schedule,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub label_smoothing: f64,
    /// Class weighting of the loss; `None` weighs every class 1.
    pub weights_mode: Option<WeightsMode>,
    pub sampling: SamplingTarget,
    pub augment: Option<AugmentSpec>,
    /// Train only the classifier head.
    pub freeze_backbone: bool,
}

impl TrainConfig {
    /// Batch 128, 5 steps per epoch, at most 100 epochs, Adam at 1e-3 halved
    /// every 5 epochs, early stop after 15 stale epochs.
    pub fn filter() -> Self {
        Self {
            batch_size: 128,
            steps_per_epoch: Some(5),
            max_epochs: 100,
            initial_lr: 1e-3,
            schedule: Schedule::StepDecay {
                factor: 0.5,
                every_n_epochs: 5,
            },
            early_stop_patience: 15,
            label_smoothing: 0.0,
            weights_mode: None,
            sampling: SamplingTarget::Natural,
            augment: Some(AugmentSpec::filter()),
            freeze_backbone: false,
        }
    }

    /// Adam at 1e-5 halved on a 5-epoch plateau, early stop after 5 stale
    /// epochs, label smoothing 0.1, inverse class weights and equalized
    /// oversampling.
    pub fn classifier() -> Self {
        Self {
            batch_size: 32,
            steps_per_epoch: None,
            max_epochs: 100,
            initial_lr: 1e-5,
            schedule: Schedule::Plateau {
                factor: 0.5,
                patience: 5,
            },
            early_stop_patience: 5,
            label_smoothing: 0.1,
            weights_mode: Some(WeightsMode::Inverse),
            sampling: SamplingTarget::Equalized,
            augment: Some(AugmentSpec::classifier()),
            freeze_backbone: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config("batch_size, max_epochs and steps_per_epoch must be positive".into()));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.initial_lr)));
        }
        if let Some(spec) = &self.augment {
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub validation_accuracy: f64,
    pub lr: f64,
    /// Probabilities that hit the log floor during this epoch's updates.
    pub clamped_probabilities: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.epochs {
            let line = serde_json::to_string(r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Inverse of [`write_jsonl`](Self::write_jsonl); the best epoch is
    /// recomputed as the first minimum of validation loss.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut epochs = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                epochs.push(serde_json::from_str::<EpochRecord>(&line)?);
            }
        }
        let best_epoch = best_index(&epochs);
        Ok(Self { epochs, best_epoch })
    }
}

fn best_index(epochs: &[EpochRecord]) -> usize {
    let mut best = 0;
    for (i, e) in epochs.iter().enumerate() {
        if e.validation_loss < epochs[best].validation_loss {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters restored to the best validation epoch.
    pub model: ModelGraph,
    pub history: TrainHistory,
}

/// Stacks preprocessed samples into a batch tensor. `augment` carries the
/// spec and the base seed; sample `k` of the batch uses its own stream
/// derived from `(seed, epoch, position + k)`.
fn prepare_batch(
    model: &ModelGraph,
    images: &[&ImageBuffer],
    augment: Option<(&AugmentSpec, u64, usize, usize)>,
) -> Result<Tensor> {
    let pre = model.config.preprocess();
    let samples: Vec<Tensor> = images
        .iter()
        .enumerate()
        .map(|(k, img)| match augment {
            Some((spec, seed, epoch, position)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64, (position + k) as u64]));
                pre.apply(img, Some((spec, &mut rng)))
            }
            None => pre.apply(img, None),
        })
        .collect();
    Tensor::stack(&samples)
}

/// Class probabilities for `images`, computed `batch_size` at a time.
pub fn predict(model: &ModelGraph, images: &[ImageBuffer], batch_size: usize) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(images.len() * model.num_classes());
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageBuffer> = chunk.iter().collect();
        let out = model.forward(&prepare_batch(model, &refs, None)?)?;
        rows.extend_from_slice(out.probabilities.data());
    }
    Tensor::new(vec![images.len(), model.num_classes()], rows)
}

/// Mean loss (same weighting and smoothing as training) and accuracy.
pub fn evaluate_loss(
    model: &ModelGraph,
    set: &LabeledSet,
    weights: &ClassWeights,
    alpha: f64,
    batch_size: usize,
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let probs = predict(model, &set.images, batch_size)?;
    let targets = smooth_indices(&set.labels, model.num_classes(), alpha)?;
    let loss = weighted_smoothed_ce(&probs, &targets, weights)?.loss;
    let correct = probs
        .argmax_rows()?
        .iter()
        .zip(&set.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok((loss, correct as f64 / set.len() as f64))
}

fn loss_weights(config: &TrainConfig, train: &LabeledSet, classes: usize) -> Result<ClassWeights> {
    match config.weights_mode {
        Some(mode) => class_weights(&train.class_counts(classes), mode),
        None => Ok(ClassWeights::uniform(classes)),
    }
}

fn largest_gradient(model: &ModelGraph) -> String {
    model
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.grad.max_abs()))
        .fold(None, |acc: Option<(&str, f32)>, (n, g)| match acc {
            Some((_, best)) if !(g > best || g.is_nan()) => acc,
            _ => Some((n, g)),
        })
        .map(|(n, g)| format!("{n} max|grad|={g}"))
        .unwrap_or_default()
}

/// Adam training with per-epoch validation, the configured schedule and
/// early stopping. Returns the parameters of the best validation epoch.
pub fn train(
    mut model: ModelGraph,
    train: &LabeledSet,
    validation: &LabeledSet,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::InvalidInput("training and validation sets must be non-empty".into()));
    }
    let classes = model.num_classes();
    if let Some(&bad) = train.labels.iter().chain(&validation.labels).find(|&&l| l >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} out of range for a {classes}-class model")));
    }
    model.freeze_backbone(config.freeze_backbone);
    let weights = loss_weights(config, train, classes)?;
    let alpha = config.label_smoothing;
    let mut scheduler = Scheduler::new(config.schedule, config.initial_lr);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut history = TrainHistory::default();
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut best_loss = f64::INFINITY;

    for epoch in 0..config.max_epochs {
        let lr = scheduler.lr();
        let hyper = AdamHyper::with_lr(lr);
        let plan = sampling_plan(&train.labels, classes, config.sampling, None, epoch_seed(seed, epoch))?;
        let steps = config
            .steps_per_epoch
            .unwrap_or_else(|| plan.indices.len().div_ceil(config.batch_size));
        let (mut loss_sum, mut seen, mut clamped) = (0.0, 0usize, 0usize);
        for step in 0..steps {
            let start = step * config.batch_size;
            let end = match config.steps_per_epoch {
                Some(_) => start + config.batch_size,
                None => (start + config.batch_size).min(plan.indices.len()),
            };
            let picks: Vec<usize> = (start..end).map(|k| plan.indices[k % plan.indices.len()]).collect();
            let images: Vec<&ImageBuffer> = picks.iter().map(|&i| &train.images[i]).collect();
            let labels: Vec<usize> = picks.iter().map(|&i| train.labels[i]).collect();
            let batch = prepare_batch(
                &model,
                &images,
                config.augment.as_ref().map(|s| (s, seed, epoch, start)),
            )?;

            model.zero_grad();
            let (out, trace) = model.forward_traced(&batch)?;
            let targets = smooth_indices(&labels, classes, alpha)?;
            let l = weighted_smoothed_ce(&out.probabilities, &targets, &weights)?;
            model.backward(&trace, &l.dlogits)?;
            if !l.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: step,
                    diagnostics: largest_gradient(&model),
                });
            }
            for p in model.params.iter_mut().filter(|p| !p.frozen) {
                adam_step(p, &hyper)?;
            }
            loss_sum += l.loss * labels.len() as f64;
            seen += labels.len();
            clamped += l.clamped;
        }

        let (validation_loss, validation_accuracy) =
            evaluate_loss(&model, validation, &weights, alpha, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            validation_loss,
            validation_accuracy,
            lr,
            clamped_probabilities: clamped,
        };
        tracing::info!(
            epoch,
            train_loss = record.train_loss,
            validation_loss,
            validation_accuracy,
            lr,
            "epoch finished"
        );
        history.epochs.push(record);
        if validation_loss < best_loss {
            best_loss = validation_loss;
            history.best_epoch = epoch;
            best_params = Some(model.params.iter().map(|p| p.value.clone()).collect());
        }
        scheduler.next(epoch, validation_loss);
        if stopper.update(validation_loss) {
            tracing::info!(epoch, "early stopping");
            break;
        }
    }

    if let Some(best) = best_params {
        for (p, v) in model.params.iter_mut().zip(best) {
            p.value = v;
        }
    }
    for p in &mut model.params {
        p.zero_grad();
        p.frozen = false;
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub model: ModelGraph,
    pub stage1: Option<TrainHistory>,
    pub stage2: TrainHistory,
    /// The 3-class graph exactly as stage 2 started from it.
    pub stage2_init: ModelGraph,
}

/// Stage 1 learns no_finding vs lung_opacity with covid19 folded into
/// lung_opacity; stage 2 swaps in a fresh 3-class head and fine-tunes the
/// whole network. Labels in `train`/`validation` index [`STAGE2_CLASSES`].
///
/// With `skip_stage1`, stage 2 starts from a randomly initialized 3-class
/// network built with the same seed.
pub fn train_two_stage(
    covid_config: &CovidNetConfig,
    train_set: &LabeledSet,
    validation: &LabeledSet,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    seed: u64,
    skip_stage1: bool,
) -> Result<TwoStageOutcome> {
    let fold = |l: usize| if l == 2 { 1 } else { l };
    let (backbone, stage1_history) = if skip_stage1 {
        let cfg = CovidNetConfig {
            num_classes: 2,
            ..covid_config.clone()
        };
        (build_covid_net(&cfg)?, None)
    } else {
        let cfg = CovidNetConfig {
            num_classes: 2,
            ..covid_config.clone()
        };
        let out = train(
            build_covid_net(&cfg)?,
            &train_set.map_labels(fold),
            &validation.map_labels(fold),
            stage1,
            derive_seed(seed, &[1]),
        )?;
        debug_assert_eq!(out.model.class_names, STAGE1_CLASSES);
        (out.model, Some(out.history))
    };
    let stage2_init = backbone.with_new_head(&STAGE2_CLASSES, derive_seed(seed, &[2, 0]))?;
    let out = train(stage2_init.clone(), train_set, validation, stage2, derive_seed(seed, &[2]))?;
    Ok(TwoStageOutcome {
        model: out.model,
        stage1: stage1_history,
        stage2: out.history,
        stage2_init,
    })
}

#[cfg(test)]
mod tests;
