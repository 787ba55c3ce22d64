//! Small synthetic models for demos and tests.

use std::path::Path;

use triage_core::evaluation::evaluate_model;
use triage_core::models::{build_filter_net, CovidNetConfig, FilterNetConfig};
use triage_core::synthetic::{class_set, filter_set};
use triage_core::training::{train, train_two_stage, LabeledSet, TrainConfig};

use crate::config::{CLASSIFIER_DIR, FILTER_DIR};
use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoOptions {
    pub input_size: usize,
    /// Upright (and as many quarter-turned) training images for the filter.
    pub filter_samples: usize,
    pub filter_epochs: usize,
    /// Training images per classifier class.
    pub class_samples: usize,
    pub classifier_epochs: usize,
    pub seed: u64,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            input_size: 32,
            filter_samples: 120,
            filter_epochs: 12,
            class_samples: 40,
            classifier_epochs: 4,
            seed: 0,
        }
    }
}

/// Held-out accuracies of the saved demo models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoReport {
    pub filter_accuracy: f64,
    pub classifier_accuracy: f64,
}

fn labeled((images, labels): (Vec<triage_core::imaging::ImageBuffer>, Vec<usize>)) -> LabeledSet {
    LabeledSet { images, labels }
}

/// Trains both networks on synthetic images and saves them as
/// `model_dir/filter` and `model_dir/classifier`.
pub fn build_demo_models(model_dir: &Path, opts: &DemoOptions) -> Result<DemoReport, ServiceError> {
    let size = opts.input_size;
    let seed = opts.seed;
    let filter = build_filter_net(&FilterNetConfig {
        input_size: size,
        seed,
        ..FilterNetConfig::default()
    })?;
    let filter_cfg = TrainConfig {
        batch_size: 32,
        max_epochs: opts.filter_epochs,
        ..TrainConfig::filter()
    };
    let held_out = labeled(filter_set(opts.filter_samples / 4 + 1, size, seed + 2));
    let filter = train(
        filter,
        &labeled(filter_set(opts.filter_samples, size, seed)),
        &labeled(filter_set(opts.filter_samples / 4 + 1, size, seed + 1)),
        &filter_cfg,
        seed,
    )?
    .model;
    let filter_accuracy = evaluate_model(&filter, &held_out, 64)?.accuracy().unwrap_or(0.0);
    filter.save(&model_dir.join(FILTER_DIR))?;

    let n = opts.class_samples;
    let stage = TrainConfig {
        initial_lr: 1e-3,
        max_epochs: opts.classifier_epochs,
        ..TrainConfig::classifier()
    };
    let covid = CovidNetConfig {
        input_size: size,
        seed,
        ..CovidNetConfig::default()
    };
    let out = train_two_stage(
        &covid,
        &labeled(class_set(&[n, n, n / 2 + 1], size, seed)),
        &labeled(class_set(&[n / 4 + 1; 3], size, seed + 1)),
        &stage,
        &stage,
        seed,
        false,
    )?;
    let classifier_accuracy = evaluate_model(&out.model, &labeled(class_set(&[n / 4 + 1; 3], size, seed + 2)), 64)?
        .accuracy()
        .unwrap_or(0.0);
    out.model.save(&model_dir.join(CLASSIFIER_DIR))?;
    Ok(DemoReport {
        filter_accuracy,
        classifier_accuracy,
    })
}
