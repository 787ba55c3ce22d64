use super::*;
use crate::models::{build_filter_net, FilterNetConfig};
use crate::synthetic::{class_set, filter_set};

fn tiny_filter() -> ModelGraph {
    build_filter_net(&FilterNetConfig {
        stem_channels: 4,
        num_ds_blocks: 2,
        input_size: 16,
        ..FilterNetConfig::default()
    })
    .unwrap()
}

fn tiny_covid() -> CovidNetConfig {
    CovidNetConfig {
        growth_rate: 4,
        layers_per_block: 1,
        head_channels: 8,
        input_size: 16,
        ..CovidNetConfig::default()
    }
}

fn quick(config: TrainConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        steps_per_epoch: Some(2),
        max_epochs: epochs,
        initial_lr: 1e-3,
        ..config
    }
}

fn filter_data(n: usize, seed: u64) -> LabeledSet {
    let (images, labels) = filter_set(n, 16, seed);
    LabeledSet::new(images, labels).unwrap()
}

#[test]
fn training_is_deterministic() {
    let (train_set, val) = (filter_data(8, 1), filter_data(4, 2));
    let cfg = quick(TrainConfig::filter(), 2);
    let a = train(tiny_filter(), &train_set, &val, &cfg, 5).unwrap();
    let b = train(tiny_filter(), &train_set, &val, &cfg, 5).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.named_tensors(), b.model.named_tensors());
    let c = train(tiny_filter(), &train_set, &val, &cfg, 6).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn best_epoch_parameters_are_restored() {
    let (train_set, val) = (filter_data(8, 1), filter_data(4, 2));
    let cfg = quick(TrainConfig::filter(), 4);
    let out = train(tiny_filter(), &train_set, &val, &cfg, 0).unwrap();
    let best = out.history.best().unwrap();
    let weights = ClassWeights::uniform(2);
    let (loss, acc) = evaluate_loss(&out.model, &val, &weights, 0.0, 8).unwrap();
    assert!((loss - best.validation_loss).abs() < 1e-9, "{loss} vs {}", best.validation_loss);
    assert_eq!(acc, best.validation_accuracy);
    assert!(out.model.params.iter().all(|p| !p.frozen));
}

#[test]
fn step_decay_is_applied_per_epoch() {
    let (train_set, val) = (filter_data(4, 1), filter_data(2, 2));
    let cfg = TrainConfig {
        schedule: Schedule::StepDecay {
            factor: 0.5,
            every_n_epochs: 2,
        },
        early_stop_patience: 0,
        ..quick(TrainConfig::filter(), 5)
    };
    let out = train(tiny_filter(), &train_set, &val, &cfg, 0).unwrap();
    let lrs: Vec<f64> = out.history.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]);
}

#[test]
fn early_stopping_halts_on_stale_validation() {
    let (train_set, val) = (filter_data(4, 1), filter_data(2, 2));
    // A vanishing learning rate leaves validation loss flat, so every epoch
    // after the first is stale.
    let cfg = TrainConfig {
        initial_lr: 1e-30,
        early_stop_patience: 2,
        ..quick(TrainConfig::filter(), 50)
    };
    let out = train(tiny_filter(), &train_set, &val, &cfg, 0).unwrap();
    assert_eq!(out.history.epochs.len(), 3);
    assert_eq!(out.history.best_epoch, 0);
}

#[test]
fn zero_patience_disables_early_stopping() {
    let (train_set, val) = (filter_data(4, 1), filter_data(2, 2));
    let cfg = TrainConfig {
        initial_lr: 1e-30,
        early_stop_patience: 0,
        ..quick(TrainConfig::filter(), 3)
    };
    let out = train(tiny_filter(), &train_set, &val, &cfg, 0).unwrap();
    assert_eq!(out.history.epochs.len(), 3);
}

#[test]
fn full_pass_epochs_cover_the_plan() {
    let (images, labels) = class_set(&[5, 2, 1], 16, 3);
    let set = LabeledSet::new(images, labels).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 1,
        initial_lr: 1e-3,
        augment: None,
        ..TrainConfig::classifier()
    };
    let model = build_covid_net(&CovidNetConfig {
        num_classes: 3,
        ..tiny_covid()
    })
    .unwrap();
    let out = train(model, &set, &set, &cfg, 0).unwrap();
    assert_eq!(out.history.epochs.len(), 1);
    assert!(out.history.epochs[0].train_loss.is_finite());
}

#[test]
fn non_finite_parameters_abort_with_diagnostics() {
    let (train_set, val) = (filter_data(4, 1), filter_data(2, 2));
    let mut model = tiny_filter();
    let (_, head_bias) = model.head_indices();
    model.params[head_bias].value.data_mut()[0] = f32::NAN;
    match train(model, &train_set, &val, &quick(TrainConfig::filter(), 1), 0) {
        Err(Error::NonFiniteLoss { epoch: 0, batch: 0, diagnostics }) => {
            assert!(diagnostics.contains("max|grad|"), "{diagnostics}")
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let set = filter_data(2, 1);
    let bad = set.map_labels(|_| 7);
    assert!(train(tiny_filter(), &bad, &set, &quick(TrainConfig::filter(), 1), 0).is_err());
    let zero_batch = TrainConfig {
        batch_size: 0,
        ..TrainConfig::filter()
    };
    assert!(matches!(
        train(tiny_filter(), &set, &set, &zero_batch, 0),
        Err(Error::Config(_))
    ));
    assert!(LabeledSet::new(set.images.clone(), vec![0]).is_err());
}

#[test]
fn history_round_trips_through_jsonl() {
    let history = TrainHistory {
        epochs: (0..3)
            .map(|epoch| EpochRecord {
                epoch,
                train_loss: 1.0 / (epoch + 1) as f64,
                validation_loss: [0.9, 0.4, 0.6][epoch],
                validation_accuracy: 0.5,
                lr: 1e-3,
                clamped_probabilities: 0,
            })
            .collect(),
        best_epoch: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.jsonl");
    history.write_jsonl(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
    assert_eq!(TrainHistory::read_jsonl(&path).unwrap(), history);
}

#[test]
fn two_stage_hands_its_backbone_to_stage_two() {
    let (images, labels) = class_set(&[4, 4, 2], 16, 1);
    let set = LabeledSet::new(images, labels).unwrap();
    let stage = TrainConfig {
        augment: None,
        ..quick(TrainConfig::classifier(), 1)
    };
    let out = train_two_stage(&tiny_covid(), &set, &set, &stage, &stage, 3, false).unwrap();
    assert!(out.stage1.is_some());
    assert_eq!(out.stage2_init.class_names, STAGE2_CLASSES);
    assert_eq!(out.model.num_classes(), 3);

    // Rerunning stage 1 alone reproduces the backbone bit for bit.
    let stage1 = train(
        build_covid_net(&CovidNetConfig {
            num_classes: 2,
            ..tiny_covid()
        })
        .unwrap(),
        &set.map_labels(|l| l.min(1)),
        &set.map_labels(|l| l.min(1)),
        &stage,
        derive_seed(3, &[1]),
    )
    .unwrap();
    let (head_w, _) = out.stage2_init.head_indices();
    for (i, (a, b)) in stage1.model.params.iter().zip(&out.stage2_init.params).enumerate() {
        if i < head_w {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
    }

    let skipped = train_two_stage(&tiny_covid(), &set, &set, &stage, &stage, 3, true).unwrap();
    assert!(skipped.stage1.is_none());
    let fresh = build_covid_net(&CovidNetConfig {
        num_classes: 2,
        ..tiny_covid()
    })
    .unwrap();
    assert_eq!(fresh.params[0].value, skipped.stage2_init.params[0].value);
}
