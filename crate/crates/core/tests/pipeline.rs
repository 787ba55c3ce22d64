//! Manifest on disk through split, training, checkpointing and evaluation.

use proptest::prelude::*;
use triage_core::datasets::{
    harmonize_labels, load_manifest, split_by_protocol, stage1_relabel, Label, Split, Task, DEFAULT_RATIOS,
};
use triage_core::evaluation::{evaluate_model, extract_embeddings, filter_clean};
use triage_core::models::{build_filter_net, FilterNetConfig, ModelGraph, FILTER_CLASSES};
use triage_core::synthetic::write_dataset;
use triage_core::training::{class_weights, train, LabeledSet, TrainConfig, WeightsMode};

fn filter_classes() -> Vec<Label> {
    FILTER_CLASSES.iter().map(|n| n.parse().unwrap()).collect()
}

#[test]
fn written_dataset_trains_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), Task::Filter, &[30], 32, 4).unwrap();
    let manifest = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.len(), 30 + 3 * 10);

    let assignment = split_by_protocol(&manifest, DEFAULT_RATIOS, 1).unwrap();
    let set = |s| LabeledSet::from_manifest(&manifest, &assignment.indices(s), &filter_classes(), 16).unwrap();
    let (train_set, val, test) = (set(Split::Train), set(Split::Validation), set(Split::Test));
    assert_eq!(train_set.len() + val.len() + test.len(), manifest.len());

    let model = build_filter_net(&FilterNetConfig {
        input_size: 16,
        ..FilterNetConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 16,
        ..TrainConfig::filter()
    };
    let out = train(model, &train_set, &val, &cfg, 9).unwrap();

    let ckpt = dir.path().join("model");
    out.model.save(&ckpt).unwrap();
    let reloaded = ModelGraph::load(&ckpt).unwrap();
    assert_eq!(
        evaluate_model(&out.model, &test, 8).unwrap(),
        evaluate_model(&reloaded, &test, 8).unwrap()
    );

    let all: Vec<usize> = (0..manifest.len()).collect();
    let export = extract_embeddings(&reloaded, &manifest, &all).unwrap();
    assert_eq!(export.vectors.len(), manifest.len());

    // A threshold no score can exceed removes everything.
    let (kept, removed) = filter_clean(&manifest, &reloaded, 1.0).unwrap();
    assert!(kept.is_empty());
    assert_eq!(removed.len(), manifest.len());
}

#[test]
fn classifier_manifest_relabels_for_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), Task::Classifier, &[4, 4, 2], 16, 0).unwrap();
    let manifest = harmonize_labels(&load_manifest(&dir.path().join("manifest.csv")).unwrap());
    let counts = manifest.class_counts();
    assert_eq!(counts[&Label::Covid19], 2);
    let stage1 = stage1_relabel(&manifest);
    let counts = stage1.class_counts();
    assert_eq!(counts.get(&Label::Covid19), None);
    assert_eq!(counts[&Label::LungOpacity], 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_modes_are_reciprocal(counts in prop::collection::vec(1usize..10_000, 1..6)) {
        let a = class_weights(&counts, WeightsMode::AsWritten).unwrap();
        let b = class_weights(&counts, WeightsMode::Inverse).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!((x * y - 1.0).abs() < 1e-12);
        }
        prop_assert!(a.weights.contains(&1.0));
    }
}
