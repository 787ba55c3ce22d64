use super::*;
use crate::datasets::Task;
use crate::models::{build_covid_net, CovidNetConfig, STAGE2_CLASSES};
use crate::synthetic::{class_image, write_dataset};
use proptest::prelude::*;

const NAMES: [&str; 3] = STAGE2_CLASSES;

fn reference_matrix() -> ConfusionMatrix {
    ConfusionMatrix::from_counts(
        &NAMES,
        vec![vec![53821, 3552, 763], vec![3116, 46620, 1380], vec![0, 356, 2712]],
    )
    .unwrap()
}

#[test]
fn hand_tallied_pairs() {
    // (actual, predicted): (0,0) (0,1) (1,1) (2,2) (2,1) (0,0)
    let actual = [0, 0, 1, 2, 2, 0];
    let predicted = [0, 1, 1, 2, 1, 0];
    let m = confusion_matrix(&predicted, &actual, &NAMES).unwrap();
    assert_eq!(m.counts, vec![vec![2, 1, 0], vec![0, 1, 0], vec![0, 1, 1]]);
    assert_eq!(m.accuracy(), Some(4.0 / 6.0));
}

#[test]
fn trivial_matrices() {
    let labels = [0, 1, 2, 2, 1];
    let m = confusion_matrix(&labels, &labels, &NAMES).unwrap();
    assert!((0..3).all(|i| (0..3).all(|j| i == j || m.counts[i][j] == 0)));
    let empty = confusion_matrix(&[], &[], &NAMES).unwrap();
    assert_eq!(empty.total(), 0);
    assert_eq!(empty.accuracy(), None);
    assert!(confusion_matrix(&[3], &[0], &NAMES).is_err());
    assert!(confusion_matrix(&[0, 1], &[0], &NAMES).is_err());
}

#[test]
fn reference_matrix_reproduces_rates() {
    let metrics = sensitivity_specificity(&reference_matrix());
    let sens: Vec<f64> = metrics.sensitivity.iter().map(|s| s.unwrap()).collect();
    for (got, want) in sens.iter().zip([0.925, 0.912, 0.884]) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
    assert!((sens[0] - 53821.0 / 58136.0).abs() < 1e-12);
    let covid_spec = metrics.specificity[2].unwrap();
    assert!((covid_spec - 107109.0 / 109252.0).abs() < 1e-12);
    assert!((covid_spec - 0.980).abs() < 1e-3);
}

#[test]
fn identity_is_perfect() {
    let m = ConfusionMatrix::from_counts(&NAMES, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]).unwrap();
    let r = sensitivity_specificity(&m);
    assert!(r.sensitivity.iter().chain(&r.specificity).all(|&x| x == Some(1.0)));
}

#[test]
fn absent_class_is_undefined_not_zero() {
    let m = ConfusionMatrix::from_counts(&NAMES, vec![vec![3, 1, 0], vec![0, 2, 0], vec![0, 0, 0]]).unwrap();
    let r = sensitivity_specificity(&m);
    assert_eq!(r.sensitivity[2], None);
    assert_eq!(r.specificity[2], Some(1.0));
}

#[test]
fn aggregating_copies_has_no_spread() {
    let runs = vec![reference_matrix(); 50];
    let agg = aggregate_runs(&runs, Spread::Population).unwrap();
    assert_eq!(agg.summed.counts[0][0], 50 * 53821);
    assert!(agg.sensitivity.iter().chain(&agg.specificity).all(|m| m.std.unwrap().abs() < 1e-15));
    let single = aggregate_runs(&runs[..1], Spread::Population).unwrap();
    let direct = sensitivity_specificity(&reference_matrix());
    assert_eq!(single.sensitivity[1].mean, direct.sensitivity[1]);
    assert_eq!(single.sensitivity[1].std, Some(0.0));
}

#[test]
fn two_runs_match_two_point_formulas() {
    // Class-0 sensitivity 8/10 in run a and 6/10 in run b.
    let a = ConfusionMatrix::from_counts(&NAMES, vec![vec![8, 2, 0], vec![1, 9, 0], vec![0, 0, 5]]).unwrap();
    let b = ConfusionMatrix::from_counts(&NAMES, vec![vec![6, 3, 1], vec![0, 10, 0], vec![1, 1, 3]]).unwrap();
    let agg = aggregate_runs(&[a.clone(), b.clone()], Spread::Population).unwrap();
    let s0 = agg.sensitivity[0];
    assert!((s0.mean.unwrap() - 0.7).abs() < 1e-12);
    assert!((s0.std.unwrap() - 0.1).abs() < 1e-12);
    let sample = aggregate_runs(&[a, b], Spread::Sample).unwrap();
    assert!((sample.sensitivity[0].std.unwrap() - 0.1 * 2f64.sqrt()).abs() < 1e-12);
    // Pooled ratio differs from the mean of ratios in general.
    assert!((agg.pooled.sensitivity[2].unwrap() - 8.0 / 10.0).abs() < 1e-12);
    assert!((agg.sensitivity[2].mean.unwrap() - 0.8).abs() < 1e-12);
}

#[test]
fn aggregation_errors() {
    assert!(aggregate_runs(&[], Spread::Population).is_err());
    let other = ConfusionMatrix::zeros(&["a", "b", "c"]);
    assert!(aggregate_runs(&[reference_matrix(), other], Spread::Population).is_err());
}

proptest! {
    #[test]
    fn row_sums_count_actual_labels(pairs in proptest::collection::vec((0usize..3, 0usize..3), 0..60)) {
        let (actual, predicted): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = confusion_matrix(&predicted, &actual, &NAMES).unwrap();
        for c in 0..3 {
            prop_assert_eq!(m.row_sum(c), actual.iter().filter(|&&a| a == c).count() as u64);
        }
    }

    #[test]
    fn run_order_does_not_matter(seed in 0u64..1000) {
        let runs: Vec<ConfusionMatrix> = (0..4u64)
            .map(|k| {
                let v = |i: u64| (seed * 7 + k * 13 + i * 5) % 11;
                ConfusionMatrix::from_counts(&NAMES, (0..3).map(|r| (0..3).map(|c| v(r * 3 + c)).collect()).collect()).unwrap()
            })
            .collect();
        let mut reversed = runs.clone();
        reversed.reverse();
        let (a, b) = (aggregate_runs(&runs, Spread::Population).unwrap(), aggregate_runs(&reversed, Spread::Population).unwrap());
        prop_assert_eq!(a.summed, b.summed);
    }
}

fn tiny_covid() -> ModelGraph {
    build_covid_net(&CovidNetConfig {
        growth_rate: 4,
        layers_per_block: 1,
        head_channels: 6,
        num_classes: 3,
        input_size: 16,
        ..CovidNetConfig::default()
    })
    .unwrap()
}

#[test]
fn embeddings_have_head_width_and_are_deterministic() {
    let model = tiny_covid();
    let img = class_image(1, 20, 4);
    let emb = embed_images(&model, &[img.clone(), img, class_image(2, 20, 5)], 2).unwrap();
    assert_eq!(emb.shape(), &[3, 6]);
    assert_eq!(emb.data()[..6], emb.data()[6..12]);
}

#[test]
fn projector_files_line_up() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), Task::Classifier, &[2, 2, 1], 20, 0).unwrap();
    std::fs::write(dir.path().join(&manifest.records[3].image_path), b"not a png").unwrap();
    let export = extract_embeddings(&tiny_covid(), &manifest, &(0..5).collect::<Vec<_>>()).unwrap();
    assert_eq!(export.skipped, vec![3]);
    assert_eq!(export.vectors.len(), 4);
    let out = dir.path().join("projector");
    write_projector(&out, &export).unwrap();
    let vectors = std::fs::read_to_string(out.join("vectors.tsv")).unwrap();
    let metadata = std::fs::read_to_string(out.join("metadata.tsv")).unwrap();
    assert_eq!(vectors.lines().count(), 4);
    assert!(vectors.lines().all(|l| l.split('\t').count() == 6));
    let mut meta = metadata.lines();
    assert_eq!(meta.next(), Some("label\tid"));
    assert_eq!(meta.count(), 4);
    assert!(metadata.contains("lung_opacity\timages/00002.png"));
}

#[test]
fn filter_clean_keeps_only_accepted_records() {
    use crate::models::{build_filter_net, FilterNetConfig};
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), Task::Filter, &[3], 20, 0).unwrap();
    let filter = build_filter_net(&FilterNetConfig {
        input_size: 16,
        ..FilterNetConfig::default()
    })
    .unwrap();
    let (all, none) = filter_clean(&manifest, &filter, 0.0).unwrap();
    assert_eq!((all.len(), none.len()), (manifest.len(), 0));
    let (empty, removed) = filter_clean(&manifest, &filter, 1.0).unwrap();
    assert!(empty.is_empty());
    assert_eq!(removed.len(), manifest.len());
}
