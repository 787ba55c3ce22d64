use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

fn small_filter() -> FilterNetConfig {
    FilterNetConfig {
        input_size: 32,
        ..FilterNetConfig::default()
    }
}

fn small_covid(classes: usize) -> CovidNetConfig {
    CovidNetConfig {
        input_size: 32,
        num_classes: classes,
        ..CovidNetConfig::default()
    }
}

fn shape_of(m: &ModelGraph, name: &str) -> Vec<usize> {
    m.param(name).unwrap_or_else(|| panic!("no parameter {name}")).value.shape().to_vec()
}

/// Mean cross-entropy against fixed targets, with its logit gradient.
fn cross_entropy(targets: Vec<usize>) -> impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    move |logits| {
        let p = tensor::softmax(logits)?;
        let (n, c) = logits.dims2("ce")?;
        let mut grad = p.clone();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= p.data()[i * c + t].ln();
            grad.data_mut()[i * c + t] -= 1.0;
        }
        let grad = grad.map(|g| g / n as f64);
        Ok((loss / n as f64, grad))
    }
}

#[test]
fn filter_default_forward_shape() {
    let m = build_filter_net(&FilterNetConfig::default()).unwrap();
    let out = m.forward(&Tensor::zeros(&[1, 1, 224, 224])).unwrap();
    assert_eq!(out.logits.shape(), &[1, 2]);
    assert_eq!(out.final_features.shape(), &[1, 128, 28, 28]);
}

#[test]
fn width_multiplier_doubles_every_block() {
    let base = build_filter_net(&small_filter()).unwrap();
    let wide = build_filter_net(&FilterNetConfig {
        width_multiplier: 2.0,
        ..small_filter()
    })
    .unwrap();
    assert_eq!(shape_of(&wide, "stem.weight")[0], 2 * shape_of(&base, "stem.weight")[0]);
    for i in 0..4 {
        let name = format!("ds{i}.pointwise.weight");
        assert_eq!(shape_of(&wide, &name)[0], 2 * shape_of(&base, &name)[0]);
    }
}

#[test]
fn filter_parameter_count_matches_closed_form() {
    for (stem, blocks, mult) in [(8, 4, 1.0), (8, 4, 2.0), (4, 3, 0.5), (6, 5, 1.5)] {
        let cfg = FilterNetConfig {
            stem_channels: stem,
            num_ds_blocks: blocks,
            width_multiplier: mult,
            input_size: 32,
            seed: 0,
        };
        // stem 3×3 conv from 1 channel; each block: 3×3 depthwise + bias,
        // 1×1 pointwise + bias; linear head to 2.
        let w = |c: f64| (c * mult).round() as usize;
        let mut c = w(stem as f64);
        let mut expected = c * 9 + c;
        for i in 0..blocks {
            let out = w(stem as f64 * 2f64.powi(i as i32 + 1));
            expected += c * 9 + c + out * c + out;
            c = out;
        }
        expected += 2 * c + 2;
        assert_eq!(build_filter_net(&cfg).unwrap().parameter_count(), expected, "{cfg:?}");
    }
}

#[test]
fn dense_block_channel_arithmetic() {
    let m = build_covid_net(&CovidNetConfig::default()).unwrap();
    // The first transition consumes block 1's output.
    assert_eq!(shape_of(&m, "transition1.weight"), vec![36, 24 + 4 * 12, 1, 1]);
    assert_eq!(shape_of(&m, "transition2.weight"), vec![42, 36 + 48, 1, 1]);
    assert_eq!(shape_of(&m, "head_conv.weight"), vec![64, 42 + 48, 1, 1]);
    let cfg = CovidNetConfig::default();
    for b in 0..3 {
        let (cin, cout) = cfg.block_channels(b);
        assert_eq!(cout, cin + cfg.layers_per_block * cfg.growth_rate);
        let last = shape_of(&m, &format!("block{b}.layer3.weight"));
        assert_eq!(last[1], cout - cfg.growth_rate);
    }
}

#[test]
fn two_and_three_class_nets_differ_only_in_head() {
    let a = build_covid_net(&small_covid(2)).unwrap();
    let b = build_covid_net(&small_covid(3)).unwrap();
    assert_eq!(a.params.len(), b.params.len());
    for (pa, pb) in a.params.iter().zip(&b.params) {
        assert_eq!(pa.name, pb.name);
        if pa.name.starts_with("classifier.") {
            assert_eq!(pa.value.shape()[0], 2);
            assert_eq!(pb.value.shape()[0], 3);
        } else {
            assert_eq!(pa.value, pb.value);
        }
    }
}

#[test]
fn final_feature_shape_follows_layer_table() {
    // Independent propagation: conv out = floor((s + 2p − k)/stride) + 1,
    // pool out = floor(s/2).
    let conv = |s: usize| (s + 2 - 3) / 2 + 1;
    for size in [16, 32, 37, 64, 224] {
        let cfg = CovidNetConfig {
            input_size: size,
            ..CovidNetConfig::default()
        };
        let expect = conv(size) / 2 / 2 / 2;
        let m = build_covid_net(&cfg).unwrap();
        let out = m.forward(&random_input(&[1, 3, size, size], 1)).unwrap();
        assert_eq!(out.final_features.shape(), &[1, 64, expect, expect], "input {size}");
    }
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let m = build_covid_net(&small_covid(3)).unwrap();
    let err = m.forward(&Tensor::zeros(&[1, 1, 32, 32])).unwrap_err().to_string();
    assert!(err.contains("[N, 3, 32, 32]") && err.contains("[1, 1, 32, 32]"), "{err}");
}

#[test]
fn batch_rows_are_independent() {
    let m = build_covid_net(&small_covid(3)).unwrap();
    let x = random_input(&[3, 3, 32, 32], 2);
    let sample = x.slice_outer(1, 1).unwrap();
    let batch = Tensor::stack(&[
        sample.clone().reshape(&[3, 32, 32]).unwrap(),
        x.slice_outer(0, 1).unwrap().reshape(&[3, 32, 32]).unwrap(),
        sample.clone().reshape(&[3, 32, 32]).unwrap(),
    ])
    .unwrap();
    let out = m.forward(&batch).unwrap();
    let single = m.forward(&sample).unwrap();
    let rows: Vec<&[f32]> = out.probabilities.data().chunks(3).collect();
    assert_eq!(rows[0], rows[2]);
    for (a, b) in rows[0].iter().zip(single.probabilities.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    for row in rows {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let m = build_filter_net(&small_filter()).unwrap();
    let x = random_input(&[2, 1, 32, 32], 3);
    assert_eq!(m.forward(&x).unwrap().logits, m.forward(&x).unwrap().logits);
    let again = build_filter_net(&small_filter()).unwrap();
    assert_eq!(m, again);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_covid_net(&small_covid(3)).unwrap();
    m.save(dir.path()).unwrap();
    let back = ModelGraph::load(dir.path()).unwrap();
    assert_eq!(back.named_tensors(), m.named_tensors());
    assert_eq!(back.class_names, m.class_names);
    assert_eq!(back.config, m.config);
}

#[test]
fn new_head_keeps_backbone_bits() {
    let stage1 = build_covid_net(&small_covid(2)).unwrap();
    let stage2 = stage1.with_new_head(&STAGE2_CLASSES, 9).unwrap();
    assert_eq!(stage2.num_classes(), 3);
    let (w, b) = stage2.head_indices();
    for (i, (p1, p2)) in stage1.params.iter().zip(&stage2.params).enumerate() {
        if i != w && i != b {
            let bits = |p: &Parameter| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(p1), bits(p2), "{}", p1.name);
        }
    }
    assert_eq!(stage2.params[w].value.shape(), &[3, 64]);
    let out = stage2.forward(&random_input(&[1, 3, 32, 32], 4)).unwrap();
    assert_eq!(out.logits.shape(), &[1, 3]);
}

#[test]
fn backward_skips_frozen_parameters() {
    let mut m = build_covid_net(&small_covid(2)).unwrap();
    m.freeze_backbone(true);
    let (out, trace) = m.forward_traced(&random_input(&[2, 3, 32, 32], 5)).unwrap();
    m.backward(&trace, &Tensor::full(out.logits.shape(), 0.1)).unwrap();
    let (w, b) = m.head_indices();
    for (i, p) in m.params.iter().enumerate() {
        let touched = p.grad.data().iter().any(|&g| g != 0.0);
        assert_eq!(touched, i == w || i == b, "{}", p.name);
    }
}

fn single_layer_graph(layers: Vec<Layer>, params: Vec<Parameter>, input_shape: [usize; 3]) -> ModelGraph {
    ModelGraph {
        config: ModelConfig::Filter(FilterNetConfig::default()),
        input_shape,
        class_names: vec!["a".into(), "b".into(), "c".into()],
        layers,
        params,
    }
}

#[test]
fn gradient_check_single_linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0));
    let graph = single_layer_graph(
        vec![Layer::GlobalAvgPool, Layer::Linear { weight: 0, bias: 1 }],
        vec![Parameter::new("w", rand_t(&[3, 5])), Parameter::new("b", rand_t(&[3]))],
        [5, 1, 1],
    );
    let x = rand_t(&[4, 5, 1, 1]);
    let target = rand_t(&[4, 3]).cast::<f64>();
    let squared = move |logits: &Tensor<f64>| {
        let diff: Vec<f64> = logits.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>();
        Ok((loss, Tensor::new(logits.shape().to_vec(), diff)?))
    };
    let report = finite_difference_check(&graph, squared, &x, &FdOptions::default()).unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
    assert_eq!(report.checked, 8 + 3);
}

#[test]
fn gradient_check_single_conv_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rand_t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0));
    let graph = single_layer_graph(
        vec![
            Layer::Conv {
                weight: 0,
                bias: 1,
                stride: 2,
                padding: 1,
            },
            Layer::GlobalAvgPool,
            Layer::Linear { weight: 2, bias: 3 },
        ],
        vec![
            Parameter::new("conv.w", rand_t(&[4, 2, 3, 3])),
            Parameter::new("conv.b", rand_t(&[4])),
            Parameter::new("lin.w", rand_t(&[3, 4])),
            Parameter::new("lin.b", rand_t(&[3])),
        ],
        [2, 7, 7],
    );
    let x = rand_t(&[2, 2, 7, 7]);
    let report = finite_difference_check(&graph, cross_entropy(vec![0, 2]), &x, &FdOptions::default()).unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

#[test]
fn gradient_check_small_nets() {
    let filter = build_filter_net(&FilterNetConfig {
        input_size: 16,
        seed: 3,
        ..FilterNetConfig::default()
    })
    .unwrap();
    let x = random_input(&[2, 1, 16, 16], 8);
    let r = finite_difference_check(&filter, cross_entropy(vec![0, 1]), &x, &FdOptions::default()).unwrap();
    assert!(r.max_relative_error < 1e-3, "{r:?}");
    assert!(r.skipped_kink * 10 <= r.checked, "{r:?}");

    let covid = build_covid_net(&CovidNetConfig {
        input_size: 16,
        growth_rate: 4,
        layers_per_block: 2,
        head_channels: 8,
        num_classes: 3,
        seed: 4,
    })
    .unwrap();
    let x = random_input(&[2, 3, 16, 16], 9);
    let r = finite_difference_check(&covid, cross_entropy(vec![2, 1]), &x, &FdOptions::default()).unwrap();
    assert!(r.max_relative_error < 1e-3, "{r:?}");
    assert!(r.skipped_kink * 10 <= r.checked, "{r:?}");
}

#[test]
fn gradient_check_counts_frozen_as_skipped() {
    let mut m = build_filter_net(&FilterNetConfig {
        input_size: 16,
        ..FilterNetConfig::default()
    })
    .unwrap();
    m.freeze_backbone(true);
    let x = random_input(&[1, 1, 16, 16], 10);
    let r = finite_difference_check(&m, cross_entropy(vec![1]), &x, &FdOptions::default()).unwrap();
    let sampled: usize = m.params.iter().map(|p| p.value.len().min(8)).sum();
    let head = 8 + 2;
    assert_eq!(r.checked, head);
    assert_eq!(r.skipped_frozen, sampled - head);
}

#[test]
fn config_json_is_tagged() {
    let cfg = ModelConfig::Covid(CovidNetConfig::default());
    let v = serde_json::to_value(&cfg).unwrap();
    assert_eq!(v["kind"], "covid");
    assert_eq!(v["growth_rate"], 12);
    let back: ModelConfig = serde_json::from_value(v).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn invalid_configs_rejected() {
    assert!(build_filter_net(&FilterNetConfig {
        width_multiplier: 0.0,
        ..FilterNetConfig::default()
    })
    .is_err());
    assert!(build_covid_net(&CovidNetConfig {
        num_classes: 4,
        ..CovidNetConfig::default()
    })
    .is_err());
    assert!(build_covid_net(&CovidNetConfig {
        growth_rate: 0,
        ..CovidNetConfig::default()
    })
    .is_err());
}

/// Logits of seeded networks on a seeded input, frozen when the forward
/// pass was last verified by the gradient and layer-oracle tests above.
/// Any change to initialization order or layer arithmetic shows up here.
#[test]
fn golden_logits() {
    let close = |got: &[f32], want: &[f32]| {
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-5 + 1e-4 * w.abs(), "{got:?} vs {want:?}");
        }
    };
    let f = build_filter_net(&small_filter()).unwrap();
    let x = random_input(&[2, 1, 32, 32], 42);
    close(
        f.forward(&x).unwrap().logits.data(),
        &[0.12508585, 0.120527275, 0.0840229, 0.16905841],
    );
    let c = build_covid_net(&small_covid(3)).unwrap();
    let x = random_input(&[2, 3, 32, 32], 42);
    close(
        c.forward(&x).unwrap().logits.data(),
        &[-0.08538059, 0.105491206, -0.1628987, -0.08182785, 0.10677693, -0.18012375],
    );
}
