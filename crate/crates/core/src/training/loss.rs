use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    /// `ω_i = N_i / N_max`: the majority class gets 1, minorities less.
    AsWritten,
    /// `ω_i = N_max / N_i`: the majority class gets 1, minorities more.
    #[default]
    Inverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub mode: WeightsMode,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self {
            weights: vec![1.0; classes],
            mode: WeightsMode::Inverse,
        }
    }
}

pub fn class_weights(counts: &[usize], mode: WeightsMode) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::InvalidInput("class_weights needs at least one class".into()));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!("class {c} has zero samples")));
    }
    let max = *counts.iter().max().unwrap() as f64;
    let weights = counts
        .iter()
        .map(|&n| match mode {
            WeightsMode::AsWritten => n as f64 / max,
            WeightsMode::Inverse => max / n as f64,
        })
        .collect();
    Ok(ClassWeights { weights, mode })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTarget<T: Element = f32> {
    pub y_soft: Tensor<T>,
    pub alpha: f64,
    /// Argmax of each one-hot row before smoothing.
    pub classes: Vec<usize>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("label smoothing alpha {alpha} outside [0, 1)")));
    }
    Ok(())
}

/// `(1 − α)·y + α/C` for one-hot rows `y`.
pub fn smooth_targets<T: Element>(labels: &Tensor<T>, alpha: f64) -> Result<SmoothedTarget<T>> {
    check_alpha(alpha)?;
    let (_, c) = labels.dims2("smooth_targets")?;
    let mut classes = Vec::new();
    for (n, row) in labels.data().chunks(c).enumerate() {
        let ones: Vec<usize> = (0..c).filter(|&k| row[k] == T::one()).collect();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones.len() != 1 || zeros != c - 1 {
            return Err(Error::InvalidInput(format!("row {n} is not one-hot")));
        }
        classes.push(ones[0]);
    }
    smooth_indices(&classes, c, alpha)
}

/// Smoothed targets straight from class indices.
pub fn smooth_indices<T: Element>(classes: &[usize], num_classes: usize, alpha: f64) -> Result<SmoothedTarget<T>> {
    check_alpha(alpha)?;
    if let Some(&bad) = classes.iter().find(|&&k| k >= num_classes) {
        return Err(Error::InvalidInput(format!("class {bad} out of range for {num_classes} classes")));
    }
    let off = alpha / num_classes as f64;
    let on = 1.0 - alpha + off;
    let y_soft = Tensor::new(
        vec![classes.len(), num_classes],
        classes
            .iter()
            .flat_map(|&k| (0..num_classes).map(move |j| T::of(if j == k { on } else { off })))
            .collect(),
    )?;
    Ok(SmoothedTarget {
        y_soft,
        alpha,
        classes: classes.to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Element = f32> {
    pub loss: f64,
    /// Gradient with respect to the logits that produced `probabilities`.
    pub dlogits: Tensor<T>,
    /// Probabilities raised to the 1e-12 floor before taking the log.
    pub clamped: usize,
}

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `L = −(1/N)·Σ_n ω_{true(n)}·Σ_c y_soft[n,c]·log p[n,c]`, with
/// `dL/dz[n,c] = ω_{true(n)}·(p[n,c] − y_soft[n,c]) / N` through the softmax.
pub fn weighted_smoothed_ce<T: Element>(
    probabilities: &Tensor<T>,
    targets: &SmoothedTarget<T>,
    weights: &ClassWeights,
) -> Result<LossOutput<T>> {
    let (n, c) = probabilities.dims2("weighted_smoothed_ce")?;
    if targets.y_soft.shape() != probabilities.shape() {
        return Err(Error::dim(
            "weighted_smoothed_ce",
            format!(
                "targets {:?} do not match probabilities {:?}",
                targets.y_soft.shape(),
                probabilities.shape()
            ),
        ));
    }
    if weights.weights.len() != c {
        return Err(Error::dim(
            "weighted_smoothed_ce",
            format!("{} class weights for {c} classes", weights.weights.len()),
        ));
    }
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut grad = Vec::with_capacity(n * c);
    let p = probabilities.data();
    let y = targets.y_soft.data();
    for i in 0..n {
        let w = weights.weights[targets.classes[i]];
        let mut row = 0.0;
        for k in 0..c {
            let (pk, yk) = (p[i * c + k].as_f64(), y[i * c + k].as_f64());
            if yk > 0.0 {
                // NaN compares false and propagates into the loss.
                let safe = if pk < PROB_FLOOR {
                    clamped += 1;
                    PROB_FLOOR
                } else {
                    pk
                };
                row += yk * safe.ln();
            }
            grad.push(T::of(w * (pk - yk) / n as f64));
        }
        loss -= w * row;
    }
    Ok(LossOutput {
        loss: loss / n as f64,
        dlogits: Tensor::new(vec![n, c], grad)?,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_on_table2_sums() {
        let counts = [10005, 9194, 394];
        let w = class_weights(&counts, WeightsMode::AsWritten).unwrap().weights;
        // Reference values: 9194/10005 and 394/10005, worked by hand.
        for (got, want) in w.iter().zip([1.0, 0.918_940_53, 0.039_380_31]) {
            assert!((got - want).abs() / want < 1e-6, "{got} vs {want}");
        }
        let w = class_weights(&counts, WeightsMode::Inverse).unwrap().weights;
        for (got, want) in w.iter().zip([1.0, 1.088_209_70, 25.393_401]) {
            assert!((got - want).abs() / want < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn equal_counts_give_unit_weights() {
        for mode in [WeightsMode::AsWritten, WeightsMode::Inverse] {
            assert_eq!(class_weights(&[7, 7, 7], mode).unwrap().weights, vec![1.0; 3]);
        }
        assert!(class_weights(&[3, 0], WeightsMode::Inverse).is_err());
    }

    #[test]
    fn smoothing_examples() {
        let onehot = Tensor::new(vec![1, 3], vec![1.0f64, 0.0, 0.0]).unwrap();
        let t = smooth_targets(&onehot, 0.1).unwrap();
        let want = [0.933_333_333, 0.033_333_333, 0.033_333_333];
        for (a, b) in t.y_soft.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(smooth_targets(&onehot, 0.0).unwrap().y_soft, onehot);
        let bad = Tensor::new(vec![1, 3], vec![0.5f64, 0.5, 0.0]).unwrap();
        assert!(smooth_targets(&bad, 0.1).is_err());
        assert!(smooth_targets(&onehot, 1.0).is_err());
    }

    #[test]
    fn smoothed_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let alpha = rng.random_range(0.0..1.0);
            let classes: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
            let t: SmoothedTarget<f64> = smooth_indices(&classes, 4, alpha).unwrap();
            for row in t.y_soft.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let p = Tensor::new(vec![2, 3], vec![1.0f64, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let t = smooth_indices(&[0, 2], 3, 0.0).unwrap();
        let out = weighted_smoothed_ce(&p, &t, &ClassWeights::uniform(3)).unwrap();
        assert!(out.loss.abs() < 1e-12);
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn scaling_weights_scales_loss_and_gradient() {
        let logits = Tensor::new(vec![2, 3], vec![0.3f64, -1.0, 2.0, 0.1, 0.2, -0.4]).unwrap();
        let p = softmax(&logits).unwrap();
        let t = smooth_indices(&[1, 0], 3, 0.1).unwrap();
        let w = ClassWeights {
            weights: vec![1.0, 2.0, 0.5],
            mode: WeightsMode::Inverse,
        };
        let w3 = ClassWeights {
            weights: w.weights.iter().map(|v| 3.0 * v).collect(),
            ..w.clone()
        };
        let a = weighted_smoothed_ce(&p, &t, &w).unwrap();
        let b = weighted_smoothed_ce(&p, &t, &w3).unwrap();
        assert!((3.0 * a.loss - b.loss).abs() < 1e-12);
        for (x, y) in a.dlogits.data().iter().zip(b.dlogits.data()) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_probability_is_clamped_and_counted() {
        let p = Tensor::new(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        let t = smooth_indices(&[1], 2, 0.0).unwrap();
        let out = weighted_smoothed_ce(&p, &t, &ClassWeights::uniform(2)).unwrap();
        assert_eq!(out.clamped, 1);
        assert!((out.loss - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }
}
