use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelGraph;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    /// Central-difference half step, in `[1e-4, 1e-2]`.
    pub epsilon: f64,
    /// Coordinates drawn (without replacement) from each trainable tensor.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            samples_per_tensor: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    /// `parameter[flat index]` of the worst coordinate.
    pub worst: Option<String>,
    pub checked: usize,
    pub skipped_frozen: usize,
    /// Coordinates whose step had to shrink to stay on one ReLU piece.
    pub kink_adjusted: usize,
    /// Coordinates sitting on a kink even at the smallest step.
    pub skipped_kink: usize,
}

/// A probe crossing a ReLU kink halves its step at most this many times.
const MAX_HALVINGS: usize = 10;

/// Compares backpropagated parameter gradients against central differences
/// of `loss_fn ∘ forward`.
///
/// Central differences are only meaningful where the loss is smooth on
/// `[w − ε, w + ε]`. A probe whose ReLU activity differs from the base point
/// has crossed a kink, so its step is halved until it does not.
///
/// The analytic side runs in the graph's own precision. The numeric side
/// runs on an `f64` copy of the graph so that cancellation in `L(w+ε) − L(w−ε)`
/// does not dominate the comparison. `loss_fn` maps logits to
/// `(loss, dloss/dlogits)`.
pub fn finite_difference_check<T, L>(
    graph: &ModelGraph<T>,
    loss_fn: L,
    input: &Tensor<T>,
    opts: &FdOptions,
) -> Result<FdReport>
where
    T: Element,
    L: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(1e-4..=1e-2).contains(&opts.epsilon) {
        return Err(Error::Config(format!(
            "epsilon {} outside [1e-4, 1e-2]",
            opts.epsilon
        )));
    }
    if graph.params.iter().any(|p| !p.value.all_finite()) {
        return Err(Error::InvalidInput("gradient check on non-finite parameters".into()));
    }

    let mut analytic = graph.clone();
    analytic.zero_grad();
    let (out, trace) = analytic.forward_traced(input)?;
    let (_, dlogits) = loss_fn(&out.logits.cast())?;
    analytic.backward(&trace, &dlogits.cast())?;

    let mut probe = graph.cast::<f64>();
    let input64 = input.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped_frozen: 0,
        kink_adjusted: 0,
        skipped_kink: 0,
    };
    let (_, base_pattern) = probe.forward_with_pattern(&input64)?;
    for pi in 0..probe.params.len() {
        let len = probe.params[pi].value.len();
        let count = opts.samples_per_tensor.min(len);
        if graph.params[pi].frozen {
            report.skipped_frozen += count;
            continue;
        }
        let mut coords = sample(&mut rng, len, count).into_vec();
        coords.sort_unstable();
        for i in coords {
            let coordinate = format!("{}[{i}]", probe.params[pi].name);
            let original = probe.params[pi].value.data()[i];
            let mut eval = |w: f64| -> Result<(f64, u64)> {
                probe.params[pi].value.data_mut()[i] = w;
                let (out, pattern) = probe.forward_with_pattern(&input64)?;
                let (loss, _) = loss_fn(&out.logits)?;
                Ok((loss, pattern))
            };
            let mut eps = opts.epsilon;
            let mut numeric = None;
            for _ in 0..=MAX_HALVINGS {
                let (plus, pattern_plus) = eval(original + eps)?;
                let (minus, pattern_minus) = eval(original - eps)?;
                if !plus.is_finite() || !minus.is_finite() {
                    probe.params[pi].value.data_mut()[i] = original;
                    return Err(Error::NonFiniteProbe { coordinate });
                }
                if pattern_plus == base_pattern && pattern_minus == base_pattern {
                    numeric = Some((plus - minus) / (2.0 * eps));
                    break;
                }
                eps /= 2.0;
            }
            probe.params[pi].value.data_mut()[i] = original;
            if eps < opts.epsilon {
                report.kink_adjusted += 1;
            }
            let Some(numeric) = numeric else {
                report.skipped_kink += 1;
                continue;
            };
            let exact = analytic.params[pi].grad.data()[i].as_f64();
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                report.worst = Some(coordinate);
            }
        }
    }
    Ok(report)
}
