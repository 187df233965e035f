//! Sequential batch reconstruction from the retained strips.
//!
//! Strip `k`'s activating set is strip `k-1`'s set plus one newly isolated
//! input, so the unnormalized gradients telescope:
//! `h_k g_k - h_{k-1} g_{k-1} = (h_k - h_{k-1}) x_k`. This evaluates the
//! alpha-recursion exactly (the partial sum over earlier inputs equals the
//! previous strip's unnormalized gradient) and keeps every reconstruction a
//! two-strip affair, so a flagged slot never contaminates its successors.

use serde::{Deserialize, Serialize};

use crate::numerics::DenseVector;

use super::search::Strip;
use super::infer_label_from_offsets;

/// Numerator of the alpha cutoff below which a slot is flagged
/// unrecoverable (matches the activity floor rationale: crafted per-class
/// gradients sit many orders of magnitude above it).
const ALPHA_FLOOR_SCALE: f64 = 1e-30;

/// Outcome of a full attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub recovered_inputs: Vec<DenseVector>,
    /// Per recovered input; None when the label was ambiguous or label
    /// inference was not applicable.
    pub recovered_labels: Vec<Option<usize>>,
    /// The isolating bias of each recovered input.
    pub per_input_strip_bias: Vec<f64>,
    pub rounds_used: usize,
    /// Strips flagged unresolvable: vanishing new-input coefficient plus
    /// sub-epsilon gaps between distinct strips.
    pub collisions: usize,
}

/// Inverts bias-sorted strips into inputs. `n` is the batch size used to
/// rescale per-sample gradients for label inference (the count of isolated
/// strips, unless protocol metadata supplies the true value).
/// `label_offsets[c]` is the expected per-sample bias gradient of class `c`
/// under the crafted model; None disables label inference.
pub fn reconstruct_batch(
    strips: &[Strip],
    n: usize,
    label_offsets: Option<&[f64]>,
) -> ReconstructionResult {
    let mut result = ReconstructionResult {
        recovered_inputs: Vec::with_capacity(strips.len()),
        recovered_labels: Vec::with_capacity(strips.len()),
        per_input_strip_bias: Vec::with_capacity(strips.len()),
        rounds_used: 0,
        collisions: 0,
    };
    if strips.is_empty() {
        return result;
    }
    let total_h: f64 = strips.iter().map(|s| s.h.abs()).sum();
    let alpha_floor = ALPHA_FLOOR_SCALE * n as f64 / total_h.max(f64::MIN_POSITIVE);

    let mut h_prev = 0.0f64;
    let mut g_prev: Option<&DenseVector> = None;
    for strip in strips {
        let delta_h = strip.h - h_prev;
        // alpha_{k,k} = delta_h / h_k: the newly isolated input's weight in
        // the current observation.
        let alpha = delta_h / strip.h;
        if alpha.abs() < alpha_floor || delta_h == 0.0 {
            result.collisions += 1;
            h_prev = strip.h;
            g_prev = Some(&strip.g);
            continue;
        }
        let x = match g_prev {
            Some(prev) => DenseVector::from(
                strip
                    .g
                    .iter()
                    .zip(prev.iter())
                    .map(|(gk, gp)| (strip.h * gk - h_prev * gp) / delta_h)
                    .collect::<Vec<_>>(),
            ),
            None => strip.g.clone(),
        };
        let label = label_offsets
            .and_then(|offsets| infer_label_from_offsets(n as f64 * delta_h, offsets));
        result.recovered_inputs.push(x);
        result.recovered_labels.push(label);
        result.per_input_strip_bias.push(strip.bias);
        h_prev = strip.h;
        g_prev = Some(&strip.g);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn single_strip_recovers_its_input_directly() {
        let x = DenseVector::from(vec![0.3, -0.7, 1.1]);
        let strips = vec![Strip {
            g: x.clone(),
            h: -0.2,
            bias: 0.5,
        }];
        let result = reconstruct_batch(&strips, 1, None);
        assert_eq!(result.recovered_inputs, vec![x]);
        assert_eq!(result.per_input_strip_bias, vec![0.5]);
        assert_eq!(result.collisions, 0);
    }

    /// Builds the exact strip sequence a noiseless client would produce for
    /// known inputs and per-sample gradients, then inverts it.
    fn forward_simulated_strips(
        inputs: &[DenseVector],
        d_per_sample: &[f64],
        n: usize,
    ) -> Vec<Strip> {
        let mut strips = Vec::new();
        let mut h = 0.0;
        let mut weighted = DenseVector::zeros(inputs[0].len());
        for (k, (x, d)) in inputs.iter().zip(d_per_sample).enumerate() {
            h += d / n as f64;
            for (acc, xi) in weighted.data_mut().iter_mut().zip(x.iter()) {
                *acc += d / n as f64 * xi;
            }
            strips.push(Strip {
                g: DenseVector::from(
                    weighted.iter().map(|wv| wv / h).collect::<Vec<_>>(),
                ),
                h,
                bias: k as f64,
            });
        }
        strips
    }

    #[test]
    fn three_inputs_invert_exactly() {
        let mut rng = SeededRng::new(8);
        let inputs: Vec<DenseVector> = (0..3)
            .map(|_| {
                DenseVector::from((0..5).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>())
            })
            .collect();
        let d = vec![0.4, -0.3, 0.2];
        let strips = forward_simulated_strips(&inputs, &d, 3);
        let result = reconstruct_batch(&strips, 3, None);
        assert_eq!(result.recovered_inputs.len(), 3);
        for (got, want) in result.recovered_inputs.iter().zip(&inputs) {
            assert!(got.dist_inf(want) <= 1e-9, "per-coordinate error too large");
        }
    }

    #[test]
    fn labels_come_from_rescaled_h_jumps() {
        let mut rng = SeededRng::new(9);
        let inputs: Vec<DenseVector> = (0..3)
            .map(|_| DenseVector::from(vec![rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)]))
            .collect();
        let offsets = vec![0.4, -0.3, 0.2];
        let labels = [2usize, 0, 1];
        let d: Vec<f64> = labels.iter().map(|&y| offsets[y]).collect();
        let strips = forward_simulated_strips(&inputs, &d, 3);
        let result = reconstruct_batch(&strips, 3, Some(&offsets));
        assert_eq!(
            result.recovered_labels,
            vec![Some(2), Some(0), Some(1)]
        );
    }

    #[test]
    fn vanishing_jump_is_flagged_and_skipped() {
        let mut rng = SeededRng::new(10);
        let inputs: Vec<DenseVector> = (0..3)
            .map(|_| DenseVector::from(vec![rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)]))
            .collect();
        // Second jump is exactly zero: two merged inputs cancel.
        let d = vec![0.4, 0.0, 0.2];
        let strips = forward_simulated_strips(&inputs, &d, 3);
        let result = reconstruct_batch(&strips, 3, None);
        assert_eq!(result.collisions, 1);
        assert_eq!(result.recovered_inputs.len(), 2);
        // The flagged slot does not corrupt the following input.
        assert!(result.recovered_inputs[1].dist_inf(&inputs[2]) <= 1e-9);
    }
}
