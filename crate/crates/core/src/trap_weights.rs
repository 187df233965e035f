//! Trap-weights baseline: randomized half-positive / half-negative
//! first-layer rows hoping single inputs activate neurons, recovered via
//! the weight-over-bias gradient ratio. Used as the comparison point for
//! the hyperplane attack.

use serde::{Deserialize, Serialize};

use crate::attack::standard_classifier_layer;
use crate::error::{Error, Result};
use crate::federation::{client_round, ClientConfig};
use crate::model::{GradientReport, LayerTensors, ModelParams};
use crate::numerics::{mix_seed, DenseMatrix, DenseVector, SeededRng};

const TRAP_TAG: u64 = 0x7472_6170; // "trap"
const CLASSIFIER_TAG: u64 = 0x7477_636c; // "twcl"

/// Bias-gradient magnitude below which a neuron is treated as silent.
const H_FLOOR: f64 = 1e-30;

/// Trap-weights attack configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrapWeightsConfig {
    pub neurons: usize,
    pub classes: usize,
    /// Std of the magnitude draws for first-layer entries.
    pub weight_std: f64,
    /// Scale in (0,1) applied to the positive half so the negative half
    /// dominates in expectation.
    pub scale_factor: f64,
    pub rounds: usize,
    pub rng_seed: u64,
    /// Candidates closer than this to an already recovered input are
    /// dropped as duplicates.
    pub dedup_tol: f64,
}

impl TrapWeightsConfig {
    /// Image-like data defaults: draws from N(0, 1/2), s = 0.99.
    pub fn image_defaults(neurons: usize, classes: usize, rounds: usize, seed: u64) -> Self {
        Self {
            neurons,
            classes,
            weight_std: 0.5f64.sqrt(),
            scale_factor: 0.99,
            rounds,
            rng_seed: seed,
            dedup_tol: 1e-6,
        }
    }

    /// Tabular data defaults: draws from N(0, 1), s = 0.97.
    pub fn tabular_defaults(neurons: usize, classes: usize, rounds: usize, seed: u64) -> Self {
        Self {
            neurons,
            classes,
            weight_std: 1.0,
            scale_factor: 0.97,
            rounds,
            rng_seed: seed,
            dedup_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.neurons == 0 || self.classes < 2 || self.rounds == 0 {
            return Err(Error::invalid("trap weights need neurons, classes, rounds >= 1"));
        }
        if !(0.0 < self.scale_factor && self.scale_factor < 1.0) {
            return Err(Error::invalid("scale factor must lie in (0, 1)"));
        }
        if self.weight_std <= 0.0 {
            return Err(Error::invalid("weight std must be positive"));
        }
        Ok(())
    }
}

/// Crafts the trap-weights model for one round. Each first-layer row draws
/// fresh magnitudes, flips a random half of the positions negative, and
/// scales the positive half by `s` so the row sum is negative in
/// expectation; the classifier reuses the saturating replicated column so
/// single-activation inversion applies. Fresh rows every round.
pub fn craft_trap_weights(d: usize, cfg: &TrapWeightsConfig, round: usize) -> Result<ModelParams> {
    if d < 2 {
        return Err(Error::invalid("trap weights need d >= 2"));
    }
    cfg.validate()?;
    let mut rng = SeededRng::new(mix_seed(
        mix_seed(cfg.rng_seed, TRAP_TAG),
        round as u64,
    ));
    let negatives = d.div_ceil(2);

    let mut w1 = DenseMatrix::zeros(cfg.neurons, d);
    for i in 0..cfg.neurons {
        let magnitudes: Vec<f64> = (0..d).map(|_| rng.normal(0.0, cfg.weight_std).abs()).collect();
        let perm = rng.permutation(d);
        let row = w1.row_mut(i);
        for (rank, &j) in perm.iter().enumerate() {
            row[j] = if rank < negatives {
                -magnitudes[j]
            } else {
                cfg.scale_factor * magnitudes[j]
            };
        }
    }

    // The classifier column is shared across rounds; only the trap rows
    // refresh.
    let mut classifier_rng = SeededRng::new(mix_seed(cfg.rng_seed, CLASSIFIER_TAG));
    let classifier = standard_classifier_layer(&mut classifier_rng, cfg.classes, cfg.neurons);

    let params = ModelParams {
        layers: vec![
            LayerTensors {
                weights: w1,
                biases: DenseVector::zeros(cfg.neurons),
            },
            classifier,
        ],
        class_count: cfg.classes,
    };
    params.validate()?;
    Ok(params)
}

/// Extracts reconstruction candidates from one round's gradients: every
/// live neuron yields `dW_i / db_i`. Candidates within `tol` (L2) of an
/// already known input, or of an earlier candidate this round, are dropped
/// as duplicates. Whether a candidate is a genuine input is decided against
/// ground truth by the harness (single-activation confirmation).
pub fn recover_single_activations(
    report: &GradientReport,
    known: &[DenseVector],
    tol: f64,
) -> Vec<DenseVector> {
    let layer = &report.layers[0];
    let mut fresh: Vec<DenseVector> = Vec::new();
    for i in 0..layer.biases.len() {
        let h = layer.biases.get(i);
        if h.abs() <= H_FLOOR {
            continue;
        }
        let candidate =
            DenseVector::from(layer.weights.row(i).iter().map(|w| w / h).collect::<Vec<_>>());
        let duplicate = known
            .iter()
            .chain(fresh.iter())
            .any(|x| x.dist2(&candidate) < tol);
        if !duplicate {
            fresh.push(candidate);
        }
    }
    fresh
}

/// Simulator-privilege check: for each first-layer neuron, the index of the
/// unique batch input activating it, if exactly one does.
pub fn single_activation_indices(
    params: &ModelParams,
    inputs: &[DenseVector],
) -> Vec<Option<usize>> {
    let layer = &params.layers[0];
    (0..layer.weights.rows())
        .map(|i| {
            let row = layer.weights.row(i);
            let bias = layer.biases.get(i);
            let mut hit = None;
            for (j, x) in inputs.iter().enumerate() {
                let pre = crate::numerics::dot(row, x.data()) + bias;
                if pre > 0.0 {
                    if hit.is_some() {
                        return None;
                    }
                    hit = Some(j);
                }
            }
            hit
        })
        .collect()
}

/// One full trap-weights attack run.
#[derive(Debug, Clone)]
pub struct TrapRunResult {
    /// Confirmed recoveries: batch index with the candidate that produced
    /// it (single activation plus value agreement).
    pub recovered: Vec<(usize, DenseVector)>,
    /// All deduplicated candidates across rounds, confirmed or not.
    pub candidates: Vec<DenseVector>,
    pub rounds_used: usize,
}

impl TrapRunResult {
    pub fn recovered_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.recovered.iter().map(|(j, _)| *j).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }

    pub fn fraction(&self, n: usize) -> f64 {
        self.recovered_indices().len() as f64 / n as f64
    }
}

/// Runs the multi-round trap-weights attack against a simulated client. A
/// batch input counts as recovered only when some neuron is activated by it
/// alone and the gradient-ratio candidate lands within `value_tol` (L2) of
/// the true input.
pub fn run_trap_weights(
    client: &ClientConfig,
    cfg: &TrapWeightsConfig,
    value_tol: f64,
) -> Result<TrapRunResult> {
    cfg.validate()?;
    client.validate()?;
    let d = client.batch.dim();
    let mut result = TrapRunResult {
        recovered: Vec::new(),
        candidates: Vec::new(),
        rounds_used: 0,
    };
    let mut recovered_flags = vec![false; client.batch.len()];
    for t in 0..cfg.rounds {
        let params = craft_trap_weights(d, cfg, t)?;
        let response = client_round(client, &params, t)?;
        let report = response.as_gradient_signal(&params)?;

        let fresh = recover_single_activations(&report, &result.candidates, cfg.dedup_tol);
        result.candidates.extend(fresh);

        let singles = single_activation_indices(&params, &client.batch.inputs);
        let layer = &report.layers[0];
        for (i, single) in singles.iter().enumerate() {
            let Some(j) = single else { continue };
            if recovered_flags[*j] {
                continue;
            }
            let h = layer.biases.get(i);
            if h.abs() <= H_FLOOR {
                continue;
            }
            let candidate = DenseVector::from(
                layer.weights.row(i).iter().map(|w| w / h).collect::<Vec<_>>(),
            );
            if candidate.dist2(&client.batch.inputs[*j]) < value_tol {
                recovered_flags[*j] = true;
                result.recovered.push((*j, candidate));
            }
        }
        result.rounds_used = t + 1;
    }
    Ok(result)
}
