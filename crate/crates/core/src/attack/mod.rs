//! The malicious server: crafts model parameters that pin every sample's
//! bias gradient to a known per-class constant, sweeps first-layer biases
//! across rounds to isolate one input per strip, and inverts the observed
//! gradients back into the client's batch.

mod craft;
mod reconstruct;
mod search;

pub use craft::{
    activity_floor, attack_direction, classifier_column, craft_malicious_params, label_offsets,
    LOCAL_STEPS_ETA, NOISE_ETA,
};
pub(crate) use craft::standard_classifier_layer;
pub use reconstruct::{reconstruct_batch, ReconstructionResult};
pub use search::{
    compute_observations, initial_interval, spread_biases, strips_equal, EqualityMode,
    SearchState, Strip,
};

use serde::{Deserialize, Serialize};

use crate::data::FeatureBounds;
use crate::error::{Error, Result};
use crate::federation::client_round;
use crate::federation::ClientConfig;
use crate::numerics::DenseVector;

/// Two candidate label offsets closer than this are indistinguishable and
/// the label is reported as unknown.
const LABEL_AMBIGUITY_TOL: f64 = 1e-8;

/// Weight-crafting variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Replicated Gaussian row/column, classifier biases at 1e25.
    #[default]
    Standard,
    /// Split-level classifier column keeping gradients small so local SGD
    /// steps barely move the crafted parameters.
    LocalStepsRobust,
    /// Split-level classifier column with a large gap so gradients dominate
    /// additive noise.
    NoiseRobust,
}

/// Server-side attack configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// First-layer width N (and biases issued per round).
    pub neurons: usize,
    /// Class count C of the crafted classifier.
    pub classes: usize,
    /// Round budget T.
    pub rounds: usize,
    pub weight_mode: WeightMode,
    /// Per-feature value ranges used to seed the bias search interval.
    pub feature_bounds: FeatureBounds,
    /// Relative max-norm tolerance for exact strip equality.
    pub g_equal_tol: f64,
    /// Euclidean residual tolerance for robust strip equality.
    pub residual_tol: f64,
    /// Minimum bias gap worth subdividing; 0 disables the cutoff and the
    /// search runs to the round budget.
    pub epsilon: f64,
    /// Widths of extra hidden layers in the crafted model (empty for the
    /// two-layer network).
    pub hidden_layers: Vec<usize>,
    pub rng_seed: u64,
}

impl AttackConfig {
    pub fn new(
        neurons: usize,
        classes: usize,
        rounds: usize,
        feature_bounds: FeatureBounds,
        rng_seed: u64,
    ) -> Self {
        Self {
            neurons,
            classes,
            rounds,
            weight_mode: WeightMode::Standard,
            feature_bounds,
            g_equal_tol: 1e-9,
            residual_tol: 1e-4,
            epsilon: 0.0,
            hidden_layers: Vec::new(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.neurons == 0 {
            problems.push("neurons must be >= 1".to_string());
        }
        if self.classes < 2 {
            problems.push("classes must be >= 2".to_string());
        }
        if self.rounds == 0 {
            problems.push("rounds must be >= 1".to_string());
        }
        if self.g_equal_tol <= 0.0 || !self.g_equal_tol.is_finite() {
            problems.push("g_equal_tol must be positive".to_string());
        }
        if self.residual_tol <= 0.0 || !self.residual_tol.is_finite() {
            problems.push("residual_tol must be positive".to_string());
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            problems.push("epsilon must be finite and >= 0".to_string());
        }
        if self.feature_bounds.dim() == 0 {
            problems.push("feature bounds must not be empty".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn equality_mode(&self) -> EqualityMode {
        match self.weight_mode {
            WeightMode::Standard => EqualityMode::Exact,
            WeightMode::LocalStepsRobust | WeightMode::NoiseRobust => EqualityMode::Robust,
        }
    }
}

/// Ceiling on the number of rounds needed to shrink a width-`width` search
/// space to `epsilon`-wide intervals with `neurons` probes per round spread
/// over at most `inputs` live intervals:
/// `ceil(log_{floor(N/n)+1}(W / (N eps))) + 1`.
pub fn round_bound(width: f64, neurons: usize, inputs: usize, epsilon: f64) -> Result<usize> {
    if inputs == 0 || neurons < inputs {
        return Err(Error::invalid("round_bound needs N >= n >= 1"));
    }
    if epsilon <= 0.0 || width <= 0.0 || !epsilon.is_finite() || !width.is_finite() {
        return Err(Error::invalid("round_bound needs positive finite width and epsilon"));
    }
    let base = (neurons / inputs + 1) as f64;
    let ratio = width / (neurons as f64 * epsilon);
    if ratio <= 1.0 {
        return Ok(1);
    }
    // ceil(log_base(ratio)) with an integer-power correction pass so exact
    // powers of the base do not round up.
    let mut k = (ratio.ln() / base.ln()).ceil().max(0.0) as i32;
    while k > 0 && base.powi(k - 1) >= ratio {
        k -= 1;
    }
    while base.powi(k) < ratio {
        k += 1;
    }
    Ok(k as usize + 1)
}

/// Bias-gap threshold that keeps all pairwise projections of a batch with
/// minimum distance `min_distance` at least eps apart with probability at
/// least `1 - confidence`: `sqrt(2 pi) * min_distance * confidence / n^2`.
pub fn epsilon_for_confidence(min_distance: f64, inputs: usize, confidence: f64) -> Result<f64> {
    if min_distance <= 0.0 || !min_distance.is_finite() {
        return Err(Error::invalid("epsilon_for_confidence needs a positive distance"));
    }
    if inputs == 0 {
        return Err(Error::invalid("epsilon_for_confidence needs n >= 1"));
    }
    if confidence <= 0.0 || confidence >= 1.0 {
        return Err(Error::invalid("confidence must be in (0, 1)"));
    }
    let n = inputs as f64;
    Ok((2.0 * std::f64::consts::PI).sqrt() * min_distance * confidence / (n * n))
}

/// Infers the class of a sample from its per-sample bias gradient under the
/// standard crafted classifier: the gradient equals `mean(v) - v_c` for its
/// class `c`. Returns None when two classes are indistinguishable.
pub fn infer_label(h_sample: f64, v: &DenseVector) -> Option<usize> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let offsets: Vec<f64> = v.iter().map(|vc| mean - vc).collect();
    infer_label_from_offsets(h_sample, &offsets)
}

/// Same as [`infer_label`] but against precomputed per-class offsets
/// (hidden layers scale every offset by a shared factor).
pub fn infer_label_from_offsets(h_sample: f64, offsets: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::INFINITY;
    for (c, off) in offsets.iter().enumerate() {
        let dist = (h_sample - off).abs();
        match best {
            None => best = Some((c, dist)),
            Some((_, bd)) if dist < bd => {
                second = bd;
                best = Some((c, dist));
            }
            Some(_) => second = second.min(dist),
        }
    }
    let (c, bd) = best?;
    if (second - bd).abs() < LABEL_AMBIGUITY_TOL {
        None
    } else {
        Some(c)
    }
}

/// Runs the full parallel attack loop against a simulated client: craft
/// once, then per round place biases, collect the gradient signal, update
/// the search state; finally invert the retained strips into inputs.
pub fn run_attack(client: &ClientConfig, cfg: &AttackConfig) -> Result<ReconstructionResult> {
    cfg.validate()?;
    client.validate()?;
    let d = client.batch.dim();
    if cfg.feature_bounds.dim() != d {
        return Err(Error::shape(format!(
            "feature bounds dim {} != client data dim {d}",
            cfg.feature_bounds.dim()
        )));
    }

    let mut params = craft_malicious_params(d, cfg)?;
    let direction = attack_direction(&params);
    let interval = initial_interval(&direction, &cfg.feature_bounds)?;
    let mut state = SearchState::new(
        interval,
        cfg.epsilon,
        cfg.equality_mode(),
        cfg.g_equal_tol,
        cfg.residual_tol,
    )?;
    let h_floor = activity_floor(cfg.weight_mode);
    // Label inference is only sound in the uniform-softmax standard regime.
    let offsets = match cfg.weight_mode {
        WeightMode::Standard => Some(label_offsets(&params)),
        _ => None,
    };

    let mut rounds_used = 0;
    for t in 0..cfg.rounds {
        let biases = state.update_hyperplanes(cfg.neurons);
        if biases.is_empty() {
            break;
        }
        params.layers[0].biases = DenseVector::from(biases.clone());
        let response = client_round(client, &params, t)?;
        let report = response.as_gradient_signal(&params)?;
        let strips = compute_observations(&report, &biases, h_floor);
        state.update_search_state(strips);
        rounds_used = t + 1;
    }

    let strips = state.strips();
    let isolated = strips.len();
    let mut result = reconstruct_batch(&strips, isolated, offsets.as_deref());
    result.rounds_used = rounds_used;
    result.collisions += state.epsilon_collisions();
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_bound_immediate_case() {
        assert_eq!(round_bound(1.0, 1, 1, 1.0).unwrap(), 1);
    }

    #[test]
    fn round_bound_exact_power() {
        // W=1024, N=n=64, eps=1/64: base 2, log2(1024) = 10, plus one.
        assert_eq!(round_bound(1024.0, 64, 64, 1.0 / 64.0).unwrap(), 11);
    }

    #[test]
    fn round_bound_rejects_bad_inputs() {
        assert!(round_bound(1.0, 2, 4, 0.5).is_err());
        assert!(round_bound(1.0, 4, 2, 0.0).is_err());
    }

    #[test]
    fn epsilon_unit_cancellation() {
        let eps = epsilon_for_confidence(1.0, 1, 1.0 / (2.0 * std::f64::consts::PI).sqrt())
            .unwrap();
        assert!((eps - 1.0).abs() < 1e-15);
    }

    #[test]
    fn epsilon_direct_evaluation() {
        let eps = epsilon_for_confidence(0.5, 10, 0.01).unwrap();
        assert!((eps - 1.2533e-4).abs() < 1e-8, "{eps}");
    }

    #[test]
    fn epsilon_rejects_out_of_range() {
        assert!(epsilon_for_confidence(0.0, 10, 0.1).is_err());
        assert!(epsilon_for_confidence(1.0, 10, 1.0).is_err());
    }

    #[test]
    fn label_from_exact_offset() {
        let v = DenseVector::from(vec![1.0, 2.0, 3.0]);
        // mean(v) = 2; offsets are (1, 0, -1); h = -1 picks class 2.
        assert_eq!(infer_label(-1.0, &v), Some(2));
    }

    #[test]
    fn ambiguous_offsets_report_unknown() {
        let v = DenseVector::from(vec![1.0, 1.0, 5.0]);
        // Classes 0 and 1 share an offset; anything nearest them is unknown.
        assert_eq!(infer_label(4.0 / 3.0, &v), None);
        // Class 2 is still identifiable.
        assert_eq!(infer_label(7.0 / 3.0 - 5.0, &v), Some(2));
    }
}
