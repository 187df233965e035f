//! Malicious parameter construction.
//!
//! The classifier biases are set to 1e25: after the dot products land on
//! that offset, per-class logit differences vanish below the f64 ulp, the
//! softmax becomes exactly uniform, and every sample's bias gradient is
//! pinned to `mean(v) - v_y` independent of the first-layer biases.

use crate::error::{Error, Result};
use crate::model::{LayerTensors, ModelParams};
use crate::numerics::{mix_seed, DenseMatrix, DenseVector, SeededRng};

use super::{AttackConfig, WeightMode};

const CRAFT_TAG: u64 = 0x6372_6166; // "craf"

/// Classifier bias large enough to absorb any logit difference the crafted
/// network can produce.
const CLASSIFIER_BIAS: f64 = 1e25;
/// Std of the replicated row/column draws (variance 1e-2).
const WEIGHT_STD: f64 = 0.1;
/// Std of the shared hidden-layer column values (variance 1e-6).
const HIDDEN_STD: f64 = 1e-3;
/// Hidden biases are standard draws scaled by this factor.
const HIDDEN_BIAS_SCALE: f64 = 1e-3;
/// Redraw threshold keeping every per-class gradient away from zero.
const MEAN_GAP_FLOOR: f64 = 1e-8;
/// Jitter std on the split classifier column in local-steps mode.
const ROBUST_JITTER_STD: f64 = 1e-4;

/// Gap between the two halves of the classifier column in local-steps mode
/// (keeps client-side gradients small).
pub const LOCAL_STEPS_ETA: f64 = 1e-2;
/// Gap in noise mode (keeps gradients large relative to additive noise).
pub const NOISE_ETA: f64 = 1e3;
/// Base level of the split classifier column in both robust modes.
const ROBUST_BASE: f64 = 1e5;

/// Crafts the model the server sends: every first-layer row is one shared
/// direction, every classifier column one shared vector, classifier biases
/// 1e25. First-layer biases start at zero and are replaced each round.
pub fn craft_malicious_params(d: usize, cfg: &AttackConfig) -> Result<ModelParams> {
    if d == 0 {
        return Err(Error::invalid("input dimension must be >= 1"));
    }
    cfg.validate()?;
    let mut rng = SeededRng::new(mix_seed(cfg.rng_seed, CRAFT_TAG));

    let w = draw_direction(&mut rng, d, cfg.weight_mode);
    let v = draw_classifier_column(&mut rng, cfg.classes, cfg.weight_mode);

    let mut layers = Vec::with_capacity(2 + cfg.hidden_layers.len());

    let mut w1 = DenseMatrix::zeros(cfg.neurons, d);
    for i in 0..cfg.neurons {
        w1.row_mut(i).copy_from_slice(w.data());
    }
    layers.push(LayerTensors {
        weights: w1,
        biases: DenseVector::zeros(cfg.neurons),
    });

    let mut prev_width = cfg.neurons;
    for &width in &cfg.hidden_layers {
        if width == 0 {
            return Err(Error::invalid("hidden layer width must be >= 1"));
        }
        // One shared column vector replicated across all columns; redrawn
        // until some entry is positive so the ReLU chain stays alive.
        let u = loop {
            let cand: Vec<f64> = (0..width).map(|_| rng.normal(0.0, HIDDEN_STD)).collect();
            if cand.iter().any(|x| *x > 0.0) {
                break cand;
            }
        };
        let mut wl = DenseMatrix::zeros(width, prev_width);
        for (m, um) in u.iter().enumerate() {
            for j in 0..prev_width {
                wl.set(m, j, *um);
            }
        }
        let biases = DenseVector::from(
            (0..width)
                .map(|_| HIDDEN_BIAS_SCALE * rng.normal(0.0, WEIGHT_STD))
                .collect::<Vec<_>>(),
        );
        layers.push(LayerTensors {
            weights: wl,
            biases,
        });
        prev_width = width;
    }

    layers.push(classifier_layer(&v, prev_width));

    let params = ModelParams {
        layers,
        class_count: cfg.classes,
    };
    params.validate()?;
    Ok(params)
}

fn draw_direction(rng: &mut SeededRng, d: usize, mode: WeightMode) -> DenseVector {
    match mode {
        WeightMode::Standard | WeightMode::NoiseRobust => DenseVector::from(
            (0..d).map(|_| rng.normal(0.0, WEIGHT_STD)).collect::<Vec<_>>(),
        ),
        // Alternating signs keep the dot product small on smooth inputs.
        WeightMode::LocalStepsRobust => DenseVector::from(
            (0..d)
                .map(|j| {
                    if j % 2 == 0 {
                        rng.uniform(1.0, 2.0)
                    } else {
                        rng.uniform(-2.0, -1.0)
                    }
                })
                .collect::<Vec<_>>(),
        ),
    }
}

fn draw_classifier_column(rng: &mut SeededRng, classes: usize, mode: WeightMode) -> DenseVector {
    let first_half = classes.div_ceil(2);
    loop {
        let v: Vec<f64> = match mode {
            WeightMode::Standard => {
                (0..classes).map(|_| rng.normal(0.0, WEIGHT_STD)).collect()
            }
            WeightMode::LocalStepsRobust => (0..classes)
                .map(|c| {
                    let base = if c < first_half {
                        ROBUST_BASE
                    } else {
                        ROBUST_BASE - LOCAL_STEPS_ETA
                    };
                    base + rng.normal(0.0, ROBUST_JITTER_STD)
                })
                .collect(),
            WeightMode::NoiseRobust => (0..classes)
                .map(|c| {
                    if c < first_half {
                        ROBUST_BASE
                    } else {
                        ROBUST_BASE - NOISE_ETA
                    }
                })
                .collect(),
        };
        let mean = v.iter().sum::<f64>() / classes as f64;
        let mean_gap_ok = v.iter().all(|vc| (vc - mean).abs() >= MEAN_GAP_FLOOR);
        // Pairwise-distinct entries are needed only where labels are
        // inferred; the split columns intentionally repeat values.
        let distinct_ok = match mode {
            WeightMode::Standard => {
                let mut ok = true;
                for a in 0..classes {
                    for b in (a + 1)..classes {
                        if (v[a] - v[b]).abs() < MEAN_GAP_FLOOR {
                            ok = false;
                        }
                    }
                }
                ok
            }
            _ => true,
        };
        if mean_gap_ok && distinct_ok {
            return DenseVector::from(v);
        }
    }
}

/// Classifier layer with every column equal to `v` and saturating biases,
/// the construction that pins per-sample bias gradients to `mean(v) - v_y`.
fn classifier_layer(v: &DenseVector, prev_width: usize) -> LayerTensors {
    let classes = v.len();
    let mut wc = DenseMatrix::zeros(classes, prev_width);
    for c in 0..classes {
        for i in 0..prev_width {
            wc.set(c, i, v.get(c));
        }
    }
    LayerTensors {
        weights: wc,
        biases: DenseVector::constant(classes, CLASSIFIER_BIAS),
    }
}

/// Standard-mode classifier for an externally crafted first layer (used by
/// the trap-weights baseline so single-activation inversion applies).
pub(crate) fn standard_classifier_layer(
    rng: &mut SeededRng,
    classes: usize,
    prev_width: usize,
) -> LayerTensors {
    let v = draw_classifier_column(rng, classes, WeightMode::Standard);
    classifier_layer(&v, prev_width)
}

/// The shared first-layer row (the attack direction).
pub fn attack_direction(params: &ModelParams) -> DenseVector {
    DenseVector::from(params.layers[0].weights.row(0).to_vec())
}

/// The shared classifier column `v`.
pub fn classifier_column(params: &ModelParams) -> DenseVector {
    let last = params.layers.last().expect("validated model");
    DenseVector::from(
        (0..last.weights.rows())
            .map(|c| last.weights.get(c, 0))
            .collect::<Vec<_>>(),
    )
}

/// Expected per-sample bias gradient for each class under the crafted
/// model: `(mean(v) - v_c)` scaled by the positive part of every hidden
/// layer's shared column (inactive hidden rows drop out of the chain).
pub fn label_offsets(params: &ModelParams) -> Vec<f64> {
    let v = classifier_column(params);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let mut carry = 1.0;
    for layer in &params.layers[1..params.layers.len() - 1] {
        let kappa: f64 = (0..layer.weights.rows())
            .map(|m| layer.weights.get(m, 0).max(0.0))
            .sum();
        carry *= kappa;
    }
    v.iter().map(|vc| (mean - vc) * carry).collect()
}

/// Smallest first-layer bias gradient magnitude treated as a real
/// activation. The robust modes pin per-sample gradients near eta/2, so a
/// floor well below that (but far above noise) separates live neurons from
/// empty ones; the standard floor only has to beat exact zeros.
pub fn activity_floor(mode: WeightMode) -> f64 {
    match mode {
        WeightMode::Standard => 1e-30,
        WeightMode::LocalStepsRobust => LOCAL_STEPS_ETA / 131_072.0,
        WeightMode::NoiseRobust => NOISE_ETA / 131_072.0,
    }
}
