//! Client side of the FedSGD simulation: full-batch gradients, optional
//! minibatch local steps, optional Gaussian noise on the transmitted update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    batch_gradient, batch_gradient_f32, Batch, GradientReport, LayerTensors, ModelParams,
    ModelParamsF32, Precision,
};
use crate::numerics::{gaussian_sample, mix_seed, SeededRng};

const NOISE_TAG: u64 = 0x6e6f_6973; // "nois"
const PERM_TAG: u64 = 0x7065_726d; // "perm"

/// How the client turns its data into one round's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientMode {
    /// One gradient over the whole batch (FedSGD).
    FullBatch,
    /// `steps` sequential SGD steps on disjoint minibatches of size
    /// `minibatch`, drawn from a seed-fixed permutation of the dataset.
    LocalSteps {
        steps: usize,
        minibatch: usize,
        learning_rate: f64,
    },
}

/// Everything that defines the simulated client for one experiment.
#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub batch: Batch,
    pub mode: ClientMode,
    /// Std of i.i.d. Gaussian noise added to every entry of the returned
    /// update (0 disables).
    pub noise_std: f64,
    pub rng_seed: u64,
    pub precision: Precision,
}

impl ClientConfig {
    pub fn full_batch(batch: Batch, rng_seed: u64) -> Self {
        Self {
            batch,
            mode: ClientMode::FullBatch,
            noise_std: 0.0,
            rng_seed,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise_std must be finite and >= 0"));
        }
        if let ClientMode::LocalSteps {
            steps,
            minibatch,
            learning_rate,
        } = self.mode
        {
            if steps == 0 || minibatch == 0 {
                return Err(Error::invalid("local steps and minibatch size must be >= 1"));
            }
            if steps * minibatch > self.batch.len() {
                return Err(Error::invalid(format!(
                    "minibatch partition infeasible: {steps} steps x {minibatch} > {} samples",
                    self.batch.len()
                )));
            }
            if learning_rate <= 0.0 || !learning_rate.is_finite() {
                return Err(Error::invalid("learning rate must be positive"));
            }
        }
        Ok(())
    }
}

/// Parameter-space update, shaped like the model it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDelta {
    pub layers: Vec<LayerTensors>,
}

/// What the client sends back for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ClientUpdate {
    Gradient(GradientReport),
    /// `(final params - received params) / learning_rate`, so the attacker
    /// consumes one gradient-like signal regardless of mode.
    ParamDelta(ParamDelta),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResponse {
    pub kind: ClientUpdate,
    pub round_index: usize,
}

impl ClientResponse {
    /// Normalizes the response into a gradient-shaped signal for the
    /// attacker: gradients pass through, parameter deltas are negated
    /// (one SGD step moves against the gradient). Shape-checks against the
    /// model that was sent.
    pub fn as_gradient_signal(&self, sent: &ModelParams) -> Result<GradientReport> {
        let report = match &self.kind {
            ClientUpdate::Gradient(report) => report.clone(),
            ClientUpdate::ParamDelta(delta) => {
                let mut layers = delta.layers.clone();
                for layer in &mut layers {
                    for v in layer.weights.data_mut() {
                        *v = -*v;
                    }
                    for v in layer.biases.data_mut() {
                        *v = -*v;
                    }
                }
                GradientReport { layers, loss: 0.0 }
            }
        };
        if !report.matches_shape(sent) {
            return Err(Error::Protocol(
                "client response shape does not match the model sent".into(),
            ));
        }
        Ok(report)
    }
}

/// Runs one communication round on the client.
///
/// Full-batch mode returns the batch gradient; local-steps mode runs K
/// sequential SGD steps on disjoint minibatches and returns the parameter
/// delta pre-divided by the learning rate. Noise, when enabled, is added to
/// the transmitted update after all local computation.
pub fn client_round(
    config: &ClientConfig,
    params: &ModelParams,
    round_index: usize,
) -> Result<ClientResponse> {
    config.validate()?;
    params.validate()?;
    if config.batch.dim() != params.input_dim() {
        return Err(Error::shape("client data dimension does not match model"));
    }

    let kind = match config.mode {
        ClientMode::FullBatch => {
            let mut report = full_batch_gradient(config, params)?;
            if config.noise_std > 0.0 {
                let mut rng = noise_rng(config, round_index);
                for layer in &mut report.layers {
                    add_noise(layer, config.noise_std, &mut rng)?;
                }
            }
            ClientUpdate::Gradient(report)
        }
        ClientMode::LocalSteps {
            steps,
            minibatch,
            learning_rate,
        } => {
            let mut delta = local_steps_delta(config, params, round_index, steps, minibatch, learning_rate)?;
            if config.noise_std > 0.0 {
                let mut rng = noise_rng(config, round_index);
                for layer in &mut delta.layers {
                    add_noise(layer, config.noise_std, &mut rng)?;
                }
            }
            ClientUpdate::ParamDelta(delta)
        }
    };
    Ok(ClientResponse { kind, round_index })
}

fn full_batch_gradient(config: &ClientConfig, params: &ModelParams) -> Result<GradientReport> {
    match config.precision {
        Precision::F64 => batch_gradient(params, &config.batch),
        Precision::F32 => {
            let low = ModelParamsF32::from_params(params);
            let inputs: Vec<Vec<f32>> = config
                .batch
                .inputs
                .iter()
                .map(|x| x.iter().map(|v| *v as f32).collect())
                .collect();
            Ok(batch_gradient_f32(&low, &inputs, &config.batch.labels).widen(params))
        }
    }
}

fn local_steps_delta(
    config: &ClientConfig,
    params: &ModelParams,
    round_index: usize,
    steps: usize,
    minibatch: usize,
    learning_rate: f64,
) -> Result<ParamDelta> {
    // Fresh permutation per round (one round = one pass over K*n_b samples),
    // partitioned sequentially into disjoint minibatches.
    let mut perm_rng = SeededRng::new(mix_seed(
        mix_seed(config.rng_seed, PERM_TAG),
        round_index as u64,
    ));
    let perm = perm_rng.permutation(config.batch.len());

    let minibatches: Vec<Batch> = (0..steps)
        .map(|k| {
            let idx = &perm[k * minibatch..(k + 1) * minibatch];
            Batch::new(
                idx.iter().map(|&i| config.batch.inputs[i].clone()).collect(),
                idx.iter().map(|&i| config.batch.labels[i]).collect(),
            )
        })
        .collect::<Result<_>>()?;

    match config.precision {
        Precision::F64 => {
            let mut theta = params.clone();
            for mb in &minibatches {
                let grad = batch_gradient(&theta, mb)?;
                for (layer, g) in theta.layers.iter_mut().zip(&grad.layers) {
                    for (w, gw) in layer.weights.data_mut().iter_mut().zip(g.weights.data()) {
                        *w -= learning_rate * gw;
                    }
                    for (b, gb) in layer.biases.data_mut().iter_mut().zip(g.biases.data()) {
                        *b -= learning_rate * gb;
                    }
                }
            }
            let layers = theta
                .layers
                .iter()
                .zip(&params.layers)
                .map(|(after, before)| {
                    let mut w = after.weights.clone();
                    for (v, b) in w.data_mut().iter_mut().zip(before.weights.data()) {
                        *v = (*v - b) / learning_rate;
                    }
                    let mut bias = after.biases.clone();
                    for (v, b) in bias.data_mut().iter_mut().zip(before.biases.data()) {
                        *v = (*v - b) / learning_rate;
                    }
                    LayerTensors {
                        weights: w,
                        biases: bias,
                    }
                })
                .collect();
            Ok(ParamDelta { layers })
        }
        Precision::F32 => {
            let mut low = ModelParamsF32::from_params(params);
            for mb in &minibatches {
                let inputs: Vec<Vec<f32>> = mb
                    .inputs
                    .iter()
                    .map(|x| x.iter().map(|v| *v as f32).collect())
                    .collect();
                let grad = batch_gradient_f32(&low, &inputs, &mb.labels);
                low.apply_step(&grad, learning_rate as f32);
            }
            let mut delta = low.delta_from(params);
            for layer in &mut delta.layers {
                for v in layer.weights.data_mut() {
                    *v /= learning_rate;
                }
                for v in layer.biases.data_mut() {
                    *v /= learning_rate;
                }
            }
            Ok(ParamDelta {
                layers: delta.layers,
            })
        }
    }
}

fn noise_rng(config: &ClientConfig, round_index: usize) -> SeededRng {
    SeededRng::new(mix_seed(
        mix_seed(config.rng_seed, NOISE_TAG),
        round_index as u64,
    ))
}

fn add_noise(layer: &mut LayerTensors, std: f64, rng: &mut SeededRng) -> Result<()> {
    let nw = layer.weights.data().len();
    let noise = gaussian_sample(rng, nw, 0.0, std)?;
    for (v, z) in layer.weights.data_mut().iter_mut().zip(noise.iter()) {
        *v += z;
    }
    let nb = layer.biases.len();
    let noise = gaussian_sample(rng, nb, 0.0, std)?;
    for (v, z) in layer.biases.data_mut().iter_mut().zip(noise.iter()) {
        *v += z;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DenseMatrix, DenseVector};

    fn small_params(rng: &mut SeededRng, d: usize, n_neurons: usize, classes: usize) -> ModelParams {
        let mut w1 = DenseMatrix::zeros(n_neurons, d);
        for v in w1.data_mut() {
            *v = rng.normal(0.0, 1.0);
        }
        let mut w2 = DenseMatrix::zeros(classes, n_neurons);
        for v in w2.data_mut() {
            *v = rng.normal(0.0, 1.0);
        }
        ModelParams {
            layers: vec![
                LayerTensors {
                    weights: w1,
                    biases: DenseVector::constant(n_neurons, 0.1),
                },
                LayerTensors {
                    weights: w2,
                    biases: DenseVector::zeros(classes),
                },
            ],
            class_count: classes,
        }
    }

    fn small_batch(rng: &mut SeededRng, n: usize, d: usize, classes: usize) -> Batch {
        Batch::new(
            (0..n)
                .map(|_| {
                    DenseVector::from((0..d).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>())
                })
                .collect(),
            (0..n).map(|_| rng.index(classes)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn noiseless_full_batch_is_passthrough() {
        let mut rng = SeededRng::new(5);
        let params = small_params(&mut rng, 4, 6, 3);
        let batch = small_batch(&mut rng, 5, 4, 3);
        let expected = batch_gradient(&params, &batch).unwrap();
        let config = ClientConfig::full_batch(batch, 99);
        let resp = client_round(&config, &params, 0).unwrap();
        match resp.kind {
            ClientUpdate::Gradient(report) => assert_eq!(report, expected),
            _ => panic!("expected gradient response"),
        }
    }

    #[test]
    fn single_full_step_delta_is_negated_gradient() {
        let mut rng = SeededRng::new(7);
        let params = small_params(&mut rng, 4, 6, 3);
        let batch = small_batch(&mut rng, 5, 4, 3);
        let expected = batch_gradient(&params, &batch).unwrap();
        let config = ClientConfig {
            mode: ClientMode::LocalSteps {
                steps: 1,
                minibatch: batch.len(),
                learning_rate: 0.05,
            },
            batch,
            noise_std: 0.0,
            rng_seed: 3,
            precision: Precision::F64,
        };
        let resp = client_round(&config, &params, 0).unwrap();
        match resp.kind {
            ClientUpdate::ParamDelta(delta) => {
                for (d, g) in delta.layers.iter().zip(&expected.layers) {
                    for (a, b) in d.weights.data().iter().zip(g.weights.data()) {
                        assert!((a + b).abs() < 1e-9, "{a} vs -{b}");
                    }
                    for (a, b) in d.biases.data().iter().zip(g.biases.data()) {
                        assert!((a + b).abs() < 1e-9);
                    }
                }
            }
            _ => panic!("expected delta response"),
        }
    }

    #[test]
    fn responses_are_deterministic() {
        let mut rng = SeededRng::new(11);
        let params = small_params(&mut rng, 4, 6, 3);
        let batch = small_batch(&mut rng, 5, 4, 3);
        let mut config = ClientConfig::full_batch(batch, 17);
        config.noise_std = 1e-3;
        let a = client_round(&config, &params, 2).unwrap();
        let b = client_round(&config, &params, 2).unwrap();
        assert_eq!(a, b);
        // Different round index draws a different noise stream.
        let c = client_round(&config, &params, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_has_requested_std() {
        let mut rng = SeededRng::new(13);
        // 10_000 first-layer bias entries to estimate the noise std.
        let params = small_params(&mut rng, 2, 10_000, 2);
        let batch = small_batch(&mut rng, 3, 2, 2);
        let clean = batch_gradient(&params, &batch).unwrap();
        let mut config = ClientConfig::full_batch(batch, 23);
        config.noise_std = 1e-3;
        let resp = client_round(&config, &params, 0).unwrap();
        let noisy = match resp.kind {
            ClientUpdate::Gradient(report) => report,
            _ => unreachable!(),
        };
        let diffs: Vec<f64> = noisy.layers[0]
            .biases
            .data()
            .iter()
            .zip(clean.layers[0].biases.data())
            .map(|(a, b)| a - b)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (diffs.len() - 1) as f64;
        let std = var.sqrt();
        assert!(
            (std - 1e-3).abs() < 1e-4,
            "empirical noise std {std} not within 10% of 1e-3"
        );
    }

    #[test]
    fn local_delta_aligns_with_full_gradient_as_lr_shrinks() {
        let mut rng = SeededRng::new(19);
        let params = small_params(&mut rng, 4, 8, 3);
        let batch = small_batch(&mut rng, 8, 4, 3);
        let full = batch_gradient(&params, &batch).unwrap();

        let angle_at = |lr: f64| -> f64 {
            let config = ClientConfig {
                mode: ClientMode::LocalSteps {
                    steps: 4,
                    minibatch: 2,
                    learning_rate: lr,
                },
                batch: batch.clone(),
                noise_std: 0.0,
                rng_seed: 29,
                precision: Precision::F64,
            };
            let resp = client_round(&config, &params, 0).unwrap();
            let signal = resp.as_gradient_signal(&params).unwrap();
            // Cosine angle between flattened signal/K and the full gradient.
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (s, f) in signal.layers.iter().zip(&full.layers) {
                for (a, b) in s
                    .weights
                    .data()
                    .iter()
                    .chain(s.biases.data())
                    .zip(f.weights.data().iter().chain(f.biases.data()))
                {
                    dot += a * b;
                    na += a * a;
                    nb += b * b;
                }
            }
            (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0).acos()
        };

        let coarse = angle_at(1e-4);
        let fine = angle_at(1e-6);
        assert!(
            fine <= coarse + 1e-12,
            "angle should not grow as lr shrinks: {fine} vs {coarse}"
        );
    }

    #[test]
    fn infeasible_partition_is_rejected() {
        let mut rng = SeededRng::new(31);
        let params = small_params(&mut rng, 4, 6, 3);
        let batch = small_batch(&mut rng, 5, 4, 3);
        let config = ClientConfig {
            mode: ClientMode::LocalSteps {
                steps: 3,
                minibatch: 2,
                learning_rate: 0.1,
            },
            batch,
            noise_std: 0.0,
            rng_seed: 1,
            precision: Precision::F64,
        };
        assert!(client_round(&config, &params, 0).is_err());
    }

    #[test]
    fn shape_mismatch_is_protocol_error() {
        let mut rng = SeededRng::new(37);
        let params = small_params(&mut rng, 4, 6, 3);
        let other = small_params(&mut rng, 4, 7, 3);
        let batch = small_batch(&mut rng, 3, 4, 3);
        let config = ClientConfig::full_batch(batch, 1);
        let resp = client_round(&config, &params, 0).unwrap();
        assert!(resp.as_gradient_signal(&other).is_err());
    }
}
