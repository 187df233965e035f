//! Fully connected ReLU network with softmax cross-entropy loss and
//! analytic per-sample / batch-averaged gradients.
//!
//! The ReLU subgradient at exactly 0 is defined as 0 (neuron inactive),
//! matching the activation indicator used throughout the attack math.
//! Depth is arbitrary: `layers[0]` is the attack layer, `layers.last()`
//! the classifier, everything in between hidden.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matvec, stable_softmax, DenseMatrix, DenseVector};

/// One layer's weight matrix and bias vector. Also used for gradient and
/// update tensors, which mirror parameter shapes exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTensors {
    pub weights: DenseMatrix,
    pub biases: DenseVector,
}

impl LayerTensors {
    pub fn zeros_like(other: &LayerTensors) -> Self {
        Self {
            weights: DenseMatrix::zeros(other.weights.rows(), other.weights.cols()),
            biases: DenseVector::zeros(other.biases.len()),
        }
    }
}

/// All parameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerTensors>,
    pub class_count: usize,
}

impl ModelParams {
    /// Validates dimension chaining: layer `l` input dim equals layer `l-1`
    /// output dim, final output dim equals the class count.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::shape("network needs at least two layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.biases.len() != layer.weights.rows() {
                return Err(Error::shape(format!(
                    "layer {l}: bias length {} != weight rows {}",
                    layer.biases.len(),
                    layer.weights.rows()
                )));
            }
            if l > 0 && layer.weights.cols() != self.layers[l - 1].weights.rows() {
                return Err(Error::shape(format!(
                    "layer {l}: input dim {} != previous output dim {}",
                    layer.weights.cols(),
                    self.layers[l - 1].weights.rows()
                )));
            }
        }
        let out = self.layers.last().unwrap().weights.rows();
        if out != self.class_count {
            return Err(Error::shape(format!(
                "output dim {out} != class count {}",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Input dimension `d` of the first layer.
    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    /// Width `N` of the attack (first) layer.
    pub fn attack_width(&self) -> usize {
        self.layers[0].weights.rows()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// A client's private inputs with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Vec<DenseVector>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<DenseVector>, labels: Vec<usize>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::invalid(
                "batch needs equally many inputs and labels, at least one each",
            ));
        }
        let d = inputs[0].len();
        if inputs.iter().any(|x| x.len() != d) {
            return Err(Error::shape("batch inputs have mixed dimensions"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, DenseVector::len)
    }

    /// Minimum pairwise L2 distance between inputs. O(n^2 d).
    pub fn min_pairwise_distance(&self) -> f64 {
        let n = self.len();
        let mut best = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.min(self.inputs[i].dist2(&self.inputs[j]));
            }
        }
        best
    }
}

/// Per-layer gradients of the mean loss plus the mean loss itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub layers: Vec<LayerTensors>,
    pub loss: f64,
}

impl GradientReport {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params.layers.iter().map(LayerTensors::zeros_like).collect(),
            loss: 0.0,
        }
    }

    /// Checks that gradient shapes mirror `params`.
    pub fn matches_shape(&self, params: &ModelParams) -> bool {
        self.layers.len() == params.layers.len()
            && self.layers.iter().zip(&params.layers).all(|(g, p)| {
                g.weights.rows() == p.weights.rows()
                    && g.weights.cols() == p.weights.cols()
                    && g.biases.len() == p.biases.len()
            })
    }
}

/// Cached per-layer state from a forward pass, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Pre-activations `W z + b` per layer.
    pub pre_activations: Vec<DenseVector>,
    /// Post-ReLU activations per layer (last layer has no ReLU and equals
    /// its pre-activation).
    pub activations: Vec<DenseVector>,
    /// Softmax output of the final layer.
    pub probs: DenseVector,
}

/// Forward pass through the network, returning every intermediate
/// activation for gradient reuse.
pub fn forward(params: &ModelParams, x: &DenseVector) -> Result<ForwardPass> {
    if x.len() != params.input_dim() {
        return Err(Error::shape(format!(
            "input dim {} != model dim {}",
            x.len(),
            params.input_dim()
        )));
    }
    let depth = params.layers.len();
    let mut pre = Vec::with_capacity(depth);
    let mut act = Vec::with_capacity(depth);
    let mut current = x.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = matvec(&layer.weights, &current)?;
        for (zi, b) in z.data_mut().iter_mut().zip(layer.biases.iter()) {
            *zi += b;
        }
        let a = if l + 1 == depth {
            z.clone()
        } else {
            DenseVector::from(z.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect::<Vec<_>>())
        };
        pre.push(z);
        act.push(a.clone());
        current = a;
    }
    let probs = stable_softmax(&current)?;
    Ok(ForwardPass {
        pre_activations: pre,
        activations: act,
        probs,
    })
}

/// Cross-entropy loss of a cached forward pass against label `y`.
pub fn cross_entropy(pass: &ForwardPass, y: usize) -> f64 {
    -pass.probs.get(y).max(f64::MIN_POSITIVE).ln()
}

/// Backpropagates one sample's loss gradient into `accum`, scaled by
/// `scale`. Activations come from the cached forward pass.
fn accumulate_sample_gradient(
    params: &ModelParams,
    x: &DenseVector,
    y: usize,
    pass: &ForwardPass,
    scale: f64,
    accum: &mut GradientReport,
) {
    let depth = params.layers.len();
    // dL/dz at the output layer: softmax minus one-hot.
    let mut delta: Vec<f64> = pass.probs.iter().copied().collect();
    delta[y] -= 1.0;

    for l in (0..depth).rev() {
        let layer_input: &DenseVector = if l == 0 { x } else { &pass.activations[l - 1] };
        {
            let g = &mut accum.layers[l];
            for (i, di) in delta.iter().enumerate() {
                let row = g.weights.row_mut(i);
                for (rj, xj) in row.iter_mut().zip(layer_input.iter()) {
                    *rj += scale * di * xj;
                }
                g.biases.set(i, g.biases.get(i) + scale * di);
            }
        }
        if l == 0 {
            break;
        }
        // delta_{l-1} = (W_l^T delta_l) gated by the previous layer's ReLU.
        let w = &params.layers[l].weights;
        let mut prev = vec![0.0; w.cols()];
        for (i, di) in delta.iter().enumerate() {
            let row = w.row(i);
            for (j, p) in prev.iter_mut().enumerate() {
                *p += row[j] * di;
            }
        }
        let gate = &pass.pre_activations[l - 1];
        for (j, p) in prev.iter_mut().enumerate() {
            if gate.get(j) <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
}

/// Gradient of the mean cross-entropy loss over `batch`, accumulated in
/// fixed index order.
pub fn batch_gradient(params: &ModelParams, batch: &Batch) -> Result<GradientReport> {
    if batch.is_empty() {
        return Err(Error::invalid("batch_gradient on empty batch"));
    }
    params.validate()?;
    if batch.dim() != params.input_dim() {
        return Err(Error::shape("batch dimension does not match model"));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= params.class_count) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            params.class_count
        )));
    }
    let n = batch.len();
    let scale = 1.0 / n as f64;
    let mut report = GradientReport::zeros_like(params);
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        let pass = forward(params, x)?;
        report.loss += scale * cross_entropy(&pass, y);
        accumulate_sample_gradient(params, x, y, &pass, scale, &mut report);
    }
    Ok(report)
}

/// Per-sample partial derivative of the loss w.r.t. the first-layer bias of
/// `neuron`, from the chain-rule closed form. Exactly 0 when the sample does
/// not activate the neuron.
pub fn per_sample_bias_grad(
    params: &ModelParams,
    sample: (&DenseVector, usize),
    neuron: usize,
) -> Result<f64> {
    if neuron >= params.attack_width() {
        return Err(Error::invalid(format!(
            "neuron {neuron} out of range for width {}",
            params.attack_width()
        )));
    }
    let (x, y) = sample;
    let pass = forward(params, x)?;
    if pass.pre_activations[0].get(neuron) <= 0.0 {
        return Ok(0.0);
    }
    // Backward delta chain down to the first layer, then read one entry.
    let depth = params.layers.len();
    let mut delta: Vec<f64> = pass.probs.iter().copied().collect();
    delta[y] -= 1.0;
    for l in (1..depth).rev() {
        let w = &params.layers[l].weights;
        let mut prev = vec![0.0; w.cols()];
        for (i, di) in delta.iter().enumerate() {
            let row = w.row(i);
            for (j, p) in prev.iter_mut().enumerate() {
                *p += row[j] * di;
            }
        }
        let gate = &pass.pre_activations[l - 1];
        for (j, p) in prev.iter_mut().enumerate() {
            if gate.get(j) <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
    Ok(delta[neuron])
}

/// Client-side arithmetic precision. `F32` replays every forward/backward
/// operation through `f32` intermediates for the single-precision runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Flattened f32 copy of the model used by the single-precision client path.
#[derive(Debug, Clone)]
pub struct ModelParamsF32 {
    layers: Vec<(Vec<f32>, Vec<f32>, usize, usize)>, // (weights, biases, rows, cols)
}

impl ModelParamsF32 {
    pub fn from_params(params: &ModelParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| {
                (
                    l.weights.data().iter().map(|v| *v as f32).collect(),
                    l.biases.data().iter().map(|v| *v as f32).collect(),
                    l.weights.rows(),
                    l.weights.cols(),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn apply_step(&mut self, grad: &GradientReportF32, lr: f32) {
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (w, gw) in layer.0.iter_mut().zip(&g.0) {
                *w -= lr * gw;
            }
            for (b, gb) in layer.1.iter_mut().zip(&g.1) {
                *b -= lr * gb;
            }
        }
    }

    /// Elementwise difference from a reference f64 model, widened to f64.
    pub fn delta_from(&self, reference: &ModelParams) -> GradientReport {
        let layers = self
            .layers
            .iter()
            .zip(&reference.layers)
            .map(|(l, r)| {
                let mut w = DenseMatrix::zeros(l.2, l.3);
                for (i, v) in w.data_mut().iter_mut().enumerate() {
                    *v = l.0[i] as f64 - r.weights.data()[i];
                }
                let mut b = DenseVector::zeros(l.1.len());
                for (i, v) in b.data_mut().iter_mut().enumerate() {
                    *v = l.1[i] as f64 - r.biases.data()[i];
                }
                LayerTensors {
                    weights: w,
                    biases: b,
                }
            })
            .collect();
        GradientReport { layers, loss: 0.0 }
    }
}

/// f32-typed gradient, kept separate so the single-precision path never
/// round-trips through f64.
#[derive(Debug, Clone)]
pub struct GradientReportF32 {
    layers: Vec<(Vec<f32>, Vec<f32>)>,
    pub loss: f32,
}

impl GradientReportF32 {
    pub fn widen(&self, shape: &ModelParams) -> GradientReport {
        let layers = self
            .layers
            .iter()
            .zip(&shape.layers)
            .map(|(g, p)| {
                let mut w = DenseMatrix::zeros(p.weights.rows(), p.weights.cols());
                for (dst, src) in w.data_mut().iter_mut().zip(&g.0) {
                    *dst = *src as f64;
                }
                let mut b = DenseVector::zeros(p.biases.len());
                for (dst, src) in b.data_mut().iter_mut().zip(&g.1) {
                    *dst = *src as f64;
                }
                LayerTensors {
                    weights: w,
                    biases: b,
                }
            })
            .collect();
        GradientReport {
            layers,
            loss: self.loss as f64,
        }
    }
}

/// Mean-loss gradient computed entirely in f32.
pub fn batch_gradient_f32(
    model: &ModelParamsF32,
    inputs: &[Vec<f32>],
    labels: &[usize],
) -> GradientReportF32 {
    let n = inputs.len();
    let scale = 1.0f32 / n as f32;
    let depth = model.layers.len();
    let mut grads: Vec<(Vec<f32>, Vec<f32>)> = model
        .layers
        .iter()
        .map(|(w, b, _, _)| (vec![0.0f32; w.len()], vec![0.0f32; b.len()]))
        .collect();
    let mut loss = 0.0f32;

    for (x, &y) in inputs.iter().zip(labels) {
        // Forward.
        let mut pre: Vec<Vec<f32>> = Vec::with_capacity(depth);
        let mut acts: Vec<Vec<f32>> = Vec::with_capacity(depth);
        let mut current: &[f32] = x;
        for (l, (w, b, rows, cols)) in model.layers.iter().enumerate() {
            let mut z = vec![0.0f32; *rows];
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &w[i * cols..(i + 1) * cols];
                let mut acc = 0.0f32;
                for j in 0..*cols {
                    acc += row[j] * current[j];
                }
                *zi = acc + b[i];
            }
            let a = if l + 1 == depth {
                z.clone()
            } else {
                z.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect()
            };
            pre.push(z);
            acts.push(a);
            current = acts.last().unwrap();
        }
        let logits = acts.last().unwrap();
        let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut probs: Vec<f32> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f32 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        loss += scale * -probs[y].max(f32::MIN_POSITIVE).ln();

        // Backward.
        let mut delta = probs;
        delta[y] -= 1.0;
        for l in (0..depth).rev() {
            let layer_input: &[f32] = if l == 0 { x } else { &acts[l - 1] };
            let cols = model.layers[l].3;
            for (i, di) in delta.iter().enumerate() {
                let row = &mut grads[l].0[i * cols..(i + 1) * cols];
                for (rj, xj) in row.iter_mut().zip(layer_input) {
                    *rj += scale * di * xj;
                }
                grads[l].1[i] += scale * di;
            }
            if l == 0 {
                break;
            }
            let (w, _, rows, cols) = &model.layers[l];
            let mut prev = vec![0.0f32; *cols];
            for i in 0..*rows {
                let di = delta[i];
                let row = &w[i * cols..(i + 1) * cols];
                for (j, p) in prev.iter_mut().enumerate() {
                    *p += row[j] * di;
                }
            }
            for (j, p) in prev.iter_mut().enumerate() {
                if pre[l - 1][j] <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    GradientReportF32 {
        layers: grads,
        loss,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, SeededRng};

    pub(crate) fn random_params(
        rng: &mut SeededRng,
        dims: &[usize],
        classes: usize,
    ) -> ModelParams {
        let mut layers = Vec::new();
        let mut sizes = dims.to_vec();
        sizes.push(classes);
        for l in 1..sizes.len() {
            let (rows, cols) = (sizes[l], sizes[l - 1]);
            let mut w = DenseMatrix::zeros(rows, cols);
            for v in w.data_mut() {
                *v = rng.normal(0.0, 1.0);
            }
            let mut b = DenseVector::zeros(rows);
            for v in b.data_mut() {
                *v = rng.normal(0.0, 1.0);
            }
            layers.push(LayerTensors {
                weights: w,
                biases: b,
            });
        }
        ModelParams {
            layers,
            class_count: classes,
        }
    }

    pub(crate) fn random_batch(
        rng: &mut SeededRng,
        n: usize,
        d: usize,
        classes: usize,
    ) -> Batch {
        let inputs = (0..n)
            .map(|_| {
                DenseVector::from((0..d).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>())
            })
            .collect();
        let labels = (0..n).map(|_| rng.index(classes)).collect();
        Batch::new(inputs, labels).unwrap()
    }

    /// Central finite differences over every parameter. Test-only oracle,
    /// independent of the backprop path.
    pub(crate) fn finite_difference_gradient(
        params: &ModelParams,
        batch: &Batch,
        step: f64,
    ) -> GradientReport {
        let mut report = GradientReport::zeros_like(params);
        let loss_of = |p: &ModelParams| -> f64 {
            let mut total = 0.0;
            for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
                let pass = forward(p, x).unwrap();
                total += cross_entropy(&pass, y);
            }
            total / batch.len() as f64
        };
        for l in 0..params.layers.len() {
            for idx in 0..params.layers[l].weights.data().len() {
                let mut plus = params.clone();
                plus.layers[l].weights.data_mut()[idx] += step;
                let mut minus = params.clone();
                minus.layers[l].weights.data_mut()[idx] -= step;
                report.layers[l].weights.data_mut()[idx] =
                    (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            }
            for idx in 0..params.layers[l].biases.len() {
                let mut plus = params.clone();
                plus.layers[l].biases.data_mut()[idx] += step;
                let mut minus = params.clone();
                minus.layers[l].biases.data_mut()[idx] -= step;
                report.layers[l].biases.data_mut()[idx] =
                    (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            }
        }
        report.loss = loss_of(params);
        report
    }

    /// Pre-activation magnitude floor below which the ReLU kink invalidates
    /// finite-difference comparison.
    pub(crate) const KINK_TOL: f64 = 1e-4;

    /// Checks whether any sample's pre-activation sits within `KINK_TOL` of
    /// the ReLU kink anywhere in the network.
    pub(crate) fn near_kink(params: &ModelParams, batch: &Batch) -> bool {
        batch.inputs.iter().any(|x| {
            let pass = forward(params, x).unwrap();
            pass.pre_activations[..params.depth() - 1]
                .iter()
                .any(|z| z.iter().any(|v| v.abs() < KINK_TOL))
        })
    }

    #[test]
    fn forward_relu_clamps_negative() {
        let params = ModelParams {
            layers: vec![
                LayerTensors {
                    weights: DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
                    biases: DenseVector::zeros(2),
                },
                LayerTensors {
                    weights: DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
                    biases: DenseVector::zeros(2),
                },
            ],
            class_count: 2,
        };
        let pass = forward(&params, &DenseVector::from(vec![1.0, -1.0])).unwrap();
        assert_eq!(pass.activations[0].data(), &[1.0, 0.0]);
    }

    #[test]
    fn identical_classifier_columns_give_uniform_probs() {
        // All columns of the classifier identical and equal biases: logits
        // are equal for every input, so probs are exactly 1/C.
        let mut rng = SeededRng::new(3);
        let n_neurons = 4;
        let classes = 5;
        let v: Vec<f64> = (0..classes).map(|_| rng.normal(0.0, 0.1)).collect();
        let mut w2 = DenseMatrix::zeros(classes, n_neurons);
        for c in 0..classes {
            for i in 0..n_neurons {
                w2.set(c, i, v[c]);
            }
        }
        let mut w1 = DenseMatrix::zeros(n_neurons, 3);
        for val in w1.data_mut() {
            *val = rng.normal(0.0, 1.0);
        }
        let params = ModelParams {
            layers: vec![
                LayerTensors {
                    weights: w1,
                    biases: DenseVector::constant(n_neurons, 0.3),
                },
                LayerTensors {
                    weights: w2,
                    biases: DenseVector::constant(classes, 1e25),
                },
            ],
            class_count: classes,
        };
        for trial in 0..10 {
            let x = DenseVector::from(vec![trial as f64 * 0.1, -0.2, 0.7]);
            let pass = forward(&params, &x).unwrap();
            for p in pass.probs.iter() {
                assert_eq!(*p, 1.0 / classes as f64);
            }
        }
    }

    #[test]
    fn forward_matches_naive_recomputation() {
        let mut rng = SeededRng::new(17);
        let params = random_params(&mut rng, &[4, 6, 5], 3);
        let x = DenseVector::from((0..4).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>());
        let pass = forward(&params, &x).unwrap();

        // Naive layer-by-layer recomputation.
        let mut cur: Vec<f64> = x.data().to_vec();
        for (l, layer) in params.layers.iter().enumerate() {
            let mut z = vec![0.0; layer.weights.rows()];
            for (i, zi) in z.iter_mut().enumerate() {
                *zi = dot(layer.weights.row(i), &cur) + layer.biases.get(i);
            }
            if l + 1 < params.layers.len() {
                for v in &mut z {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            cur = z;
        }
        let last = pass.pre_activations.last().unwrap();
        assert_eq!(last.data(), cur.as_slice());
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let mut rng = SeededRng::new(2);
        let params = random_params(&mut rng, &[4, 6], 3);
        assert!(forward(&params, &DenseVector::zeros(5)).is_err());
    }

    #[test]
    fn singleton_batch_equals_per_sample_gradient() {
        let mut rng = SeededRng::new(23);
        let params = random_params(&mut rng, &[5, 7], 3);
        let batch = random_batch(&mut rng, 1, 5, 3);
        let report = batch_gradient(&params, &batch).unwrap();
        // Mean over one sample is the sample gradient itself: check the
        // first-layer bias entries against per_sample_bias_grad.
        for i in 0..7 {
            let g = per_sample_bias_grad(
                &params,
                (&batch.inputs[0], batch.labels[0]),
                i,
            )
            .unwrap();
            assert!((report.layers[0].biases.get(i) - g).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample_gradients() {
        let mut rng = SeededRng::new(29);
        let params = random_params(&mut rng, &[5, 7], 3);
        let batch = random_batch(&mut rng, 6, 5, 3);
        let full = batch_gradient(&params, &batch).unwrap();
        let mut mean = GradientReport::zeros_like(&params);
        for k in 0..batch.len() {
            let single = Batch::new(
                vec![batch.inputs[k].clone()],
                vec![batch.labels[k]],
            )
            .unwrap();
            let r = batch_gradient(&params, &single).unwrap();
            for l in 0..mean.layers.len() {
                for (dst, src) in mean.layers[l]
                    .weights
                    .data_mut()
                    .iter_mut()
                    .zip(r.layers[l].weights.data())
                {
                    *dst += src / batch.len() as f64;
                }
                for (dst, src) in mean.layers[l]
                    .biases
                    .data_mut()
                    .iter_mut()
                    .zip(r.layers[l].biases.data())
                {
                    *dst += src / batch.len() as f64;
                }
            }
        }
        for l in 0..mean.layers.len() {
            for (a, b) in full.layers[l]
                .weights
                .data()
                .iter()
                .zip(mean.layers[l].weights.data())
            {
                assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in full.layers[l]
                .biases
                .data()
                .iter()
                .zip(mean.layers[l].biases.data())
            {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(31);
        let params = random_params(&mut rng, &[5, 7], 3);
        let batch = random_batch(&mut rng, 4, 5, 3);
        if near_kink(&params, &batch) {
            return; // regenerate manually if this seed ever degenerates
        }
        let analytic = batch_gradient(&params, &batch).unwrap();
        let fd = finite_difference_gradient(&params, &batch, 1e-6);
        for l in 0..analytic.layers.len() {
            for (a, e) in analytic.layers[l]
                .weights
                .data()
                .iter()
                .zip(fd.layers[l].weights.data())
            {
                let rel = (a - e).abs() / a.abs().max(e.abs()).max(1e-8);
                assert!(rel <= 1e-6, "weight grad {a} vs fd {e}");
            }
            for (a, e) in analytic.layers[l]
                .biases
                .data()
                .iter()
                .zip(fd.layers[l].biases.data())
            {
                let rel = (a - e).abs() / a.abs().max(e.abs()).max(1e-8);
                assert!(rel <= 1e-6, "bias grad {a} vs fd {e}");
            }
        }
    }

    #[test]
    fn inactive_neuron_has_zero_bias_grad() {
        let mut rng = SeededRng::new(37);
        let mut params = random_params(&mut rng, &[3, 2], 2);
        // Force neuron 0 inactive for this input.
        params.layers[0]
            .weights
            .row_mut(0)
            .copy_from_slice(&[1.0, 0.0, 0.0]);
        params.layers[0].biases.set(0, -10.0);
        let x = DenseVector::from(vec![1.0, 1.0, 1.0]);
        let g = per_sample_bias_grad(&params, (&x, 1), 0).unwrap();
        assert_eq!(g, 0.0);
    }

    #[test]
    fn bias_grad_matches_singleton_backprop_depth3() {
        let mut rng = SeededRng::new(41);
        let params = random_params(&mut rng, &[4, 6, 5], 3);
        let batch = random_batch(&mut rng, 1, 4, 3);
        let report = batch_gradient(&params, &batch).unwrap();
        for i in 0..6 {
            let g = per_sample_bias_grad(
                &params,
                (&batch.inputs[0], batch.labels[0]),
                i,
            )
            .unwrap();
            assert!((g - report.layers[0].biases.get(i)).abs() <= 1e-12);
        }
    }

    #[test]
    fn weight_over_bias_grad_reconstructs_input() {
        // Single-sample identity: dW_i / db_i equals x whenever db_i != 0.
        let mut rng = SeededRng::new(43);
        let params = random_params(&mut rng, &[5, 8], 4);
        let batch = random_batch(&mut rng, 1, 5, 4);
        let report = batch_gradient(&params, &batch).unwrap();
        let mut checked = 0;
        for i in 0..8 {
            let db = report.layers[0].biases.get(i);
            if db.abs() < 1e-12 {
                continue;
            }
            for j in 0..5 {
                let ratio = report.layers[0].weights.get(i, j) / db;
                assert!(
                    (ratio - batch.inputs[0].get(j)).abs() <= 1e-10,
                    "coordinate {j} of reconstruction off"
                );
            }
            checked += 1;
        }
        assert!(checked > 0, "no active neuron in test setup");
    }

    #[test]
    fn f32_gradient_tracks_f64() {
        let mut rng = SeededRng::new(47);
        let params = random_params(&mut rng, &[5, 7], 3);
        let batch = random_batch(&mut rng, 4, 5, 3);
        let f64_report = batch_gradient(&params, &batch).unwrap();
        let low = ModelParamsF32::from_params(&params);
        let inputs: Vec<Vec<f32>> = batch
            .inputs
            .iter()
            .map(|x| x.iter().map(|v| *v as f32).collect())
            .collect();
        let f32_report = batch_gradient_f32(&low, &inputs, &batch.labels).widen(&params);
        for l in 0..params.layers.len() {
            for (a, b) in f64_report.layers[l]
                .weights
                .data()
                .iter()
                .zip(f32_report.layers[l].weights.data())
            {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }
}
