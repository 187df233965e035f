//! Seeded random generation and small dense linear-algebra kernels.
//!
//! Every reduction uses a fixed left-to-right summation order so that runs
//! are bit-reproducible regardless of hardware parallelism. All floats are
//! 64-bit; the single-precision client path lives in [`crate::model`].

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Self::from_vec(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector {
    data: Vec<f64>,
}

impl DenseVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("vector entries must be finite"));
        }
        Ok(Self { data })
    }

    /// Constant vector `value` repeated `len` times.
    pub fn constant(len: usize, value: f64) -> Self {
        Self {
            data: vec![value; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Euclidean norm, fixed summation order.
    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// L2 distance to another vector of the same length.
    pub fn dist2(&self, other: &DenseVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Max-norm distance to another vector.
    pub fn dist_inf(&self, other: &DenseVector) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(data: Vec<f64>) -> Self {
        Self { data }
    }
}

/// Dot product with fixed left-to-right order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Matrix-vector product, `result[i] = sum_j m[i,j] * v[j]` left-to-right.
pub fn matvec(m: &DenseMatrix, v: &DenseVector) -> Result<DenseVector> {
    if m.cols != v.len() {
        return Err(Error::shape(format!(
            "matvec: {}x{} vs vector of length {}",
            m.rows,
            m.cols,
            v.len()
        )));
    }
    let mut out = vec![0.0; m.rows];
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), v.data());
    }
    Ok(DenseVector::from(out))
}

/// Numerically stable softmax: `exp(z_k - max z) / sum exp(z_c - max z)`.
///
/// Safe for logit magnitudes far beyond `exp` overflow (the crafted models
/// inject biases of 1e25).
pub fn stable_softmax(logits: &DenseVector) -> Result<DenseVector> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(DenseVector::from(out))
}

/// Deterministic seeded RNG. Identical seed gives an identical stream on
/// every platform (ChaCha20 keystream).
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    rng: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream independent of `self` and of siblings with other tags.
    /// Derivation is pure seed arithmetic, so substreams can be handed to
    /// concurrent workers without sharing state.
    pub fn substream(&self, tag: u64) -> SeededRng {
        SeededRng::new(mix_seed(self.seed, tag))
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        Uniform::new(lo, hi).expect("valid range").sample(&mut self.rng)
    }

    /// Single standard-normal-family draw.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        Normal::new(mean, std).expect("valid std").sample(&mut self.rng)
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            perm.swap(i, j);
        }
        perm
    }
}

/// SplitMix64-style seed mixing for derived substreams.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` i.i.d. normal draws; `std = 0` returns the constant vector of `mean`.
pub fn gaussian_sample(rng: &mut SeededRng, n: usize, mean: f64, std: f64) -> Result<DenseVector> {
    if std < 0.0 || !std.is_finite() || !mean.is_finite() {
        return Err(Error::invalid("gaussian_sample: std must be finite and >= 0"));
    }
    if std == 0.0 {
        return Ok(DenseVector::constant(n, mean));
    }
    let dist = Normal::new(mean, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(dist.sample(rng.rng()));
    }
    Ok(DenseVector::from(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matvec_identity() {
        let m = DenseMatrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let v = DenseVector::from(vec![1.0, 2.0, 3.0]);
        assert_eq!(matvec(&m, &v).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matvec_zero_matrix_annihilates() {
        let m = DenseMatrix::zeros(2, 4);
        let v = DenseVector::from(vec![5.0, -1.0, 2.0, 7.0]);
        assert_eq!(matvec(&m, &v).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_matches_naive_loop_bitwise() {
        let mut rng = SeededRng::new(7);
        let data: Vec<f64> = (0..25).map(|_| rng.normal(0.0, 1.0)).collect();
        let m = DenseMatrix::from_vec(5, 5, data).unwrap();
        let v = DenseVector::from((0..5).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>());

        // Independent naive double loop.
        let mut expect = vec![0.0; 5];
        for i in 0..5 {
            let mut acc = 0.0;
            for j in 0..5 {
                acc += m.get(i, j) * v.get(j);
            }
            expect[i] = acc;
        }
        assert_eq!(matvec(&m, &v).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn matvec_rejects_dimension_mismatch() {
        let m = DenseMatrix::zeros(2, 3);
        let v = DenseVector::zeros(4);
        assert!(matvec(&m, &v).is_err());
    }

    #[test]
    fn softmax_symmetric_inputs() {
        let p = stable_softmax(&DenseVector::from(vec![5.0, 5.0, 5.0])).unwrap();
        for v in p.iter() {
            assert_eq!(*v, 1.0 / 3.0);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = stable_softmax(&DenseVector::from(vec![1e25, 1e25])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let p = stable_softmax(&DenseVector::from(vec![0.0, 3.0_f64.ln()])).unwrap();
        assert!((p.get(0) - 0.25).abs() < 1e-15);
        assert!((p.get(1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(stable_softmax(&DenseVector::zeros(0)).is_err());
    }

    #[test]
    fn gaussian_zero_std_is_constant() {
        let mut rng = SeededRng::new(1);
        let v = gaussian_sample(&mut rng, 4, 7.0, 0.0).unwrap();
        assert_eq!(v.data(), &[7.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn gaussian_sample_mean_converges() {
        let mut rng = SeededRng::new(42);
        let v = gaussian_sample(&mut rng, 100_000, 0.0, 1.0).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
    }

    #[test]
    fn gaussian_sample_deterministic() {
        let a = gaussian_sample(&mut SeededRng::new(9), 100, 0.0, 2.0).unwrap();
        let b = gaussian_sample(&mut SeededRng::new(9), 100, 0.0, 2.0).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn gaussian_rejects_negative_std() {
        let mut rng = SeededRng::new(1);
        assert!(gaussian_sample(&mut rng, 3, 0.0, -1.0).is_err());
    }

    #[test]
    fn substreams_are_independent_of_draw_order() {
        let root = SeededRng::new(11);
        let mut a1 = root.substream(1);
        let mut b1 = root.substream(2);
        let x = a1.normal(0.0, 1.0);
        let y = b1.normal(0.0, 1.0);

        // Same substreams created in the other order give the same values.
        let root = SeededRng::new(11);
        let mut b2 = root.substream(2);
        let mut a2 = root.substream(1);
        assert_eq!(y, b2.normal(0.0, 1.0));
        assert_eq!(x, a2.normal(0.0, 1.0));
    }

    proptest! {
        #[test]
        fn matvec_is_linear(
            m in proptest::collection::vec(-10.0f64..10.0, 12),
            x in proptest::collection::vec(-10.0f64..10.0, 4),
            y in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let m = DenseMatrix::from_vec(3, 4, m).unwrap();
            let xv = DenseVector::from(x.clone());
            let yv = DenseVector::from(y.clone());
            let sum = DenseVector::from(
                x.iter().zip(&y).map(|(a, b)| a + b).collect::<Vec<_>>());
            let lhs = matvec(&m, &sum).unwrap();
            let ax = matvec(&m, &xv).unwrap();
            let ay = matvec(&m, &yv).unwrap();
            for i in 0..3 {
                prop_assert!((lhs.get(i) - (ax.get(i) + ay.get(i))).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_shift_invariant(
            z in proptest::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let base = stable_softmax(&DenseVector::from(z.clone())).unwrap();
            let shifted = stable_softmax(&DenseVector::from(
                z.iter().map(|v| v + shift).collect::<Vec<_>>())).unwrap();
            let total: f64 = base.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for i in 0..z.len() {
                prop_assert!((base.get(i) - shifted.get(i)).abs() <= 1e-12);
            }
        }
    }
}
