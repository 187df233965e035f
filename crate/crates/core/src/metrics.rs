//! Reconstruction scoring: SSIM for image-like data, L2 matching for
//! tabular data, one-to-one assignment, and summary statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numerics::DenseVector;

/// L2 threshold below which a tabular reconstruction counts as exact.
pub const L2_THRESHOLD: f64 = 0.1;
/// SSIM threshold above which an image reconstruction counts as exact.
pub const SSIM_THRESHOLD: f64 = 0.99;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_DYNAMIC_RANGE: f64 = 1.0;

/// How reconstructions are compared to ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modality {
    Tabular,
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
}

/// Matching outcome for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryStats {
    pub n_true: usize,
    pub n_recovered_exact: usize,
    pub fraction: f64,
    /// Per truth sample: matched pair error (L2 distance, or 1 - SSIM for
    /// images); infinity when no recovered vector passed the threshold.
    pub per_sample_error: Vec<f64>,
    pub unmatched_recovered: usize,
    /// Among matched pairs with an inferred label: how many were correct.
    /// None when no labels were supplied.
    pub labels_correct: Option<usize>,
    pub rounds_used: usize,
    pub wall_time_seconds: f64,
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// stability constants K1=0.01, K2=0.03, dynamic range 1.0, averaged over
/// channels. Samples are planar `[channel][row][col]` flattened vectors.
pub fn ssim(
    a: &DenseVector,
    b: &DenseVector,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<f64> {
    let expected = height * width * channels;
    if a.len() != expected || b.len() != expected {
        return Err(Error::shape(format!(
            "ssim: vectors of length {}/{} vs {}x{}x{}",
            a.len(),
            b.len(),
            height,
            width,
            channels
        )));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim window needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}"
        )));
    }

    let kernel = gaussian_kernel();
    let c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE).powi(2);
    let mut channel_means = 0.0;
    for c in 0..channels {
        let plane_a = &a.data()[c * height * width..(c + 1) * height * width];
        let plane_b = &b.data()[c * height * width..(c + 1) * height * width];

        let mu_a = blur(plane_a, height, width, &kernel);
        let mu_b = blur(plane_b, height, width, &kernel);
        let aa = blur_product(plane_a, plane_a, height, width, &kernel);
        let bb = blur_product(plane_b, plane_b, height, width, &kernel);
        let ab = blur_product(plane_a, plane_b, height, width, &kernel);

        let mut total = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        channel_means += total / mu_a.len() as f64;
    }
    Ok(channel_means / channels as f64)
}

fn gaussian_kernel() -> Vec<f64> {
    let radius = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur, valid region only.
fn blur(plane: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let out_w = width - 2 * r;
    let out_h = height - 2 * r;
    // Horizontal pass.
    let mut tmp = vec![0.0; height * out_w];
    for y in 0..height {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * width + x + k];
            }
            tmp[y * out_w + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + k) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

fn blur_product(a: &[f64], b: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    blur(&prod, height, width, kernel)
}

/// Pairwise score between one truth sample and one recovered vector.
/// Lower is better; only scores below the pass threshold count as exact.
fn pair_error(truth: &DenseVector, rec: &DenseVector, modality: Modality) -> Result<f64> {
    match modality {
        Modality::Tabular => Ok(truth.dist2(rec)),
        Modality::Image {
            height,
            width,
            channels,
        } => Ok(1.0 - ssim(truth, rec, height, width, channels)?),
    }
}

fn pass_threshold(modality: Modality) -> f64 {
    match modality {
        Modality::Tabular => L2_THRESHOLD,
        Modality::Image { .. } => 1.0 - SSIM_THRESHOLD,
    }
}

/// Greedy one-to-one assignment of recovered vectors to truth samples:
/// repeatedly take the globally best remaining pair, remove both sides. A
/// truth sample counts as recovered iff its paired error passes the
/// modality threshold. Pairs that cannot pass are never matched, which
/// leaves the pass/fail outcome identical to greedy over all pairs.
pub fn match_reconstructions(
    truth: &Batch,
    recovered: &[DenseVector],
    recovered_labels: Option<&[Option<usize>]>,
    modality: Modality,
) -> Result<RecoveryStats> {
    if let Some(labels) = recovered_labels {
        if labels.len() != recovered.len() {
            return Err(Error::shape("label list length != recovered count"));
        }
    }
    let n = truth.len();
    let threshold = pass_threshold(modality);

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (t, x) in truth.inputs.iter().enumerate() {
        for (r, y) in recovered.iter().enumerate() {
            if x.len() != y.len() {
                return Err(Error::shape("recovered vector dimension mismatch"));
            }
            let err = pair_error(x, y, modality)?;
            if err < threshold {
                pairs.push((err, t, r));
            }
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));

    let mut truth_used = vec![false; n];
    let mut rec_used = vec![false; recovered.len()];
    let mut per_sample_error = vec![f64::INFINITY; n];
    let mut matched = 0usize;
    let mut labels_correct = recovered_labels.map(|_| 0usize);
    for (err, t, r) in pairs {
        if truth_used[t] || rec_used[r] {
            continue;
        }
        truth_used[t] = true;
        rec_used[r] = true;
        per_sample_error[t] = err;
        matched += 1;
        if let (Some(labels), Some(correct)) = (recovered_labels, labels_correct.as_mut()) {
            if labels[r] == Some(truth.labels[t]) {
                *correct += 1;
            }
        }
    }

    Ok(RecoveryStats {
        n_true: n,
        n_recovered_exact: matched,
        fraction: matched as f64 / n as f64,
        per_sample_error,
        unmatched_recovered: recovered.len() - matched,
        labels_correct,
        rounds_used: 0,
        wall_time_seconds: 0.0,
    })
}

/// Exhaustive optimal assignment for cross-checks (n <= 12): maximizes the
/// number of threshold-passing matches, breaking ties by total error.
pub fn match_reconstructions_optimal(
    truth: &Batch,
    recovered: &[DenseVector],
    modality: Modality,
) -> Result<RecoveryStats> {
    let n = truth.len();
    let m = recovered.len();
    if n > 12 || m > 12 {
        return Err(Error::invalid("optimal assignment limited to 12 samples"));
    }
    let threshold = pass_threshold(modality);
    let mut score = vec![vec![f64::INFINITY; m]; n];
    for t in 0..n {
        for r in 0..m {
            let err = pair_error(&truth.inputs[t], &recovered[r], modality)?;
            if err < threshold {
                score[t][r] = err;
            }
        }
    }

    // DP over subsets of recovered vectors, truth samples in index order.
    let full = 1usize << m;
    let mut best: Vec<(usize, f64)> = vec![(0, 0.0); full];
    for t in 0..n {
        let mut next: Vec<(usize, f64)> = best.clone(); // skip truth t
        for mask in 0..full {
            let (cnt, cost) = best[mask];
            for r in 0..m {
                if mask & (1 << r) != 0 || score[t][r].is_infinite() {
                    continue;
                }
                let nm = mask | (1 << r);
                let cand = (cnt + 1, cost + score[t][r]);
                if cand.0 > next[nm].0 || (cand.0 == next[nm].0 && cand.1 < next[nm].1) {
                    next[nm] = cand;
                }
            }
        }
        best = next;
    }
    let (matched, _) = best
        .iter()
        .copied()
        .max_by(|a, b| {
            (a.0, -a.1)
                .partial_cmp(&(b.0, -b.1))
                .expect("finite costs")
        })
        .unwrap_or((0, 0.0));

    Ok(RecoveryStats {
        n_true: n,
        n_recovered_exact: matched,
        fraction: matched as f64 / n as f64,
        per_sample_error: Vec::new(),
        unmatched_recovered: m - matched,
        labels_correct: None,
        rounds_used: 0,
        wall_time_seconds: 0.0,
    })
}
