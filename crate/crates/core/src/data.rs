//! Batch construction: synthetic distributions, CSV ingestion with feature
//! scaling, the raw tensor format, and non-IID class partitioning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Distribution;
use crate::model::Batch;
use crate::numerics::{DenseVector, SeededRng};

/// Magic bytes of the raw tensor format.
const TENSOR_MAGIC: &[u8; 4] = b"HRT1";

/// Gaussian features are clipped here and the clip recorded as the bound;
/// the clip probability per coordinate is below 1e-8.
pub const GAUSS_CLIP: f64 = 6.0;

/// Per-feature `[lo, hi]` value ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBounds {
    bounds: Vec<(f64, f64)>,
}

impl FeatureBounds {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds
            .iter()
            .any(|(lo, hi)| !lo.is_finite() || !hi.is_finite() || lo >= hi)
        {
            return Err(Error::invalid("feature bounds must be finite with lo < hi"));
        }
        Ok(Self { bounds })
    }

    /// The same `[lo, hi]` for every one of `d` features.
    pub fn uniform(d: usize, lo: f64, hi: f64) -> Self {
        Self {
            bounds: vec![(lo, hi); d],
        }
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn get(&self, j: usize) -> (f64, f64) {
        self.bounds[j]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, (f64, f64)> {
        self.bounds.iter()
    }

    pub fn contains(&self, x: &DenseVector) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(&self.bounds)
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// How per-column CSV scaling maps observed values into a target range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    #[default]
    Minus1To1,
    Zero1,
    None,
}

/// Where a batch comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        dist: Distribution,
        n: usize,
        d: usize,
        classes: usize,
        seed: u64,
    },
    Csv {
        path: String,
        label_column: String,
        #[serde(default)]
        scaling: Scaling,
    },
    Tensor {
        path: String,
    },
}

/// Synthetic batch from one of the three reference distributions. Labels
/// are uniform over `classes`. Bounds are the distribution support (the
/// Gaussian is clipped at +-6 and that clip recorded as its bound).
pub fn gen_synthetic(
    dist: Distribution,
    n: usize,
    d: usize,
    classes: usize,
    seed: u64,
) -> Result<(Batch, FeatureBounds)> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(Error::invalid("gen_synthetic needs n, d, classes >= 1"));
    }
    let mut rng = SeededRng::new(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x = match dist {
            Distribution::Ball => {
                // Gaussian direction scaled by U^(1/d) radius.
                let mut v: Vec<f64> = (0..d).map(|_| rng.normal(0.0, 1.0)).collect();
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let radius = rng.uniform(0.0, 1.0).powf(1.0 / d as f64);
                for a in &mut v {
                    *a = *a / norm * radius;
                }
                v
            }
            Distribution::Cube => (0..d).map(|_| rng.uniform(0.0, 1.0)).collect(),
            Distribution::Gauss => (0..d)
                .map(|_| rng.normal(0.0, 1.0).clamp(-GAUSS_CLIP, GAUSS_CLIP))
                .collect(),
        };
        inputs.push(DenseVector::from(x));
        labels.push(rng.index(classes));
    }
    let bounds = match dist {
        Distribution::Ball => FeatureBounds::uniform(d, -1.0, 1.0),
        Distribution::Cube => FeatureBounds::uniform(d, 0.0, 1.0),
        Distribution::Gauss => FeatureBounds::uniform(d, -GAUSS_CLIP, GAUSS_CLIP),
    };
    Ok((Batch::new(inputs, labels)?, bounds))
}

/// Affine map taking `[src_lo, src_hi]` onto `[dst_lo, dst_hi]`; constant
/// columns map onto the midpoint of the target range.
fn affine(src: (f64, f64), dst: (f64, f64)) -> (f64, f64) {
    let (s0, s1) = src;
    let (d0, d1) = dst;
    if s1 > s0 {
        let a = (d1 - d0) / (s1 - s0);
        (a, d0 - a * s0)
    } else {
        (0.0, 0.5 * (d0 + d1))
    }
}

/// Loads a CSV with a header row; every non-label column is a numeric
/// feature, scaled per column into the target range. The label column must
/// be integer-coded.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    scaling: Scaling,
) -> Result<(Batch, FeatureBounds)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(csv_io_error)?;
    let headers = reader.headers().map_err(csv_io_error)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(vec![format!("label column '{label_column}' not found")]))?;
    let feature_idx: Vec<usize> = (0..headers.len()).filter(|&j| j != label_idx).collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(csv_io_error)?;
        let mut row = Vec::with_capacity(feature_idx.len());
        for &j in &feature_idx {
            let cell = record.get(j).unwrap_or("");
            let value: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 2, // 1-based, after the header
                col: headers[j].to_string(),
                message: format!("'{cell}' is not numeric"),
            })?;
            row.push(value);
        }
        let cell = record.get(label_idx).unwrap_or("");
        let label: f64 = cell.parse().map_err(|_| Error::Parse {
            row: r + 2,
            col: headers[label_idx].to_string(),
            message: format!("label '{cell}' is not numeric"),
        })?;
        if label < 0.0 || label.fract() != 0.0 {
            return Err(Error::Parse {
                row: r + 2,
                col: headers[label_idx].to_string(),
                message: format!("label '{cell}' is not a nonnegative integer"),
            });
        }
        rows.push(row);
        labels.push(label as usize);
    }
    if rows.is_empty() {
        return Err(Error::invalid("CSV has no data rows"));
    }

    let d = rows[0].len();
    let observed: Vec<(f64, f64)> = (0..d)
        .map(|j| {
            rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, row| {
                (acc.0.min(row[j]), acc.1.max(row[j]))
            })
        })
        .collect();

    let target = match scaling {
        Scaling::Minus1To1 => Some((-1.0, 1.0)),
        Scaling::Zero1 => Some((0.0, 1.0)),
        Scaling::None => None,
    };
    let bounds = match target {
        Some(t) => FeatureBounds::uniform(d, t.0, t.1),
        // Unscaled: report observed ranges, widening degenerate columns.
        None => FeatureBounds::new(
            observed
                .iter()
                .map(|&(lo, hi)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
                .collect(),
        )?,
    };
    if let Some(t) = target {
        let maps: Vec<(f64, f64)> = observed.iter().map(|&src| affine(src, t)).collect();
        for row in &mut rows {
            for (v, (a, b)) in row.iter_mut().zip(&maps) {
                *v = a * *v + b;
            }
        }
    }

    let inputs = rows.into_iter().map(DenseVector::from).collect();
    Ok((Batch::new(inputs, labels)?, bounds))
}

fn csv_io_error(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
        _ => Error::Format(e.to_string()),
    }
}

/// Writes inputs in the raw tensor format: magic "HRT1", little-endian u32
/// sample count, u32 dimension, then n*d little-endian f64 values.
pub fn write_tensor(path: impl AsRef<Path>, inputs: &[DenseVector]) -> Result<()> {
    let n = inputs.len();
    let d = inputs.first().map_or(0, DenseVector::len);
    if inputs.iter().any(|x| x.len() != d) {
        return Err(Error::shape("tensor rows have mixed dimensions"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for x in inputs {
        for v in x.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the raw tensor format back into a batch. The format carries no
/// labels, so labels default to class 0; bounds are `[0, 1]` per feature.
pub fn load_tensor(path: impl AsRef<Path>) -> Result<(Batch, FeatureBounds)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("tensor file shorter than its header".into()))?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, TENSOR_MAGIC
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| Error::Format("tensor file shorter than its header".into()))?;
    let n = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)
        .map_err(|_| Error::Format("tensor file shorter than its header".into()))?;
    let d = u32::from_le_bytes(word) as usize;
    if n == 0 || d == 0 {
        return Err(Error::Format("tensor header declares an empty shape".into()));
    }

    let mut inputs = Vec::with_capacity(n);
    let mut buf = vec![0u8; d * 8];
    for _ in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("tensor payload truncated".into()))?;
        let row: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        inputs.push(DenseVector::from(row));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("tensor payload longer than declared".into()));
    }
    let batch = Batch::new(inputs, vec![0; n])?;
    Ok((batch, FeatureBounds::uniform(d, 0.0, 1.0)))
}

/// Restricts a batch to a seed-chosen subset of `classes_per_client`
/// classes, preserving sample order. The subset is the contiguous class
/// block starting at `(seed * classes_per_client) mod C`, so clients with
/// consecutive seeds hold disjoint label sets.
pub fn partition_non_iid(
    batch: &Batch,
    classes_per_client: usize,
    seed: u64,
) -> Result<Batch> {
    let class_count = batch.labels.iter().max().map_or(0, |m| m + 1);
    if classes_per_client == 0 || classes_per_client > class_count {
        return Err(Error::Config(vec![format!(
            "classes_per_client {classes_per_client} out of range for {class_count} classes"
        )]));
    }
    if classes_per_client == class_count {
        return Ok(batch.clone());
    }
    let start = (seed as usize * classes_per_client) % class_count;
    let chosen: Vec<usize> = (0..classes_per_client)
        .map(|i| (start + i) % class_count)
        .collect();

    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        if chosen.contains(&y) {
            inputs.push(x.clone());
            labels.push(y);
        }
    }
    for &c in &chosen {
        if !labels.contains(&c) {
            return Err(Error::Config(vec![format!(
                "insufficient samples: chosen class {c} has none"
            )]));
        }
    }
    Batch::new(inputs, labels)
}
