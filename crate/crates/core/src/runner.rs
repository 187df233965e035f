//! Config-driven experiment harness: wires data, federation, attacks, and
//! metrics; sweeps grids of (n, neurons, rounds, noise); emits JSON or CSV
//! reports. Everything in a report is determined by the config file and
//! seed list; wall-clock fields are the only nondeterministic values.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{
    epsilon_for_confidence, round_bound, run_attack, AttackConfig, WeightMode,
};
use crate::data::{gen_synthetic, load_csv, load_tensor, partition_non_iid, Scaling};
use crate::error::{Error, Result};
use crate::federation::{ClientConfig, ClientMode};
use crate::geometry::{hull_vertex_count, Distribution, PointCloud};
use crate::metrics::{match_reconstructions, Modality, RecoveryStats};
use crate::model::{Batch, Precision};
use crate::numerics::mix_seed;
use crate::trap_weights::{run_trap_weights, TrapWeightsConfig};

const ATTACK_SEED_TAG: u64 = 0x6174_6b31;
const CLIENT_SEED_TAG: u64 = 0x636c_6931;
/// Confidence level used for the logged round-bound prediction.
const BOUND_CONFIDENCE: f64 = 0.05;

/// Which attack a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    Hyperplane,
    TrapWeights,
}

/// Dataset section of the experiment config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    pub source: String,
    #[serde(default = "default_dist")]
    pub dist: Distribution,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub path: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub scaling: Scaling,
    /// 0 means IID (no partition); otherwise each client keeps this many
    /// classes.
    #[serde(default)]
    pub classes_per_client: usize,
}

fn default_dist() -> Distribution {
    Distribution::Gauss
}
fn default_n() -> usize {
    256
}
fn default_d() -> usize {
    64
}
fn default_classes() -> usize {
    10
}
fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub neurons: usize,
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientSection {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default = "default_steps")]
    pub local_steps: usize,
    #[serde(default = "default_minibatch")]
    pub minibatch: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_mode() -> String {
    "full_batch".into()
}
fn default_steps() -> usize {
    1
}
fn default_minibatch() -> usize {
    0
}
fn default_lr() -> f64 {
    1e-4
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            local_steps: default_steps(),
            minibatch: default_minibatch(),
            learning_rate: default_lr(),
            noise_std: 0.0,
            precision: Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSection {
    pub rounds: usize,
    #[serde(default)]
    pub weight_mode: WeightMode,
    #[serde(default = "default_g_tol")]
    pub g_equal_tol: f64,
    #[serde(default = "default_r_tol")]
    pub residual_tol: f64,
    #[serde(default)]
    pub epsilon: f64,
}

fn default_g_tol() -> f64 {
    1e-9
}
fn default_r_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrapSection {
    #[serde(default = "default_trap_std")]
    pub weight_std: f64,
    #[serde(default = "default_trap_scale")]
    pub scale_factor: f64,
    #[serde(default = "default_dedup")]
    pub dedup_tol: f64,
}

fn default_trap_std() -> f64 {
    1.0
}
fn default_trap_scale() -> f64 {
    0.97
}
fn default_dedup() -> f64 {
    1e-6
}

impl Default for TrapSection {
    fn default() -> Self {
        Self {
            weight_std: default_trap_std(),
            scale_factor: default_trap_scale(),
            dedup_tol: default_dedup(),
        }
    }
}

/// Optional per-dimension sweep lists; absent lists use the base value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepSection {
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub neurons: Vec<usize>,
    #[serde(default)]
    pub rounds: Vec<usize>,
    #[serde(default)]
    pub noise_std: Vec<f64>,
}

/// Full experiment configuration (flat TOML document).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub attack: AttackKind,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: String,
    /// When true, every record carries the batch's hull-vertex count.
    #[serde(default)]
    pub compute_hull: bool,
    /// Optional image shape [height, width, channels] switching scoring to
    /// SSIM.
    #[serde(default)]
    pub image_shape: Vec<usize>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    #[serde(default)]
    pub client: ClientSection,
    pub attack_params: AttackSection,
    #[serde(default)]
    pub trap_params: TrapSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_output() -> String {
    "report.json".into()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Validates the config, listing every offending field.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.seeds.is_empty() {
            problems.push("seeds: must list at least one seed".into());
        }
        if self.model.neurons == 0 {
            problems.push("model.neurons: must be >= 1".into());
        }
        if self.attack_params.rounds == 0 {
            problems.push("attack_params.rounds: must be >= 1".into());
        }
        match self.dataset.source.as_str() {
            "synthetic" => {
                if self.dataset.n == 0 || self.dataset.d == 0 {
                    problems.push("dataset: n and d must be >= 1".into());
                }
                if self.dataset.classes < 2 {
                    problems.push("dataset.classes: must be >= 2".into());
                }
            }
            "csv" | "tensor" => {
                if self.dataset.path.is_empty() {
                    problems.push("dataset.path: required for csv/tensor sources".into());
                }
            }
            other => problems.push(format!("dataset.source: unknown source '{other}'")),
        }
        match self.client.mode.as_str() {
            "full_batch" => {}
            "local_steps" => {
                if self.client.minibatch == 0 {
                    problems.push("client.minibatch: must be >= 1 in local_steps mode".into());
                }
            }
            other => problems.push(format!("client.mode: unknown mode '{other}'")),
        }
        if self.client.noise_std < 0.0 {
            problems.push("client.noise_std: must be >= 0".into());
        }
        if !self.image_shape.is_empty() && self.image_shape.len() != 3 {
            problems.push("image_shape: expected [height, width, channels]".into());
        }
        for n in self.sweep.n.iter().chain(&self.sweep.neurons).chain(&self.sweep.rounds) {
            if *n == 0 {
                problems.push("sweep: entries must be >= 1".into());
            }
        }
        for s in &self.sweep.noise_std {
            if *s < 0.0 {
                problems.push("sweep.noise_std: entries must be >= 0".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    fn cells(&self) -> Vec<SweepCell> {
        let ns = non_empty_or(&self.sweep.n, self.dataset.n);
        let neurons = non_empty_or(&self.sweep.neurons, self.model.neurons);
        let rounds = non_empty_or(&self.sweep.rounds, self.attack_params.rounds);
        let sigmas = non_empty_or(&self.sweep.noise_std, self.client.noise_std);
        let mut cells = Vec::new();
        for &n in &ns {
            for &nn in &neurons {
                for &t in &rounds {
                    for &s in &sigmas {
                        cells.push(SweepCell {
                            n,
                            neurons: nn,
                            rounds: t,
                            noise_std: s,
                        });
                    }
                }
            }
        }
        cells
    }

    fn modality(&self) -> Modality {
        if self.image_shape.len() == 3 {
            Modality::Image {
                height: self.image_shape[0],
                width: self.image_shape[1],
                channels: self.image_shape[2],
            }
        } else {
            Modality::Tabular
        }
    }
}

fn non_empty_or<T: Copy>(list: &[T], base: T) -> Vec<T> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n: usize,
    pub neurons: usize,
    pub rounds: usize,
    pub noise_std: f64,
}

/// One (cell, seed) outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub attack: AttackKind,
    pub cell: SweepCell,
    pub d: usize,
    pub seed: u64,
    pub stats: Option<RecoveryStats>,
    pub collisions: usize,
    pub round_bound_prediction: Option<usize>,
    pub hull_vertex_count: Option<usize>,
    pub error: Option<String>,
}

/// Per-cell aggregate of the recovery fraction over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellAggregate {
    pub cell: SweepCell,
    pub mean_fraction: f64,
    pub std_fraction: f64,
    pub runs: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<CellAggregate>,
}

/// Builds the batch for one (cell, seed) run.
fn build_batch(config: &ExperimentConfig, cell: &SweepCell, seed: u64) -> Result<(Batch, crate::data::FeatureBounds)> {
    let ds = &config.dataset;
    let (mut batch, bounds) = match ds.source.as_str() {
        "synthetic" => gen_synthetic(
            ds.dist,
            cell.n.max(ds.n),
            ds.d,
            ds.classes,
            mix_seed(ds.seed, seed),
        )?,
        "csv" => load_csv(&ds.path, &ds.label_column, ds.scaling)?,
        "tensor" => load_tensor(&ds.path)?,
        other => return Err(Error::Config(vec![format!("unknown source '{other}'")])),
    };
    if ds.classes_per_client > 0 {
        batch = partition_non_iid(&batch, ds.classes_per_client, seed)?;
    }
    if batch.len() < cell.n {
        return Err(Error::Config(vec![format!(
            "cell needs n={} samples but the dataset provides {}",
            cell.n,
            batch.len()
        )]));
    }
    batch.inputs.truncate(cell.n);
    batch.labels.truncate(cell.n);
    Ok((batch, bounds))
}

fn run_one(config: &ExperimentConfig, cell: &SweepCell, seed: u64) -> Result<RunRecord> {
    let start = Instant::now();
    let (batch, bounds) = build_batch(config, cell, seed)?;
    let d = batch.dim();
    let truth = batch.clone();

    let hull = if config.compute_hull {
        let cloud = PointCloud::new(batch.inputs.clone())?;
        Some(hull_vertex_count(&cloud)?)
    } else {
        None
    };

    let mode = match config.client.mode.as_str() {
        "local_steps" => ClientMode::LocalSteps {
            steps: config.client.local_steps,
            minibatch: config.client.minibatch,
            learning_rate: config.client.learning_rate,
        },
        _ => ClientMode::FullBatch,
    };
    let client = ClientConfig {
        batch,
        mode,
        noise_std: cell.noise_std,
        rng_seed: mix_seed(seed, CLIENT_SEED_TAG),
        precision: config.client.precision,
    };

    let (mut stats, collisions, bound) = match config.attack {
        AttackKind::Hyperplane => {
            let mut attack_cfg = AttackConfig::new(
                cell.neurons,
                config.dataset.classes.max(2),
                cell.rounds,
                bounds,
                mix_seed(seed, ATTACK_SEED_TAG),
            );
            attack_cfg.weight_mode = config.attack_params.weight_mode;
            attack_cfg.g_equal_tol = config.attack_params.g_equal_tol;
            attack_cfg.residual_tol = config.attack_params.residual_tol;
            attack_cfg.epsilon = config.attack_params.epsilon;
            attack_cfg.hidden_layers = config.model.hidden_layers.clone();

            // Planning-side prediction of the rounds needed (logged only).
            let bound = plan_round_bound(&truth, &attack_cfg);

            let result = run_attack(&client, &attack_cfg)?;
            let mut stats = match_reconstructions(
                &truth,
                &result.recovered_inputs,
                Some(&result.recovered_labels),
                config.modality(),
            )?;
            stats.rounds_used = result.rounds_used;
            (stats, result.collisions, bound)
        }
        AttackKind::TrapWeights => {
            let trap_cfg = TrapWeightsConfig {
                neurons: cell.neurons,
                classes: config.dataset.classes.max(2),
                weight_std: config.trap_params.weight_std,
                scale_factor: config.trap_params.scale_factor,
                rounds: cell.rounds,
                rng_seed: mix_seed(seed, ATTACK_SEED_TAG),
                dedup_tol: config.trap_params.dedup_tol,
            };
            trap_cfg.validate()?;
            let result = run_trap_weights(&client, &trap_cfg, crate::metrics::L2_THRESHOLD)?;
            let recovered = result.recovered_indices();
            let per_sample_error: Vec<f64> = (0..truth.len())
                .map(|j| {
                    result
                        .recovered
                        .iter()
                        .find(|(idx, _)| *idx == j)
                        .map(|(_, cand)| cand.dist2(&truth.inputs[j]))
                        .unwrap_or(f64::INFINITY)
                })
                .collect();
            let stats = RecoveryStats {
                n_true: truth.len(),
                n_recovered_exact: recovered.len(),
                fraction: recovered.len() as f64 / truth.len() as f64,
                per_sample_error,
                unmatched_recovered: result.candidates.len().saturating_sub(recovered.len()),
                labels_correct: None,
                rounds_used: result.rounds_used,
                wall_time_seconds: 0.0,
            };
            (stats, 0, None)
        }
    };
    stats.wall_time_seconds = start.elapsed().as_secs_f64();

    Ok(RunRecord {
        attack: config.attack,
        cell: *cell,
        d,
        seed,
        stats: Some(stats),
        collisions,
        round_bound_prediction: bound,
        hull_vertex_count: hull,
        error: None,
    })
}

/// Round-bound prediction from ground truth (simulator privilege): the true
/// minimum pairwise distance feeds the epsilon rule at 5% confidence, and
/// the width comes from the attack's actual search interval (the crafted
/// direction is deterministic in the seed, so crafting here reproduces it).
/// Only defined when the formula's precondition N >= n holds.
fn plan_round_bound(truth: &Batch, attack_cfg: &AttackConfig) -> Option<usize> {
    let n = truth.len();
    if attack_cfg.neurons < n {
        return None;
    }
    let delta = truth.min_pairwise_distance();
    let eps = epsilon_for_confidence(delta, n, BOUND_CONFIDENCE).ok()?;
    let params = crate::attack::craft_malicious_params(truth.dim(), attack_cfg).ok()?;
    let direction = crate::attack::attack_direction(&params);
    let (lo, hi) =
        crate::attack::initial_interval(&direction, &attack_cfg.feature_bounds).ok()?;
    round_bound(hi - lo, attack_cfg.neurons, n, eps).ok()
}

/// Executes every sweep cell x seed. Individual run failures are recorded,
/// not propagated; the error return covers config validation only.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let cells = config.cells();
    let jobs: Vec<(SweepCell, u64)> = cells
        .iter()
        .flat_map(|c| config.seeds.iter().map(move |&s| (*c, s)))
        .collect();

    let records: Vec<RunRecord> = jobs
        .par_iter()
        .map(|(cell, seed)| {
            run_one(config, cell, *seed).unwrap_or_else(|e| RunRecord {
                attack: config.attack,
                cell: *cell,
                d: config.dataset.d,
                seed: *seed,
                stats: None,
                collisions: 0,
                round_bound_prediction: None,
                hull_vertex_count: None,
                error: Some(e.to_string()),
            })
        })
        .collect();

    let aggregates = cells
        .iter()
        .map(|cell| {
            let fractions: Vec<f64> = records
                .iter()
                .filter(|r| r.cell == *cell)
                .filter_map(|r| r.stats.as_ref().map(|s| s.fraction))
                .collect();
            let failures = records
                .iter()
                .filter(|r| r.cell == *cell && r.error.is_some())
                .count();
            let mean = if fractions.is_empty() {
                0.0
            } else {
                fractions.iter().sum::<f64>() / fractions.len() as f64
            };
            let std = if fractions.len() > 1 {
                (fractions.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>()
                    / (fractions.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            CellAggregate {
                cell: *cell,
                mean_fraction: mean,
                std_fraction: std,
                runs: fractions.len(),
                failures,
            }
        })
        .collect();

    Ok(ExperimentReport {
        config: config.clone(),
        records,
        aggregates,
    })
}

/// Report output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn from_path(path: &Path) -> ReportFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        }
    }
}

/// Stable CSV column order.
pub const CSV_HEADER: [&str; 18] = [
    "attack",
    "n",
    "d",
    "neurons",
    "rounds",
    "noise_std",
    "seed",
    "fraction",
    "n_true",
    "n_recovered",
    "labels_correct",
    "unmatched_recovered",
    "rounds_used",
    "collisions",
    "round_bound",
    "hull_vertices",
    "wall_time_s",
    "error",
];

/// Writes the report to `path` as a single JSON document (config echoed
/// under "config") or as CSV with one row per record.
pub fn emit_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let body = serde_json::to_string_pretty(report)
                .map_err(|e| Error::Format(e.to_string()))?;
            std::fs::write(path, body)?;
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for r in &report.records {
                let attack = match r.attack {
                    AttackKind::Hyperplane => "hyperplane",
                    AttackKind::TrapWeights => "trap_weights",
                };
                let s = r.stats.as_ref();
                w.write_record([
                    attack.to_string(),
                    r.cell.n.to_string(),
                    r.d.to_string(),
                    r.cell.neurons.to_string(),
                    r.cell.rounds.to_string(),
                    fmt_f64(r.cell.noise_std),
                    r.seed.to_string(),
                    s.map(|s| fmt_f64(s.fraction)).unwrap_or_default(),
                    s.map(|s| s.n_true.to_string()).unwrap_or_default(),
                    s.map(|s| s.n_recovered_exact.to_string()).unwrap_or_default(),
                    s.and_then(|s| s.labels_correct)
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                    s.map(|s| s.unmatched_recovered.to_string()).unwrap_or_default(),
                    s.map(|s| s.rounds_used.to_string()).unwrap_or_default(),
                    r.collisions.to_string(),
                    r.round_bound_prediction
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                    r.hull_vertex_count.map(|v| v.to_string()).unwrap_or_default(),
                    s.map(|s| fmt_f64(s.wall_time_seconds)).unwrap_or_default(),
                    r.error.clone().unwrap_or_default(),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn fmt_f64(v: f64) -> String {
    // Decimal formatting that survives a JSON -> CSV -> parse round trip.
    format!("{v}")
}
