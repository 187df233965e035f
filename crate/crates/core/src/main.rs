//! Command-line experiment driver.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O error.
//! `FEDRECON_WORKERS` caps the worker thread count.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedrecon::data::{gen_synthetic, load_tensor, write_tensor};
use fedrecon::error::Error;
use fedrecon::geometry::{hull_vertex_count, Distribution, PointCloud};
use fedrecon::runner::{emit_report, run_experiment, AttackKind, ExperimentConfig, ReportFormat};

#[derive(Parser)]
#[command(name = "fedrecon", version, about = "FedSGD gradient-inversion attack simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Output path override (.json or .csv decides the format).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Seed list override, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Round budget override.
        #[arg(long)]
        rounds: Option<usize>,
        /// First-layer width override.
        #[arg(long)]
        neurons: Option<usize>,
        /// Batch size override.
        #[arg(long)]
        n: Option<usize>,
        /// Client noise std override.
        #[arg(long)]
        noise_std: Option<f64>,
        /// Attack override: hyperplane | trap_weights.
        #[arg(long)]
        attack: Option<String>,
    },
    /// Generate a synthetic batch and write it in the raw tensor format.
    /// Spec: dist:n:d:classes:seed, e.g. gauss:256:64:10:0.
    GenData { spec: String, out: PathBuf },
    /// Print hull-vertex statistics for a raw tensor file.
    HullStats { tensor: PathBuf },
    /// Validate a config file without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    init_workers();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn init_workers() {
    if let Ok(workers) = std::env::var("FEDRECON_WORKERS") {
        if let Ok(count) = workers.parse::<usize>() {
            if count >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(count)
                    .build_global();
            }
        }
    }
}

fn dispatch(cli: Cli) -> fedrecon::Result<()> {
    match cli.command {
        Command::Run {
            config,
            output,
            seeds,
            rounds,
            neurons,
            n,
            noise_std,
            attack,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            // Precedence: flag > file > default.
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if let Some(rounds) = rounds {
                cfg.attack_params.rounds = rounds;
                cfg.sweep.rounds.clear();
            }
            if let Some(neurons) = neurons {
                cfg.model.neurons = neurons;
                cfg.sweep.neurons.clear();
            }
            if let Some(n) = n {
                cfg.dataset.n = n;
                cfg.sweep.n.clear();
            }
            if let Some(sigma) = noise_std {
                cfg.client.noise_std = sigma;
                cfg.sweep.noise_std.clear();
            }
            if let Some(attack) = attack {
                cfg.attack = match attack.as_str() {
                    "hyperplane" => AttackKind::Hyperplane,
                    "trap_weights" => AttackKind::TrapWeights,
                    other => {
                        return Err(Error::Config(vec![format!("unknown attack '{other}'")]))
                    }
                };
            }
            if let Some(output) = output {
                cfg.output = output.to_string_lossy().into_owned();
            }
            cfg.validate()?;

            let report = run_experiment(&cfg)?;
            let path = PathBuf::from(&cfg.output);
            emit_report(&report, ReportFormat::from_path(&path), &path)?;

            for agg in &report.aggregates {
                println!(
                    "n={} neurons={} rounds={} sigma={}: fraction {:.4} +- {:.4} ({} runs, {} failed)",
                    agg.cell.n,
                    agg.cell.neurons,
                    agg.cell.rounds,
                    agg.cell.noise_std,
                    agg.mean_fraction,
                    agg.std_fraction,
                    agg.runs,
                    agg.failures
                );
            }
            println!("report written to {}", path.display());
            Ok(())
        }
        Command::GenData { spec, out } => {
            let (dist, n, d, classes, seed) = parse_gen_spec(&spec)?;
            let (batch, _) = gen_synthetic(dist, n, d, classes, seed)?;
            write_tensor(&out, &batch.inputs)?;
            println!("wrote {} samples of dim {} to {}", n, d, out.display());
            Ok(())
        }
        Command::HullStats { tensor } => {
            let (batch, _) = load_tensor(&tensor)?;
            let cloud = PointCloud::new(batch.inputs)?;
            let vertices = hull_vertex_count(&cloud)?;
            println!(
                "n={} d={} hull_vertices={} fraction={:.4}",
                cloud.len(),
                cloud.dim(),
                vertices,
                vertices as f64 / cloud.len() as f64
            );
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            cfg.validate()?;
            println!("config ok: {} sweep cells x {} seeds", sweep_size(&cfg), cfg.seeds.len());
            Ok(())
        }
    }
}

fn sweep_size(cfg: &ExperimentConfig) -> usize {
    let len = |l: &[usize]| if l.is_empty() { 1 } else { l.len() };
    len(&cfg.sweep.n)
        * len(&cfg.sweep.neurons)
        * len(&cfg.sweep.rounds)
        * if cfg.sweep.noise_std.is_empty() {
            1
        } else {
            cfg.sweep.noise_std.len()
        }
}

fn parse_gen_spec(spec: &str) -> fedrecon::Result<(Distribution, usize, usize, usize, u64)> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 5 {
        return Err(Error::Config(vec![format!(
            "gen-data spec '{spec}' should be dist:n:d:classes:seed"
        )]));
    }
    let dist = match parts[0] {
        "ball" => Distribution::Ball,
        "cube" => Distribution::Cube,
        "gauss" => Distribution::Gauss,
        other => {
            return Err(Error::Config(vec![format!(
                "unknown distribution '{other}' (ball|cube|gauss)"
            )]))
        }
    };
    let parse = |s: &str, what: &str| -> fedrecon::Result<usize> {
        s.parse()
            .map_err(|_| Error::Config(vec![format!("bad {what} '{s}'")]))
    };
    Ok((
        dist,
        parse(parts[1], "n")?,
        parse(parts[2], "d")?,
        parse(parts[3], "classes")?,
        parse(parts[4], "seed")? as u64,
    ))
}
