use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfenkf::models::io::{read_snapshots, write_basis, write_snapshots};
use mfenkf::models::pod::pod_modes;
use mfenkf::models::{QgConfig, DAY};
use mfenkf::validate_forest;
use mfenkf_harness::setup::Setup;
use mfenkf_harness::{generate_snapshots, run_config_to, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "mfenkf", version, about = "Model-forest EnKF twin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the QG model from rest and store a snapshot matrix.
    GenerateSnapshots {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 31)]
        nx: usize,
        #[arg(long, default_value_t = 63)]
        ny: usize,
        #[arg(long, default_value_t = 450.0)]
        reynolds: f64,
        #[arg(long, default_value_t = 400)]
        count: usize,
        /// Windows between snapshots.
        #[arg(long, default_value_t = 10)]
        spacing: usize,
        /// Windows discarded before the first snapshot.
        #[arg(long, default_value_t = 500)]
        spinup: usize,
        #[arg(long, default_value_t = DAY)]
        window: f64,
    },
    /// Compute a POD basis from a snapshot file.
    BuildPod {
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        rank: usize,
        /// Subtract the snapshot mean before the decomposition.
        #[arg(long)]
        center: bool,
    },
    /// Run the sweep described by an experiment config and write its CSV.
    Run {
        config: PathBuf,
        /// Worker threads; all cores by default.
        #[arg(long)]
        threads: Option<usize>,
        /// Override the configured CSV destination.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check a config and the consistency of its forests without filtering.
    Validate { config: PathBuf },
}

fn exit_code(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Config(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<u8, HarnessError> {
    match cli.command {
        Command::GenerateSnapshots {
            out,
            nx,
            ny,
            reynolds,
            count,
            spacing,
            spinup,
            window,
        } => {
            let cfg = QgConfig::new(nx, ny, reynolds);
            let s = generate_snapshots(&cfg, window, spinup, count, spacing)?;
            write_snapshots(&out, &s)?;
            println!(
                "wrote {} snapshots of dimension {} to {}",
                s.len(),
                s.dim(),
                out.display()
            );
        }
        Command::BuildPod {
            snapshots,
            out,
            rank,
            center,
        } => {
            let s = read_snapshots(&snapshots)?;
            let m = pod_modes(&s.data, rank, center)?;
            write_basis(&out, &m.phi, m.shift.as_ref())?;
            let total: f64 = m.singular_values.iter().map(|v| v * v).sum();
            let kept: f64 = m.singular_values.iter().take(rank).map(|v| v * v).sum();
            println!(
                "wrote {rank} modes to {} ({:.2}% of snapshot energy)",
                out.display(),
                100.0 * kept / total
            );
        }
        Command::Run {
            config,
            threads,
            output,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            if let Some(t) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build_global()
                    .map_err(|e| HarnessError::Config(e.to_string()))?;
            }
            let dest = output.unwrap_or_else(|| cfg.output.clone());
            let cells = run_config_to(&cfg, &dest)?;
            for c in &cells {
                for f in &c.failures {
                    eprintln!("{} N={} alpha={}: {f}", c.forest_id, c.n, c.alpha);
                }
            }
            println!("wrote {} rows to {}", cells.len(), dest.display());
            if cells.iter().all(|c| c.all_diverged()) {
                eprintln!("every cell diverged");
                return Ok(3);
            }
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let setup = Setup::build(&cfg)?;
            let mut worst = 0.0f64;
            for b in &setup.forests {
                let probes = setup.probes(&b.forest, 8);
                let report = validate_forest(&b.forest, &probes)?;
                println!("forest {}: {report:?}", b.id);
                worst = worst.max(report.weight_residual);
            }
            if worst > 1e-12 {
                return Err(HarnessError::Config(format!(
                    "forest weights off by {worst:e}"
                )));
            }
            println!("{}: ok", cfg.name);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
