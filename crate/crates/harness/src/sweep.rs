//! Grid of twin experiments over forests, ensemble sizes and inflation
//! factors, summarized to CSV.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::{run_twin_experiment, RunResult};
use crate::setup::Setup;

pub const CSV_HEADER: [&str; 9] = [
    "forest_id",
    "N",
    "alpha",
    "runs",
    "diverged",
    "mean_rmse",
    "std_rmse",
    "hf_runs_per_step",
    "wall_seconds",
];

/// Summary of all runs of one `(forest, N, alpha)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub forest_id: String,
    pub n: usize,
    pub alpha: f64,
    pub runs: usize,
    /// Runs that diverged.
    pub diverged: usize,
    /// Mean and sample standard deviation of the error over converged runs.
    pub mean_rmse: Option<f64>,
    pub std_rmse: Option<f64>,
    pub hf_runs_per_step: f64,
    pub wall_seconds: f64,
    pub failures: Vec<String>,
}

impl CellSummary {
    pub fn from_runs(forest_id: &str, n: usize, alpha: f64, runs: &[RunResult]) -> Self {
        let ok: Vec<f64> = runs.iter().filter_map(|r| r.rmse).collect();
        let mean = (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64);
        let std = match (mean, ok.len()) {
            (Some(m), k) if k > 1 => {
                Some((ok.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt())
            }
            (Some(_), _) => Some(0.0),
            _ => None,
        };
        Self {
            forest_id: forest_id.to_string(),
            n,
            alpha,
            runs: runs.len(),
            diverged: runs.iter().filter(|r| r.diverged.is_some()).count(),
            mean_rmse: mean,
            std_rmse: std,
            hf_runs_per_step: runs.iter().map(|r| r.hf_runs_per_step).fold(0.0, f64::max),
            wall_seconds: runs.iter().map(|r| r.wall_seconds).sum(),
            failures: runs.iter().filter_map(|r| r.diverged.clone()).collect(),
        }
    }

    /// True when every run diverged.
    pub fn all_diverged(&self) -> bool {
        self.diverged == self.runs
    }
}

/// Runs every cell of the sweep. Cells come back ordered by ensemble size,
/// then inflation, then forest, whatever the number of threads.
pub fn run_sweep(setup: &Setup) -> Result<Vec<CellSummary>> {
    let cfg = &setup.config;
    let alphas = cfg.sweep.alphas();
    let mut jobs = Vec::new();
    for &n in &cfg.sweep.n {
        for &alpha in &alphas {
            for forest in 0..setup.forests.len() {
                for run in 0..cfg.runs {
                    jobs.push((n, alpha, forest, run));
                }
            }
        }
    }
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|&(n, alpha, forest, run)| run_twin_experiment(setup, forest, n, alpha, run))
        .collect::<Result<_>>()?;
    Ok(results
        .chunks(cfg.runs)
        .zip(jobs.iter().step_by(cfg.runs))
        .map(|(runs, &(n, alpha, forest, _))| {
            CellSummary::from_runs(&setup.forests[forest].id, n, alpha, runs)
        })
        .collect())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_csv<W: Write>(out: W, cells: &[CellSummary], wall_time: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for c in cells {
        w.write_record([
            c.forest_id.clone(),
            c.n.to_string(),
            c.alpha.to_string(),
            c.runs.to_string(),
            c.diverged.to_string(),
            opt(c.mean_rmse),
            opt(c.std_rmse),
            c.hf_runs_per_step.to_string(),
            if wall_time {
                c.wall_seconds.to_string()
            } else {
                String::new()
            },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Builds the setup, runs the sweep and writes the CSV to the
/// configured output. The output file is created before any simulation so
/// an unwritable destination fails fast.
pub fn run_config(cfg: &ExperimentConfig) -> Result<Vec<CellSummary>> {
    run_config_to(cfg, &cfg.output)
}

pub fn run_config_to(cfg: &ExperimentConfig, output: &Path) -> Result<Vec<CellSummary>> {
    cfg.validate()?;
    let file = File::create(output)
        .map_err(|e| HarnessError::Io(format!("cannot create {}: {e}", output.display())))?;
    let setup = Setup::build(cfg)?;
    let cells = run_sweep(&setup)?;
    write_csv(file, &cells, cfg.record_wall_time)?;
    Ok(cells)
}
