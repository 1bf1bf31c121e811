//! One twin experiment: a nature run observed with noise and a forest filter
//! assimilating those observations.

use std::collections::BTreeMap;
use std::time::Instant;

use mfenkf::analysis::forest_total_variate_means;
use mfenkf::{
    apply_heuristics, forest_analysis, propagate_forest, Ensemble, ForestState, ModelForest,
    ModelIndex, TreeState,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{HarnessError, Result};
use crate::setup::Setup;

/// A step error above this multiple of the climatological spread counts as
/// divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

const TRUTH_STREAM: u64 = 1;
const FILTER_STREAM: u64 = 2;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one run. Forests do not enter it, so every forest sees the same
/// truth, observations and initial draws for a given `(n, alpha, run)`.
pub fn run_seed(master: u64, n: usize, alpha: f64, run: usize) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ n as u64);
    h = splitmix64(h ^ alpha.to_bits());
    splitmix64(h ^ run as u64)
}

/// Root mean square error over steps `t0..=tf` and every state entry:
/// `sqrt(sum_t |xhat_t - x_t|^2 / ((tf - t0 + 1) n))`.
pub fn rmse(
    estimates: &[DVector<f64>],
    truths: &[DVector<f64>],
    t0: usize,
    tf: usize,
) -> Result<f64> {
    if t0 > tf || tf >= estimates.len() || tf >= truths.len() {
        return Err(HarnessError::Config(format!(
            "error window {t0}..={tf} outside sequences of {} and {} steps",
            estimates.len(),
            truths.len()
        )));
    }
    let mut sum = 0.0;
    let mut terms = 0usize;
    for t in t0..=tf {
        if estimates[t].len() != truths[t].len() {
            return Err(HarnessError::Config(format!(
                "step {t}: estimate and truth dimensions differ"
            )));
        }
        sum += (&estimates[t] - &truths[t]).norm_squared();
        terms += truths[t].len();
    }
    Ok((sum / terms as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// Error over the metric window; `None` when the run diverged.
    pub rmse: Option<f64>,
    pub diverged: Option<String>,
    /// Per-step error of the analysis mean, step 0 being the initial
    /// ensemble.
    pub step_errors: Vec<f64>,
    /// High-fidelity model runs per assimilation step.
    pub hf_runs_per_step: f64,
    pub wall_seconds: f64,
}

fn gaussian_draw<R: Rng>(setup: &Setup, center: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let a = &setup.nature.climatology.scaled_anomalies;
    let xi = DVector::from_fn(a.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    center + (a * xi) * setup.config.init.spread
}

/// Initial forest state around `truth`: Gaussian draws with the
/// climatological covariance, pushed down the projection chain for every
/// surrogate's ancillary ensemble.
pub fn initial_state<R: Rng>(
    setup: &Setup,
    forest: &ModelForest<f64>,
    n: usize,
    truth: &DVector<f64>,
    rng: &mut R,
) -> Result<ForestState<f64>> {
    let mut trees = Vec::with_capacity(forest.len());
    for tree in forest.trees() {
        let cols: Vec<DVector<f64>> = (0..n).map(|_| gaussian_draw(setup, truth, rng)).collect();
        let principal = Ensemble::new(DMatrix::from_columns(&cols), tree.index().space())?;
        let mut ancillaries: BTreeMap<ModelIndex, Ensemble<f64>> = BTreeMap::new();
        for node in tree.preorder().into_iter().skip(1) {
            let path = tree.path_to(node.index()).expect("node of this tree");
            let cols: Vec<DVector<f64>> = (0..node.ancillary_size())
                .map(|_| {
                    let mut x = gaussian_draw(setup, truth, rng);
                    for p in &path[1..] {
                        x = p.theta().expect("surrogate").apply(x.as_view());
                    }
                    x
                })
                .collect();
            ancillaries.insert(
                node.index().clone(),
                Ensemble::new(DMatrix::from_columns(&cols), node.index().space())?,
            );
        }
        trees.push(TreeState::new(tree, principal, ancillaries)?);
    }
    Ok(ForestState::new(forest, trees)?)
}

/// Runs forest `forest` of `setup` with principal ensembles of `n` members
/// and inflation `alpha`. Model blow-ups and failed analyses end the run and
/// mark it diverged instead of returning an error.
pub fn run_twin_experiment(
    setup: &Setup,
    forest: usize,
    n: usize,
    alpha: f64,
    run: usize,
) -> Result<RunResult> {
    let started = Instant::now();
    let cfg = &setup.config;
    let f = &setup
        .forests
        .get(forest)
        .ok_or_else(|| HarnessError::Config(format!("no forest at position {forest}")))?
        .forest;
    let seed = run_seed(cfg.seed, n, alpha, run);
    let mut truth_rng = ChaCha8Rng::seed_from_u64(seed);
    truth_rng.set_stream(TRUTH_STREAM);
    let mut filter_rng = ChaCha8Rng::seed_from_u64(seed);
    filter_rng.set_stream(FILTER_STREAM);

    let clim = &setup.nature.climatology;
    let window = cfg.obs.window;
    let (t0, tf) = (cfg.schedule.t0, cfg.schedule.tf);
    let limit = DIVERGENCE_FACTOR * clim.spread;
    let dim = setup.nature.dim() as f64;

    let mut truth = clim.states[truth_rng.random_range(0..clim.states.len())].clone();
    let mut truths = vec![truth.clone()];
    let mut estimates = Vec::with_capacity(tf + 1);
    let mut step_errors = Vec::with_capacity(tf + 1);
    let mut hf_runs = 0usize;

    let mut state = initial_state(setup, f, n, &truth, &mut filter_rng)?;
    let first = forest_total_variate_means(f, &state)?
        .swap_remove(0)
        .into_values();
    step_errors.push((&first - &truth).norm() / dim.sqrt());
    estimates.push(first);

    let mut diverged = None;
    for t in 1..=tf {
        truth = match setup.nature.model.advance(truth.as_view(), window) {
            Ok(x) => x,
            Err(e) => {
                return Err(HarnessError::Core(mfenkf::Error::Diverged(format!(
                    "nature run at step {t}: {e}"
                ))))
            }
        };
        let y = setup.observation.observe(&truth, &mut truth_rng);
        truths.push(truth.clone());

        let step = (|| -> mfenkf::Result<(ForestState<f64>, DVector<f64>, usize)> {
            let (forecast, report) = propagate_forest(f, &state, window)?;
            let (analysis, _) =
                forest_analysis(f, &forecast, &y, &setup.observation, &mut filter_rng)?;
            let mean = forest_total_variate_means(f, &analysis)?
                .swap_remove(0)
                .into_values();
            let next = apply_heuristics(f, &analysis, alpha)?;
            Ok((next, mean, report.hf_runs))
        })();
        match step {
            Ok((next, mean, runs)) => {
                let err = (&mean - &truth).norm() / dim.sqrt();
                step_errors.push(err);
                estimates.push(mean);
                hf_runs += runs;
                state = next;
                if !(err <= limit) {
                    diverged = Some(format!("step {t}: error {err:.3e} exceeds {limit:.3e}"));
                    break;
                }
            }
            Err(e) => {
                diverged = Some(format!("step {t}: {e}"));
                break;
            }
        }
    }

    let steps = step_errors.len() - 1;
    let rmse = match diverged {
        Some(_) => None,
        None => Some(rmse(&estimates, &truths, t0, tf)?),
    };
    Ok(RunResult {
        rmse,
        diverged,
        step_errors,
        hf_runs_per_step: if steps == 0 {
            0.0
        } else {
            hf_runs as f64 / steps as f64
        },
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_ne!(run_seed(1, 5, 1.0, 0), run_seed(1, 5, 1.0, 1));
        assert_ne!(run_seed(1, 5, 1.0, 0), run_seed(1, 5, 1.05, 0));
        assert_eq!(run_seed(7, 5, 1.0, 3), run_seed(7, 5, 1.0, 3));
    }

    #[test]
    fn rmse_of_constant_offset() {
        let truths = vec![DVector::zeros(4); 6];
        let est: Vec<DVector<f64>> = (0..6).map(|t| DVector::from_element(4, t as f64)).collect();
        assert_eq!(rmse(&est, &truths, 2, 2).unwrap(), 2.0);
        let oracle = ((9.0 + 16.0 + 25.0) / 3.0f64).sqrt();
        assert!((rmse(&est, &truths, 3, 5).unwrap() - oracle).abs() < 1e-15);
        assert!(rmse(&est, &truths, 4, 6).is_err());
        assert!(rmse(&est, &truths, 4, 3).is_err());
    }
}
