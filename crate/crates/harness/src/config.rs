//! Declarative experiment description, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// A complete twin experiment: nature run, observation network, schedule,
/// sweep grid and the forests to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed; every run derives its own seed from it.
    pub seed: u64,
    #[serde(default = "one")]
    pub runs: usize,
    /// CSV destination, relative to the config file unless absolute.
    pub output: PathBuf,
    /// Fill the `wall_seconds` column. Off by default because timings make
    /// the output depend on the machine.
    #[serde(default)]
    pub record_wall_time: bool,
    pub nature: ModelSpec,
    pub obs: ObsConfig,
    pub schedule: Schedule,
    #[serde(default)]
    pub init: InitConfig,
    pub sweep: Sweep,
    /// Training data for POD surrogates.
    #[serde(default)]
    pub pod: PodSource,
    #[serde(rename = "forest")]
    pub forests: Vec<ForestConfig>,
}

fn one() -> usize {
    1
}

/// A dynamical model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Quasi-geostrophic double gyre. The grid defaults to the nature grid
    /// (31 x 63 for the nature run itself).
    Qg {
        reynolds: f64,
        #[serde(default)]
        nx: Option<usize>,
        #[serde(default)]
        ny: Option<usize>,
        /// RK4 steps per window; the default scales with the grid.
        #[serde(default)]
        substeps: Option<usize>,
    },
    Lorenz96 {
        #[serde(default = "l96_dim")]
        dim: usize,
        #[serde(default = "l96_forcing")]
        forcing: f64,
        #[serde(default = "l96_step")]
        step: f64,
    },
}

fn l96_dim() -> usize {
    40
}
fn l96_forcing() -> f64 {
    8.0
}
fn l96_step() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsConfig {
    pub count: usize,
    /// Observation error variance; the error covariance is `variance * I`.
    #[serde(default = "unit")]
    pub variance: f64,
    /// Model time between observations.
    pub window: f64,
    /// Observe a `[cx, cy]` sub-lattice of a QG grid instead of a uniform
    /// stride through the flattened state.
    #[serde(default)]
    pub lattice: Option<[usize; 2]>,
}

fn unit() -> f64 {
    1.0
}

/// Step numbering: step 0 is the initial ensemble; analyses happen at steps
/// `1..=tf`; the error metric covers `t0..=tf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    /// Analysis steps treated as filter spin-up; the metric starts after
    /// them.
    pub spinup: usize,
    pub t0: usize,
    pub tf: usize,
    /// Free-run windows bringing the nature model onto its attractor.
    #[serde(default = "nature_spinup")]
    pub nature_spinup: usize,
    /// Windows of free run recorded as climatology after the spin-up.
    #[serde(default = "climatology")]
    pub climatology: usize,
}

fn nature_spinup() -> usize {
    500
}
fn climatology() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    /// Scale of the climatological covariance used for initial draws.
    #[serde(default = "unit")]
    pub spread: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { spread: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub n: Vec<usize>,
    /// Explicit inflation factors. Mutually exclusive with `alpha_range`.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha_range: Option<AlphaRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaRange {
    pub start: f64,
    pub stop: f64,
    #[serde(default = "alpha_count")]
    pub count: usize,
}

fn alpha_count() -> usize {
    11
}

impl Sweep {
    /// Inflation values in sweep order.
    pub fn alphas(&self) -> Vec<f64> {
        match (&self.alpha, &self.alpha_range) {
            (Some(a), _) => a.clone(),
            (None, Some(r)) if r.count == 1 => vec![r.start],
            (None, Some(r)) => (0..r.count)
                .map(|k| r.start + (r.stop - r.start) * k as f64 / (r.count - 1) as f64)
                .collect(),
            (None, None) => Vec::new(),
        }
    }
}

/// Where POD surrogates get their snapshots. Without a file, a nature-like
/// QG trajectory is generated from rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodSource {
    #[serde(default)]
    pub snapshots: Option<PathBuf>,
    #[serde(default = "pod_reynolds")]
    pub reynolds: f64,
    #[serde(default = "pod_count")]
    pub count: usize,
    /// Windows between snapshots.
    #[serde(default = "pod_spacing")]
    pub spacing: usize,
    /// Windows discarded before the first snapshot.
    #[serde(default = "nature_spinup")]
    pub spinup: usize,
}

fn pod_reynolds() -> f64 {
    450.0
}
fn pod_count() -> usize {
    400
}
fn pod_spacing() -> usize {
    10
}

impl Default for PodSource {
    fn default() -> Self {
        Self {
            snapshots: None,
            reynolds: pod_reynolds(),
            count: pod_count(),
            spacing: pod_spacing(),
            spinup: nature_spinup(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestConfig {
    pub id: String,
    #[serde(rename = "tree")]
    pub trees: Vec<TreeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeConfig {
    pub model: ModelSpec,
    /// Forest weight; uniform when omitted on every tree.
    #[serde(default)]
    pub weight: Option<f64>,
    #[serde(default, rename = "surrogate")]
    pub surrogates: Vec<SurrogateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub model: SurrogateSpec,
    /// Ancillary ensemble size.
    pub ensemble: usize,
    #[serde(default = "unit")]
    pub inflation: f64,
    /// Scalar control-variate gain; `1 / (M + 1)` for `M` siblings when
    /// omitted.
    #[serde(default)]
    pub gain: Option<f64>,
    #[serde(default, rename = "surrogate")]
    pub surrogates: Vec<SurrogateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SurrogateSpec {
    /// POD reduced model of a QG parent. Galerkin tensors use `reynolds`.
    Pod {
        #[serde(default = "pod_rank")]
        rank: usize,
        #[serde(default)]
        center: bool,
        #[serde(default = "pod_reynolds")]
        reynolds: f64,
        /// Precomputed basis file; built from the snapshot source otherwise.
        #[serde(default)]
        basis: Option<PathBuf>,
    },
    /// A model on the parent's own space, tied to it by identity maps.
    SameSpace { model: ModelSpec },
}

fn pod_rank() -> usize {
    25
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        if let Some(p) = self.pod.snapshots.as_mut() {
            fix(p);
        }
        fn walk(s: &mut SurrogateConfig, fix: &dyn Fn(&mut PathBuf)) {
            if let SurrogateSpec::Pod { basis: Some(p), .. } = &mut s.model {
                fix(p);
            }
            for c in &mut s.surrogates {
                walk(c, fix);
            }
        }
        for f in &mut self.forests {
            for t in &mut f.trees {
                for s in &mut t.surrogates {
                    walk(s, &fix);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let s = &self.schedule;
        if !(s.spinup < s.t0 && s.t0 <= s.tf) {
            return bad(format!(
                "schedule needs spinup < t0 <= tf, got {} / {} / {}",
                s.spinup, s.t0, s.tf
            ));
        }
        if s.climatology < 2 {
            return bad("climatology needs at least two windows".into());
        }
        if self.runs == 0 {
            return bad("runs must be at least 1".into());
        }
        if self.sweep.n.is_empty() {
            return bad("sweep.n is empty".into());
        }
        if self.sweep.n.iter().any(|&n| n < 2) {
            return bad("ensemble sizes must be at least 2".into());
        }
        if self.sweep.alpha.is_some() && self.sweep.alpha_range.is_some() {
            return bad("give either sweep.alpha or sweep.alpha_range, not both".into());
        }
        if let Some(r) = &self.sweep.alpha_range {
            if r.count == 0 {
                return bad("sweep.alpha_range.count must be positive".into());
            }
        }
        let alphas = self.sweep.alphas();
        if alphas.is_empty() {
            return bad("no inflation values: set sweep.alpha or sweep.alpha_range".into());
        }
        if alphas.iter().any(|a| !(*a >= 1.0)) {
            return bad("inflation factors must be at least 1".into());
        }
        if !(self.obs.window > 0.0) || !(self.obs.variance > 0.0) {
            return bad("observation window and variance must be positive".into());
        }
        if self.obs.count == 0 {
            return bad("observation count must be positive".into());
        }
        if !(self.init.spread > 0.0) {
            return bad("init.spread must be positive".into());
        }
        if self.forests.is_empty() {
            return bad("no forests configured".into());
        }
        let mut ids: Vec<&str> = self.forests.iter().map(|f| f.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("forest ids must be unique".into());
        }
        for f in &self.forests {
            if f.trees.is_empty() {
                return bad(format!("forest {} has no trees", f.id));
            }
            let given = f.trees.iter().filter(|t| t.weight.is_some()).count();
            if given != 0 && given != f.trees.len() {
                return bad(format!(
                    "forest {}: give a weight for every tree or for none",
                    f.id
                ));
            }
            fn check(s: &SurrogateConfig, id: &str) -> Result<()> {
                if s.ensemble < 2 {
                    return Err(HarnessError::Config(format!(
                        "forest {id}: surrogate ensembles need at least 2 members"
                    )));
                }
                if !(s.inflation >= 1.0) {
                    return Err(HarnessError::Config(format!(
                        "forest {id}: surrogate inflation must be at least 1"
                    )));
                }
                s.surrogates.iter().try_for_each(|c| check(c, id))
            }
            for t in &f.trees {
                t.surrogates.iter().try_for_each(|s| check(s, &f.id))?;
            }
        }
        Ok(())
    }
}
