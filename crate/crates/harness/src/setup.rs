//! Turns an [`ExperimentConfig`] into models, forests and an observation
//! network.

use std::collections::BTreeMap;
use std::sync::Arc;

use mfenkf::models::io::{read_basis, read_snapshots};
use mfenkf::models::observe::{lattice_indices, Selection};
use mfenkf::models::pod::{pod_modes, PodBasis, PodRom, SnapshotSet};
use mfenkf::models::qg::{Qg, QgConfig};
use mfenkf::models::Lorenz96;
use mfenkf::operator::Identity;
use mfenkf::{
    GainSpec, ModelForest, ModelIndex, ModelNode, ObservationSpec, SharedModel, SharedOperator,
};
use nalgebra::{DMatrix, DVector};

use crate::config::{
    ExperimentConfig, ModelSpec, PodSource, SurrogateConfig, SurrogateSpec, TreeConfig,
};
use crate::error::{HarnessError, Result};

/// Windows between recorded climatology states.
pub const CLIMATOLOGY_STRIDE: usize = 5;

fn config_err(m: impl Into<String>) -> HarnessError {
    HarnessError::Config(m.into())
}

/// QG configuration of a model spec, with the grid defaulting to `grid`.
pub fn qg_config(spec: &ModelSpec, grid: (usize, usize)) -> Option<QgConfig> {
    match spec {
        ModelSpec::Qg {
            reynolds,
            nx,
            ny,
            substeps,
        } => {
            let mut c = QgConfig::new(nx.unwrap_or(grid.0), ny.unwrap_or(grid.1), *reynolds);
            if let Some(s) = substeps {
                c.substeps = *s;
            }
            Some(c)
        }
        ModelSpec::Lorenz96 { .. } => None,
    }
}

/// Instantiates a model; QG grids default to `grid`.
pub fn build_model(
    spec: &ModelSpec,
    grid: (usize, usize),
) -> Result<(SharedModel<f64>, Option<QgConfig>)> {
    match spec {
        ModelSpec::Qg { .. } => {
            let cfg = qg_config(spec, grid).expect("qg spec");
            Ok((Arc::new(Qg::new(cfg.clone())?), Some(cfg)))
        }
        ModelSpec::Lorenz96 { dim, forcing, step } => {
            Ok((Arc::new(Lorenz96::new(*dim, *forcing, *step)?), None))
        }
    }
}

/// Deterministic starting point of a free run.
fn rest_state(spec: &ModelSpec, dim: usize) -> DVector<f64> {
    match spec {
        ModelSpec::Qg { .. } => DVector::zeros(dim),
        ModelSpec::Lorenz96 { forcing, .. } => {
            let mut x = DVector::from_element(dim, *forcing);
            x[dim / 2] += 0.01;
            x
        }
    }
}

/// Free-run statistics of the nature model.
#[derive(Debug, Clone)]
pub struct Climatology {
    pub states: Vec<DVector<f64>>,
    pub mean: DVector<f64>,
    /// Anomalies scaled by `1 / sqrt(M - 1)`, so `A Aᵀ` is the sample
    /// covariance.
    pub scaled_anomalies: DMatrix<f64>,
    /// Root of the mean variance over state entries.
    pub spread: f64,
}

impl Climatology {
    pub fn from_states(states: Vec<DVector<f64>>) -> Self {
        let m = states.len();
        let x = DMatrix::from_columns(&states);
        let mean = x.column_mean();
        let mut a = x;
        for mut c in a.column_iter_mut() {
            c -= &mean;
        }
        a /= ((m - 1) as f64).sqrt();
        let spread = (a.norm_squared() / a.nrows() as f64).sqrt();
        Self {
            states,
            mean,
            scaled_anomalies: a,
            spread,
        }
    }
}

pub struct Nature {
    pub spec: ModelSpec,
    pub model: SharedModel<f64>,
    pub qg: Option<QgConfig>,
    pub climatology: Climatology,
}

impl Nature {
    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.qg.as_ref().map(|c| (c.nx, c.ny)).unwrap_or((31, 63))
    }

    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let (model, qg) = build_model(&cfg.nature, (31, 63))?;
        let window = cfg.obs.window;
        let mut x = rest_state(&cfg.nature, model.dim());
        let advance = |x: &DVector<f64>| {
            model.advance(x.as_view(), window).map_err(|e| {
                HarnessError::Core(mfenkf::Error::Diverged(format!("nature free run: {e}")))
            })
        };
        for _ in 0..cfg.schedule.nature_spinup {
            x = advance(&x)?;
        }
        let mut states = Vec::with_capacity(cfg.schedule.climatology);
        for _ in 0..cfg.schedule.climatology {
            for _ in 0..CLIMATOLOGY_STRIDE {
                x = advance(&x)?;
            }
            states.push(x.clone());
        }
        Ok(Self {
            spec: cfg.nature.clone(),
            model,
            qg,
            climatology: Climatology::from_states(states),
        })
    }
}

/// Nature-like QG trajectory: `spinup` windows from rest, then `count`
/// snapshots `spacing` windows apart.
pub fn generate_snapshots(
    cfg: &QgConfig,
    window: f64,
    spinup: usize,
    count: usize,
    spacing: usize,
) -> Result<SnapshotSet> {
    let qg = Qg::new(cfg.clone())?;
    let mut psi = DVector::zeros(cfg.dim());
    for _ in 0..spinup {
        psi = qg.step(psi.as_view(), window)?;
    }
    let mut cols = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..spacing.max(1) {
            psi = qg.step(psi.as_view(), window)?;
        }
        cols.push(psi.clone());
    }
    if cols.is_empty() {
        return Err(config_err("snapshot count must be positive"));
    }
    Ok(SnapshotSet::new(
        DMatrix::from_columns(&cols),
        Some(window * spacing.max(1) as f64),
    ))
}

/// Builds POD bases on demand, sharing snapshots and bases between forests.
struct PodFactory<'a> {
    source: &'a PodSource,
    window: f64,
    snapshots: BTreeMap<(usize, usize), Arc<SnapshotSet>>,
    bases: BTreeMap<String, Arc<PodBasis>>,
}

impl PodFactory<'_> {
    fn snapshots(&mut self, grid: (usize, usize), substeps: usize) -> Result<Arc<SnapshotSet>> {
        if let Some(s) = self.snapshots.get(&grid) {
            return Ok(s.clone());
        }
        let s = match &self.source.snapshots {
            Some(path) => read_snapshots(path)?,
            None => {
                let cfg = QgConfig {
                    substeps,
                    ..QgConfig::new(grid.0, grid.1, self.source.reynolds)
                };
                generate_snapshots(
                    &cfg,
                    self.window,
                    self.source.spinup,
                    self.source.count,
                    self.source.spacing,
                )?
            }
        };
        if s.dim() != grid.0 * grid.1 {
            return Err(config_err(format!(
                "snapshots have {} rows, the {}x{} grid needs {}",
                s.dim(),
                grid.0,
                grid.1,
                grid.0 * grid.1
            )));
        }
        let s = Arc::new(s);
        self.snapshots.insert(grid, s.clone());
        Ok(s)
    }

    fn basis(&mut self, spec: &SurrogateSpec, parent: &QgConfig) -> Result<Arc<PodBasis>> {
        let SurrogateSpec::Pod {
            rank,
            center,
            reynolds,
            basis,
        } = spec
        else {
            unreachable!("called for POD surrogates only")
        };
        let key = format!(
            "{rank}/{center}/{reynolds}/{}x{}/{:?}",
            parent.nx, parent.ny, basis
        );
        if let Some(b) = self.bases.get(&key) {
            return Ok(b.clone());
        }
        let galerkin = QgConfig {
            reynolds: *reynolds,
            ..parent.clone()
        };
        let (phi, shift) = match basis {
            Some(path) => {
                let m = read_basis(path)?;
                if m.phi.ncols() != *rank {
                    return Err(config_err(format!(
                        "basis {} holds {} modes, config asks for {rank}",
                        path.display(),
                        m.phi.ncols()
                    )));
                }
                (m.phi, m.shift)
            }
            None => {
                let snaps = self.snapshots((parent.nx, parent.ny), parent.substeps)?;
                let m = pod_modes(&snaps.data, *rank, *center)?;
                (m.phi, m.shift)
            }
        };
        let b = Arc::new(PodBasis::galerkin(phi, shift, &galerkin)?);
        self.bases.insert(key, b.clone());
        Ok(b)
    }
}

struct Parent {
    dim: usize,
    qg: Option<QgConfig>,
    grid: (usize, usize),
}

fn build_surrogate(
    s: &SurrogateConfig,
    parent: &Parent,
    pods: &mut PodFactory<'_>,
) -> Result<ModelNode<f64>> {
    let (model, theta, phi, here): (
        SharedModel<f64>,
        SharedOperator<f64>,
        SharedOperator<f64>,
        Parent,
    ) = match &s.model {
        SurrogateSpec::Pod { .. } => {
            let qg = parent
                .qg
                .as_ref()
                .ok_or_else(|| config_err("a POD surrogate needs a QG parent"))?;
            let basis = pods.basis(&s.model, qg)?;
            let rom = PodRom::new(basis.clone(), qg.substeps)?;
            let here = Parent {
                dim: basis.rank(),
                qg: None,
                grid: parent.grid,
            };
            (Arc::new(rom), basis.theta(), basis.phi_operator(), here)
        }
        SurrogateSpec::SameSpace { model } => {
            let (m, qg) = build_model(model, parent.grid)?;
            if m.dim() != parent.dim {
                return Err(config_err(format!(
                    "same-space surrogate has dimension {}, its parent {}",
                    m.dim(),
                    parent.dim
                )));
            }
            let id: SharedOperator<f64> = Arc::new(Identity { dim: parent.dim });
            let here = Parent {
                dim: parent.dim,
                qg,
                grid: parent.grid,
            };
            (m, id.clone(), id, here)
        }
    };
    let mut node =
        ModelNode::surrogate(model, theta, phi, s.ensemble).with_ancillary_inflation(s.inflation);
    if let Some(g) = s.gain {
        node = node.with_gain(GainSpec::FixedFraction(g));
    }
    for c in &s.surrogates {
        node = node.with_child(build_surrogate(c, &here, pods)?);
    }
    Ok(node)
}

fn build_tree(
    m: usize,
    t: &TreeConfig,
    grid: (usize, usize),
    pods: &mut PodFactory<'_>,
) -> Result<ModelNode<f64>> {
    let (model, qg) = build_model(&t.model, grid)?;
    let here = Parent {
        dim: model.dim(),
        qg,
        grid,
    };
    let mut node = ModelNode::root(m, model);
    for s in &t.surrogates {
        node = node.with_child(build_surrogate(s, &here, pods)?);
    }
    Ok(node)
}

pub struct BuiltForest {
    pub id: String,
    pub forest: ModelForest<f64>,
}

/// Everything a twin experiment needs, built once and shared by all runs.
pub struct Setup {
    pub config: ExperimentConfig,
    pub nature: Nature,
    pub observation: ObservationSpec<f64>,
    pub forests: Vec<BuiltForest>,
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let nature = Nature::build(cfg)?;
        let n = nature.dim();
        let indices = match (cfg.obs.lattice, &nature.qg) {
            (Some([cx, cy]), Some(q)) => {
                if cx * cy != cfg.obs.count {
                    return Err(config_err(format!(
                        "a {cx}x{cy} lattice has {} points, obs.count is {}",
                        cx * cy,
                        cfg.obs.count
                    )));
                }
                lattice_indices(q.nx, q.ny, cx, cy).map_err(|e| config_err(e.to_string()))?
            }
            (Some(_), None) => return Err(config_err("obs.lattice needs a QG nature model")),
            (None, _) => mfenkf::models::observation_indices(n, cfg.obs.count)
                .map_err(|e| config_err(e.to_string()))?,
        };
        let h: SharedOperator<f64> = Arc::new(Selection::new(n, indices)?);
        let observation = ObservationSpec::diagonal(h, cfg.obs.variance)?;

        let mut pods = PodFactory {
            source: &cfg.pod,
            window: cfg.obs.window,
            snapshots: BTreeMap::new(),
            bases: BTreeMap::new(),
        };
        let grid = nature.grid();
        let mut forests = Vec::new();
        for fc in &cfg.forests {
            let trees = fc
                .trees
                .iter()
                .enumerate()
                .map(|(i, t)| build_tree(i + 1, t, grid, &mut pods))
                .collect::<Result<Vec<_>>>()?;
            for t in &trees {
                if t.dim() != n {
                    return Err(config_err(format!(
                        "forest {}: root model has dimension {}, nature {n}",
                        fc.id,
                        t.dim()
                    )));
                }
            }
            let count = trees.len();
            let mut forest = ModelForest::new(trees)?;
            if fc.trees[0].weight.is_some() {
                let w = fc
                    .trees
                    .iter()
                    .map(|t| t.weight.expect("validated"))
                    .collect();
                forest = forest
                    .with_weights(w)
                    .map_err(|e| config_err(format!("forest {}: {e}", fc.id)))?;
            }
            for a in 1..=count {
                for b in 1..=count {
                    if a != b {
                        forest = forest.with_transfer(a, b, Arc::new(Identity { dim: n }));
                    }
                }
            }
            forests.push(BuiltForest {
                id: fc.id.clone(),
                forest,
            });
        }
        Ok(Self {
            config: cfg.clone(),
            nature,
            observation,
            forests,
        })
    }

    /// Sample states of every node: climatology states pushed down the
    /// projection chain.
    pub fn probes(
        &self,
        forest: &ModelForest<f64>,
        count: usize,
    ) -> BTreeMap<ModelIndex, Vec<DVector<f64>>> {
        let roots: Vec<DVector<f64>> = self
            .nature
            .climatology
            .states
            .iter()
            .take(count)
            .cloned()
            .collect();
        let mut out = BTreeMap::new();
        for tree in forest.trees() {
            out.insert(tree.index().clone(), roots.clone());
            for node in tree.preorder().into_iter().skip(1) {
                let parent = &out[&node.index().parent().expect("non-root")];
                let theta = node.theta().expect("surrogate");
                let mapped: Vec<DVector<f64>> =
                    parent.iter().map(|x| theta.apply(x.as_view())).collect();
                out.insert(node.index().clone(), mapped);
            }
        }
        out
    }
}
