//! Perturbed-observations analysis for the plain EnKF, for model trees and
//! for model forests, plus the post-analysis heuristics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::forecast::{swap_estimate, tree_total_variate, ForestState, NodeState, TreeState};
use crate::forest::{
    forest_average_cov, forest_average_mean, CovarianceBlocks, ModelForest, ModelIndex, ModelNode,
};
use crate::linalg::{cholesky_factor, spd_solve_right, SolveInfo};
use crate::operator::{map_ensemble, Operator, SharedOperator};
use crate::scalar::{real, Real};
use crate::stats::{
    anomalies_of, cross_cov_of, ensemble_mean, inflate, Ensemble, SpaceId, StateVector,
};

/// Observation operator and Gaussian observation-error model.
#[derive(Clone)]
pub struct ObservationSpec<T: Real> {
    operator: SharedOperator<T>,
    cov: DMatrix<T>,
    chol: DMatrix<T>,
}

impl<T: Real> std::fmt::Debug for ObservationSpec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObservationSpec")
            .field("input_dim", &self.operator.input_dim())
            .field("output_dim", &self.operator.output_dim())
            .finish()
    }
}

impl<T: Real> ObservationSpec<T> {
    /// Fails unless `cov` is symmetric positive definite and matches the
    /// operator's output dimension.
    pub fn new(operator: SharedOperator<T>, cov: DMatrix<T>) -> Result<Self> {
        if cov.nrows() != operator.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "observation covariance",
                expected: operator.output_dim(),
                found: cov.nrows(),
            });
        }
        let chol = cholesky_factor(&cov, "observation covariance")?;
        Ok(Self {
            operator,
            cov,
            chol,
        })
    }

    /// Independent errors of equal variance.
    pub fn diagonal(operator: SharedOperator<T>, variance: T) -> Result<Self> {
        let p = operator.output_dim();
        Self::new(operator, DMatrix::identity(p, p) * variance)
    }

    pub fn operator(&self) -> &SharedOperator<T> {
        &self.operator
    }

    pub fn cov(&self) -> &DMatrix<T> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    /// Noisy observation `H(x) + eps` of a single state.
    pub fn observe<R: Rng + ?Sized>(&self, x: &DVector<T>, rng: &mut R) -> DVector<T> {
        self.operator.apply(x.column(0)) + &self.chol * standard_normal(self.dim(), 1, rng)
    }
}

fn standard_normal<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<T> {
    // Column-major draw order.
    DMatrix::from_fn(rows, cols, |_, _| {
        real::<T>(rng.sample::<f64, _>(StandardNormal))
    })
}

/// Columns `y + eps_j` with `eps_j ~ N(0, R)` drawn from `rng`.
pub fn perturb_observations<T: Real, R: Rng + ?Sized>(
    y: &DVector<T>,
    spec: &ObservationSpec<T>,
    n: usize,
    rng: &mut R,
) -> Result<Ensemble<T>> {
    if n < 2 {
        return Err(Error::DegenerateEnsemble { members: n });
    }
    if y.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            context: "observation vector",
            expected: spec.dim(),
            found: y.len(),
        });
    }
    let mut m = &spec.chol * standard_normal::<T, R>(spec.dim(), n, rng);
    for mut c in m.column_iter_mut() {
        c += y;
    }
    Ensemble::new(m, SpaceId(u32::MAX))
}

/// Kalman gain of one model in a forest.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanGain<T: Real> {
    pub matrix: DMatrix<T>,
    pub level: ModelIndex,
}

/// Gains formed during an analysis and any regularization that was needed.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport<T: Real> {
    pub gains: Vec<KalmanGain<T>>,
    pub warnings: Vec<String>,
}

impl<T: Real> Default for AnalysisReport<T> {
    fn default() -> Self {
        Self {
            gains: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

fn gain_from<T: Real>(
    cov_xh: &DMatrix<T>,
    cov_hh: &DMatrix<T>,
    spec: &ObservationSpec<T>,
    level: &ModelIndex,
    report: &mut AnalysisReport<T>,
) -> Result<DMatrix<T>> {
    let innovation = cov_hh + &spec.cov;
    let (k, info): (DMatrix<T>, SolveInfo) = spd_solve_right(cov_xh, &innovation)?;
    if let Some(ridge) = info.ridge {
        report.warnings.push(format!(
            "innovation covariance at {level} regularized with ridge {ridge:.3e} (condition {:.3e})",
            info.condition
        ));
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Kalman gain"));
    }
    Ok(k)
}

fn update<T: Real>(
    e: &Ensemble<T>,
    k: &DMatrix<T>,
    he: &DMatrix<T>,
    y: &Ensemble<T>,
) -> Result<Ensemble<T>> {
    if he.ncols() != y.size() {
        return Err(Error::UnpairedEnsembles {
            left: he.ncols(),
            right: y.size(),
        });
    }
    let innovations = he - y.members();
    Ensemble::new(e.members() - k * innovations, e.space())
}

/// Stochastic EnKF update `X - K (H(X) - Y)` with perturbed observations
/// drawn from `rng`.
pub fn enkf_analysis<T: Real, R: Rng + ?Sized>(
    prior: &Ensemble<T>,
    y: &DVector<T>,
    spec: &ObservationSpec<T>,
    rng: &mut R,
) -> Result<(Ensemble<T>, AnalysisReport<T>)> {
    if prior.size() < 2 {
        return Err(Error::DegenerateEnsemble {
            members: prior.size(),
        });
    }
    let perturbed = perturb_observations(y, spec, prior.size(), rng)?;
    let hx = spec.operator.apply_members(prior.members());
    let cov_xh = cross_cov_of(prior.members(), &hx)?;
    let cov_hh = cross_cov_of(&hx, &hx)?;
    let mut report = AnalysisReport::default();
    let level = ModelIndex::root(1);
    let k = gain_from(&cov_xh, &cov_hh, spec, &level, &mut report)?;
    let posterior = update(prior, &k, &hx, &perturbed)?;
    report.gains.push(KalmanGain { matrix: k, level });
    Ok((posterior, report))
}

fn apply_op<T: Real>(op: &dyn Operator<T>, m: DMatrix<T>) -> DMatrix<T> {
    if op.is_identity() {
        m
    } else {
        op.apply_members(&m)
    }
}

/// Maps members living at `from` (tree `from.tree()`) into the space of `to`:
/// interpolations up to the common ancestor, a transfer when the trees
/// differ, then projections down.
fn map_between<T: Real>(
    f: &ModelForest<T>,
    from: &ModelIndex,
    to: &ModelIndex,
    m: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let same_tree = from.tree() == to.tree();
    let common = if same_tree {
        from.path()
            .iter()
            .zip(to.path())
            .take_while(|(a, b)| a == b)
            .count()
    } else {
        1
    };
    let mut out = m.clone();
    let mut cur = from.clone();
    while cur.path().len() > common {
        let node = f.node(&cur).expect("node in forest");
        out = apply_op(node.phi().expect("surrogate").as_ref(), out);
        cur = cur.parent().expect("non-root");
    }
    if !same_tree {
        if let Some(tau) = f.transfer(to.tree(), from.tree())? {
            out = apply_op(tau.as_ref(), out);
        }
    }
    let path = f.tree(to.tree()).path_to(to).expect("node in forest");
    for node in path.into_iter().skip(common) {
        out = apply_op(node.theta().expect("surrogate").as_ref(), out);
    }
    Ok(out)
}

/// Observation operator of a node: interpolations up to the root, then `H`.
fn observe_at<T: Real>(
    f: &ModelForest<T>,
    at: &ModelIndex,
    spec: &ObservationSpec<T>,
    m: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let root = ModelIndex::root(at.tree());
    let full = map_between(f, at, &root, m)?;
    if full.nrows() != spec.operator.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "observation operator input",
            expected: spec.operator.input_dim(),
            found: full.nrows(),
        });
    }
    Ok(spec.operator.apply_members(&full))
}

/// One ensemble entering a tree's total variate with a scalar coefficient.
struct Term<'a, T: Real> {
    native: ModelIndex,
    coeff: T,
    group: ModelIndex,
    members: &'a DMatrix<T>,
}

/// Expands the total variate of a tree into its constituent ensembles:
/// the principal with coefficient 1, and for a surrogate `J` with gain
/// product `p(J)` along its path, `U^J` with `+p(J)` and `Û^J` with `-p(J)`.
fn tree_terms<'a, T: Real>(
    tree: &ModelNode<T>,
    state: &'a TreeState<T>,
) -> Result<Vec<Term<'a, T>>> {
    let mut terms = vec![Term {
        native: tree.index().clone(),
        coeff: T::one(),
        group: tree.index().clone(),
        members: state.principal.members(),
    }];
    fn walk<'a, T: Real>(
        node: &ModelNode<T>,
        weight: T,
        state: &'a TreeState<T>,
        terms: &mut Vec<Term<'a, T>>,
    ) -> Result<()> {
        let siblings = node.children().len();
        for c in node.children() {
            let s = c.gain(siblings)?.fraction().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "node {} uses a matrix gain; the filter assembles total variates with scalar gains only",
                    c.index()
                ))
            })?;
            let p = weight * s;
            let ns = state.node(c.index())?;
            terms.push(Term {
                native: c.index().clone(),
                coeff: p,
                group: c.index().clone(),
                members: ns.ancillary.members(),
            });
            terms.push(Term {
                native: c.index().clone(),
                coeff: -p,
                group: node.index().clone(),
                members: ns.control.members(),
            });
            walk(c, p, state, terms)?;
        }
        Ok(())
    }
    walk(tree, T::one(), state, &mut terms)?;
    Ok(terms)
}

/// `Cov(f(Z), H(f(Z)))` and `Cov(H(f(Z)), H(f(Z)))` for the total variate of
/// one tree, with `f` the map into the space of `target`. Terms in the same
/// pairing group are combined member by member; distinct groups are
/// independent and contribute separately.
fn tree_blocks<T: Real>(
    f: &ModelForest<T>,
    terms: &[Term<'_, T>],
    target: &ModelIndex,
    spec: &ObservationSpec<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let mut factors: BTreeMap<ModelIndex, (DMatrix<T>, DMatrix<T>)> = BTreeMap::new();
    for t in terms {
        let mapped = map_between(f, &t.native, target, t.members)?;
        let observed = observe_at(f, target, spec, &mapped)?;
        let fa = anomalies_of(&mapped)? * t.coeff;
        let ga = anomalies_of(&observed)? * t.coeff;
        match factors.get_mut(&t.group) {
            Some((fs, gs)) => {
                if fs.ncols() != fa.ncols() {
                    return Err(Error::UnpairedEnsembles {
                        left: fs.ncols(),
                        right: fa.ncols(),
                    });
                }
                *fs += fa;
                *gs += ga;
            }
            None => {
                factors.insert(t.group.clone(), (fa, ga));
            }
        }
    }
    let dim = map_dim(f, target);
    let p = spec.dim();
    let mut fg = DMatrix::zeros(dim, p);
    let mut gg = DMatrix::zeros(p, p);
    // Root group first, then the others in index order.
    for (fs, gs) in factors.values() {
        fg += fs * gs.transpose();
        gg += gs * gs.transpose();
    }
    Ok((fg, gg))
}

fn map_dim<T: Real>(f: &ModelForest<T>, target: &ModelIndex) -> usize {
    f.node(target).expect("node in forest").dim()
}

/// Analysis of a single tree.
pub fn mfenkf_tree_analysis<T: Real, R: Rng + ?Sized>(
    tree: &ModelNode<T>,
    state: &TreeState<T>,
    y: &DVector<T>,
    spec: &ObservationSpec<T>,
    rng: &mut R,
) -> Result<(TreeState<T>, AnalysisReport<T>)> {
    let f = ModelForest::single(tree.clone());
    let fs = ForestState::new(&f, vec![state.clone()])?;
    let (out, report) = forest_analysis(&f, &fs, y, spec, rng)?;
    Ok((out.trees.into_iter().next().expect("one tree"), report))
}

/// Forest analysis. Each model `I` in tree `m` receives the gain
/// `K^I = Cov(f 𝒵, H^I f 𝒵) (Cov(H^I f 𝒵, H^I f 𝒵) + R)^{-1}` where `𝒵` is the
/// forest total variate in the space of tree `m`, `f` projects it into the
/// space of `I` and `H^I` is `H` after the interpolations back to the root.
/// Diagonal tree blocks come from the constituent ensembles, off-diagonal
/// blocks from the swap ensembles of the last forecast.
///
/// One perturbed-observation ensemble is drawn per pairing group: first the
/// principal group of each tree, then one per surrogate in pre-order. Every
/// ensemble of a group is updated with the same perturbations.
pub fn forest_analysis<T: Real, R: Rng + ?Sized>(
    f: &ModelForest<T>,
    state: &ForestState<T>,
    y: &DVector<T>,
    spec: &ObservationSpec<T>,
    rng: &mut R,
) -> Result<(ForestState<T>, AnalysisReport<T>)> {
    let trees = f.len();
    let terms = f
        .trees()
        .iter()
        .zip(&state.trees)
        .map(|(t, s)| tree_terms(t, s))
        .collect::<Result<Vec<_>>>()?;
    let natives = if trees > 1 {
        (1..=trees)
            .map(|m| tree_total_variate(f, state, m).map(|z| z.into_members()))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut report = AnalysisReport::default();
    let mut gains: BTreeMap<ModelIndex, DMatrix<T>> = BTreeMap::new();
    for tree in f.trees() {
        for node in tree.preorder() {
            let target = node.index();
            let mut fg_blocks = CovarianceBlocks::new();
            let mut gg_blocks = CovarianceBlocks::new();
            for a in 1..=trees {
                let (fg, gg) = tree_blocks(f, &terms[a - 1], target, spec)?;
                fg_blocks.insert((a, a), fg);
                gg_blocks.insert((a, a), gg);
            }
            for a in 1..=trees {
                for b in 1..=trees {
                    if a == b {
                        continue;
                    }
                    let swap_ab = state.swaps.get(&(a, b)).ok_or(Error::MissingBlock(a, b))?;
                    let swap_ba = state.swaps.get(&(b, a)).ok_or(Error::MissingBlock(b, a))?;
                    let ra = ModelIndex::root(a);
                    let rb = ModelIndex::root(b);
                    let fa_nat = map_between(f, &ra, target, &natives[a - 1])?;
                    let fa_swp = map_between(f, &ra, target, swap_ba.members())?;
                    let fb_nat = map_between(f, &rb, target, &natives[b - 1])?;
                    let fb_swp = map_between(f, &rb, target, swap_ab.members())?;
                    let ga_nat = observe_at(f, target, spec, &fa_nat)?;
                    let ga_swp = observe_at(f, target, spec, &fa_swp)?;
                    let gb_nat = observe_at(f, target, spec, &fb_nat)?;
                    let gb_swp = observe_at(f, target, spec, &fb_swp)?;
                    fg_blocks.insert((a, b), swap_estimate(&fa_nat, &gb_swp, &fa_swp, &gb_nat)?);
                    gg_blocks.insert((a, b), swap_estimate(&ga_nat, &gb_swp, &ga_swp, &gb_nat)?);
                }
            }
            let fg = forest_average_cov(&fg_blocks, f)?;
            let gg = forest_average_cov(&gg_blocks, f)?;
            let k = gain_from(&fg, &gg, spec, target, &mut report)?;
            gains.insert(target.clone(), k);
        }
    }

    let mut out = state.clone();
    out.swaps.clear();
    for (tree, ts) in f.trees().iter().zip(out.trees.iter_mut()) {
        let prior = ts.clone();
        let mut perturbed: BTreeMap<ModelIndex, Ensemble<T>> = BTreeMap::new();
        for node in tree.preorder() {
            let n = prior.ensemble(node.index())?.size();
            perturbed.insert(node.index().clone(), perturb_observations(y, spec, n, rng)?);
        }
        for node in tree.preorder() {
            let idx = node.index();
            let k = &gains[idx];
            let update_at = |e: &Ensemble<T>, group: &ModelIndex| -> Result<Ensemble<T>> {
                let he = observe_at(f, idx, spec, e.members())?;
                update(e, k, &he, &perturbed[group])
            };
            if idx.is_root() {
                ts.principal = update_at(&prior.principal, idx)?;
            } else {
                let ns = prior.node(idx)?;
                let ancillary = update_at(&ns.ancillary, idx)?;
                let control = update_at(&ns.control, &idx.parent().expect("non-root"))?;
                ts.nodes
                    .insert(idx.clone(), NodeState { control, ancillary });
            }
        }
    }
    for (level, matrix) in gains {
        report.gains.push(KalmanGain { matrix, level });
    }
    Ok((out, report))
}

/// Forest total-variate mean in the root space of every tree.
pub fn forest_total_variate_means<T: Real>(
    f: &ModelForest<T>,
    state: &ForestState<T>,
) -> Result<Vec<StateVector<T>>> {
    let tree_means = (1..=f.len())
        .map(|m| ensemble_mean(&tree_total_variate(f, state, m)?))
        .collect::<Result<Vec<_>>>()?;
    (1..=f.len())
        .map(|m| forest_average_mean(&tree_means, f, m))
        .collect()
}

/// Post-analysis heuristics, in order:
/// 1. recentre every principal ensemble on the forest total-variate mean in
///    its tree's space, and every ancillary ensemble on the projection of that
///    mean into its node's space;
/// 2. inflate principal anomalies by `alpha` and ancillary anomalies by each
///    node's own factor;
/// 3. discard the control ensembles and rebuild them as projections of the
///    parent ensembles.
pub fn apply_heuristics<T: Real>(
    f: &ModelForest<T>,
    state: &ForestState<T>,
    alpha: T,
) -> Result<ForestState<T>> {
    let targets = forest_total_variate_means(f, state)?;
    let mut out = state.clone();
    for ((tree, ts), target) in f.trees().iter().zip(out.trees.iter_mut()).zip(&targets) {
        let mut node_targets: BTreeMap<ModelIndex, DVector<T>> = BTreeMap::new();
        node_targets.insert(tree.index().clone(), target.values().clone());
        for node in tree.preorder().into_iter().skip(1) {
            let parent = &node_targets[&node.index().parent().expect("non-root")];
            let projected = node.theta().expect("surrogate").apply(parent.column(0));
            node_targets.insert(node.index().clone(), projected);
        }

        let recentre = |e: &Ensemble<T>, goal: &DVector<T>| -> Result<Ensemble<T>> {
            let shift = goal - ensemble_mean(e)?.values();
            e.shifted(&shift)
        };
        ts.principal = inflate(
            &recentre(&ts.principal, &node_targets[tree.index()])?,
            alpha,
        )?;
        for node in tree.preorder().into_iter().skip(1) {
            let idx = node.index();
            let ns = ts.nodes.get_mut(idx).expect("node state");
            ns.ancillary = inflate(
                &recentre(&ns.ancillary, &node_targets[idx])?,
                node.ancillary_inflation(),
            )?;
        }
        for node in tree.preorder().into_iter().skip(1) {
            let idx = node.index();
            let parent = ts.ensemble(&idx.parent().expect("non-root"))?.clone();
            let control = map_ensemble(
                node.theta().expect("surrogate").as_ref(),
                &parent,
                idx.space(),
            )?;
            ts.nodes.get_mut(idx).expect("node state").control = control;
        }
    }
    Ok(out)
}
