//! Forecast step: propagation of every constituent ensemble of a forest,
//! total-variate ensembles of subtrees, and the swap estimator of cross
//! covariances between trees.

use std::collections::BTreeMap;

use crate::control::{total_variate_ensemble, total_variate_mean, AnomalyControl, ControlPair};
use crate::error::{Error, Result};
use crate::forest::{ModelForest, ModelIndex, ModelNode};
use crate::operator::{map_ensemble, propagate_ensemble, Operator};
use crate::scalar::Real;
use crate::stats::{cross_cov_of, Ensemble};

/// Control and ancillary ensembles of a non-root node. The ancillary ensemble
/// doubles as the principal ensemble of the subtree rooted at the node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState<T: Real> {
    /// `Û`, paired member by member with the parent's ensemble.
    pub control: Ensemble<T>,
    /// `U`, independent of everything outside the node's subtree.
    pub ancillary: Ensemble<T>,
}

/// Constituent ensembles of one tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeState<T: Real> {
    pub principal: Ensemble<T>,
    pub nodes: BTreeMap<ModelIndex, NodeState<T>>,
}

impl<T: Real> TreeState<T> {
    /// Builds a tree state from the principal and one ancillary ensemble per
    /// surrogate; every control ensemble is initialized as the projection of
    /// its parent's ensemble.
    pub fn new(
        tree: &ModelNode<T>,
        principal: Ensemble<T>,
        mut ancillaries: BTreeMap<ModelIndex, Ensemble<T>>,
    ) -> Result<Self> {
        if principal.dim() != tree.dim() {
            return Err(Error::DimensionMismatch {
                context: "principal ensemble",
                expected: tree.dim(),
                found: principal.dim(),
            });
        }
        let mut state = Self {
            principal: principal.with_space(tree.index().space()),
            nodes: BTreeMap::new(),
        };
        for node in tree.preorder().into_iter().skip(1) {
            let idx = node.index();
            let anc = ancillaries.remove(idx).ok_or_else(|| {
                Error::InvalidArgument(format!("no ancillary ensemble for node {idx}"))
            })?;
            if anc.dim() != node.dim() || anc.size() != node.ancillary_size() {
                return Err(Error::InvalidArgument(format!(
                    "ancillary ensemble of node {idx} is {}x{}, expected {}x{}",
                    anc.dim(),
                    anc.size(),
                    node.dim(),
                    node.ancillary_size()
                )));
            }
            let parent = state.ensemble(&idx.parent().expect("non-root"))?;
            let control = map_ensemble(
                node.theta().expect("surrogate").as_ref(),
                parent,
                idx.space(),
            )?;
            state.nodes.insert(
                idx.clone(),
                NodeState {
                    control,
                    ancillary: anc.with_space(idx.space()),
                },
            );
        }
        if let Some(extra) = ancillaries.keys().next() {
            return Err(Error::InvalidArgument(format!(
                "ancillary ensemble for unknown node {extra}"
            )));
        }
        Ok(state)
    }

    /// Principal ensemble of the subtree rooted at `index`: the tree's
    /// principal for the root, the node's ancillary ensemble otherwise.
    pub fn ensemble(&self, index: &ModelIndex) -> Result<&Ensemble<T>> {
        if index.is_root() {
            return Ok(&self.principal);
        }
        self.nodes
            .get(index)
            .map(|n| &n.ancillary)
            .ok_or_else(|| Error::InvalidArgument(format!("no state for node {index}")))
    }

    pub fn node(&self, index: &ModelIndex) -> Result<&NodeState<T>> {
        self.nodes
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no state for node {index}")))
    }

    /// Size of the principal ensemble.
    pub fn size(&self) -> usize {
        self.principal.size()
    }
}

/// Constituent ensembles of a whole forest at one time index, together with
/// the swap ensembles produced by the last forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestState<T: Real> {
    pub step: usize,
    pub trees: Vec<TreeState<T>>,
    /// `swaps[(a, b)]`: the total-variate ensemble of tree `a`, transferred
    /// into the root space of tree `b` and advanced by that root's model.
    pub swaps: BTreeMap<(usize, usize), Ensemble<T>>,
}

impl<T: Real> ForestState<T> {
    pub fn new(f: &ModelForest<T>, trees: Vec<TreeState<T>>) -> Result<Self> {
        if trees.len() != f.len() {
            return Err(Error::DimensionMismatch {
                context: "tree states",
                expected: f.len(),
                found: trees.len(),
            });
        }
        Ok(Self {
            step: 0,
            trees,
            swaps: BTreeMap::new(),
        })
    }

    pub fn tree(&self, m: usize) -> &TreeState<T> {
        &self.trees[m - 1]
    }
}

/// Role of a propagated ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EnsembleRole {
    Principal,
    Control,
    Ancillary,
    /// Swap ensemble originating in the given tree.
    Swap(usize),
}

/// Book-keeping of one forecast.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastReport {
    /// Member propagations through root (high-fidelity) models.
    pub hf_runs: usize,
    /// Every ensemble advanced, with the node whose model advanced it.
    pub propagations: Vec<(ModelIndex, EnsembleRole, usize)>,
}

/// Total-variate ensemble of the subtree rooted at `node`: leaves return
/// their own ensemble; inner nodes combine their ensemble with the controls
/// and the children's total variates.
pub fn subtree_total_variate<T: Real>(
    node: &ModelNode<T>,
    state: &TreeState<T>,
) -> Result<Ensemble<T>> {
    let own = state.ensemble(node.index())?;
    if node.is_leaf() {
        return Ok(own.clone());
    }
    let siblings = node.children().len();
    let mut child_z = Vec::with_capacity(siblings);
    let mut gains = Vec::with_capacity(siblings);
    let mut anomaly_gains = Vec::with_capacity(siblings);
    for c in node.children() {
        child_z.push(subtree_total_variate(c, state)?);
        let g = c.gain(siblings)?;
        anomaly_gains.push(g.for_anomalies(siblings));
        gains.push(g);
    }
    let mut pairs = Vec::with_capacity(siblings);
    let mut controls = Vec::with_capacity(siblings);
    for (k, c) in node.children().iter().enumerate() {
        let ns = state.node(c.index())?;
        let phi = c.phi().expect("surrogate").as_ref();
        pairs.push(ControlPair {
            control: &ns.control,
            ancillary: &child_z[k],
            interpolation: phi,
            gain: &gains[k],
        });
        controls.push(AnomalyControl {
            control: &ns.control,
            interpolation: phi,
            gain: &anomaly_gains[k],
        });
    }
    let mean = total_variate_mean(own, &pairs)?;
    total_variate_ensemble(own, &controls, &mean)
}

/// Total-variate ensemble of tree `m`.
pub fn tree_total_variate<T: Real>(
    f: &ModelForest<T>,
    state: &ForestState<T>,
    m: usize,
) -> Result<Ensemble<T>> {
    subtree_total_variate(f.tree(m), state.tree(m))
}

/// Advances every constituent ensemble of one tree by `dt`: the principal
/// through the root model, and the control and ancillary ensembles of every
/// surrogate through that surrogate's model. Children are handled before
/// their parents.
pub fn propagate_tree<T: Real>(
    tree: &ModelNode<T>,
    state: &TreeState<T>,
    dt: T,
    report: &mut ForecastReport,
) -> Result<TreeState<T>> {
    let mut out = state.clone();
    for node in tree.postorder() {
        let idx = node.index();
        let model = node.model().as_ref();
        if idx.is_root() {
            out.principal = propagate_ensemble(model, &state.principal, dt, idx)?;
            report.hf_runs += state.principal.size();
            report.propagations.push((
                idx.clone(),
                EnsembleRole::Principal,
                state.principal.size(),
            ));
        } else {
            let ns = state.node(idx)?;
            let control = propagate_ensemble(model, &ns.control, dt, idx)?;
            let ancillary = propagate_ensemble(model, &ns.ancillary, dt, idx)?;
            report
                .propagations
                .push((idx.clone(), EnsembleRole::Control, ns.control.size()));
            report
                .propagations
                .push((idx.clone(), EnsembleRole::Ancillary, ns.ancillary.size()));
            out.nodes
                .insert(idx.clone(), NodeState { control, ancillary });
        }
    }
    Ok(out)
}

/// Forecast of the whole forest. Besides every tree's constituent ensembles,
/// the total variate of each tree is transferred into every other tree's
/// root space and advanced by that root model, giving the swap ensembles
/// consumed by [`cross_cov_swap`].
pub fn propagate_forest<T: Real>(
    f: &ModelForest<T>,
    state: &ForestState<T>,
    dt: T,
) -> Result<(ForestState<T>, ForecastReport)> {
    let mut report = ForecastReport::default();
    let m = f.len();
    let mut swaps = BTreeMap::new();
    if m > 1 {
        let zs = (1..=m)
            .map(|a| tree_total_variate(f, state, a))
            .collect::<Result<Vec<_>>>()?;
        for a in 1..=m {
            for b in 1..=m {
                if a == b {
                    continue;
                }
                let root = f.tree(b);
                let tau = f.transfer(b, a)?.expect("distinct trees");
                let moved = map_ensemble(tau.as_ref(), &zs[a - 1], root.index().space())?;
                let advanced = propagate_ensemble(root.model().as_ref(), &moved, dt, root.index())?;
                report.hf_runs += moved.size();
                report.propagations.push((
                    root.index().clone(),
                    EnsembleRole::Swap(a),
                    moved.size(),
                ));
                swaps.insert((a, b), advanced);
            }
        }
    }
    let trees = f
        .trees()
        .iter()
        .zip(&state.trees)
        .map(|(t, s)| propagate_tree(t, s, dt, &mut report))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        ForestState {
            step: state.step + 1,
            trees,
            swaps,
        },
        report,
    ))
}

/// Symmetric swap estimate of `Cov(A, tau_ab(B))` for two ensembles that
/// cannot be paired member by member:
/// `½ [Cov(z_a, tau_ab(prop_ba)) + Cov(prop_ab, tau_ab(z_b))]`, where
/// `prop_ab` is model A applied to the transferred members of `z_b` and
/// `prop_ba` model B applied to the transferred members of `z_a`.
/// `tau_ab` maps B's space into A's; `None` is the identity.
pub fn cross_cov_swap<T: Real>(
    z_a: &Ensemble<T>,
    z_b: &Ensemble<T>,
    prop_ab: &Ensemble<T>,
    prop_ba: &Ensemble<T>,
    tau_ab: Option<&dyn Operator<T>>,
) -> Result<nalgebra::DMatrix<T>> {
    let to_a = |e: &Ensemble<T>| match tau_ab {
        None => e.members().clone(),
        Some(t) => t.apply_members(e.members()),
    };
    swap_estimate(z_a.members(), &to_a(prop_ba), prop_ab.members(), &to_a(z_b))
}

/// `½ [Cov(a_native, b_swapped) + Cov(a_swapped, b_native)]`.
pub(crate) fn swap_estimate<T: Real>(
    a_native: &nalgebra::DMatrix<T>,
    b_swapped: &nalgebra::DMatrix<T>,
    a_swapped: &nalgebra::DMatrix<T>,
    b_native: &nalgebra::DMatrix<T>,
) -> Result<nalgebra::DMatrix<T>> {
    let half = T::one() / (T::one() + T::one());
    Ok((cross_cov_of(a_native, b_swapped)? + cross_cov_of(a_swapped, b_native)?) * half)
}
