//! Model trees and forests: indexing, operator registration, weighted
//! averaging across trees and structural validation.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::control::GainSpec;
use crate::error::{Error, Result};
use crate::operator::{SharedModel, SharedOperator};
use crate::scalar::{count, to_f64, Real};
use crate::stats::{SpaceId, StateVector};

/// Position of a model inside a forest: `(m)` is the root of tree `m`,
/// `(m, k)` its `k`-th surrogate, `(m, k, j)` a surrogate of that surrogate.
/// Entries are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModelIndex(Vec<usize>);

impl ModelIndex {
    pub fn root(tree: usize) -> Self {
        assert!(tree >= 1, "tree ids are 1-based");
        Self(vec![tree])
    }

    pub fn from_path(path: &[usize]) -> Result<Self> {
        if path.is_empty() || path.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "model index {path:?} must be non-empty with positive entries"
            )));
        }
        Ok(Self(path.to_vec()))
    }

    pub fn path(&self) -> &[usize] {
        &self.0
    }

    pub fn tree(&self) -> usize {
        self.0[0]
    }

    pub fn depth(&self) -> usize {
        self.0.len() - 1
    }

    pub fn is_root(&self) -> bool {
        self.0.len() == 1
    }

    pub fn child(&self, k: usize) -> Self {
        assert!(k >= 1, "child positions are 1-based");
        let mut p = self.0.clone();
        p.push(k);
        Self(p)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.is_root() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// Space identifier of the model at this index.
    pub fn space(&self) -> SpaceId {
        let mut h: u32 = 0;
        for p in &self.0 {
            h = h.wrapping_mul(257).wrapping_add(*p as u32);
        }
        SpaceId(h)
    }

    /// Whether `self` lies in the subtree rooted at `other` (inclusive).
    pub fn descends_from(&self, other: &ModelIndex) -> bool {
        self.0.len() >= other.0.len() && self.0[..other.0.len()] == other.0[..]
    }
}

impl fmt::Display for ModelIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, ")")
    }
}

/// A model together with the operators tying it to its parent.
#[derive(Clone)]
pub struct ModelNode<T: Real> {
    index: ModelIndex,
    model: SharedModel<T>,
    theta: Option<SharedOperator<T>>,
    phi: Option<SharedOperator<T>>,
    children: Vec<ModelNode<T>>,
    gain: Option<GainSpec<T>>,
    ancillary_size: usize,
    ancillary_inflation: T,
}

impl<T: Real> fmt::Debug for ModelNode<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelNode")
            .field("index", &self.index)
            .field("dim", &self.model.dim())
            .field("children", &self.children)
            .field("ancillary_size", &self.ancillary_size)
            .finish()
    }
}

impl<T: Real> ModelNode<T> {
    /// Root of tree `tree` (1-based).
    pub fn root(tree: usize, model: SharedModel<T>) -> Self {
        Self {
            index: ModelIndex::root(tree),
            model,
            theta: None,
            phi: None,
            children: Vec::new(),
            gain: None,
            ancillary_size: 0,
            ancillary_inflation: T::one(),
        }
    }

    /// A surrogate with projection `theta` (parent space to this space),
    /// interpolation `phi` (back to the parent space) and its own
    /// ancillary ensemble size. Its index is assigned when it is attached.
    pub fn surrogate(
        model: SharedModel<T>,
        theta: SharedOperator<T>,
        phi: SharedOperator<T>,
        ancillary_size: usize,
    ) -> Self {
        Self {
            index: ModelIndex::root(1),
            model,
            theta: Some(theta),
            phi: Some(phi),
            children: Vec::new(),
            gain: None,
            ancillary_size,
            ancillary_inflation: T::one(),
        }
    }

    /// Overrides the default gain `1 / (M + 1)`.
    pub fn with_gain(mut self, gain: GainSpec<T>) -> Self {
        self.gain = Some(gain);
        self
    }

    pub fn with_ancillary_inflation(mut self, alpha: T) -> Self {
        self.ancillary_inflation = alpha;
        self
    }

    /// Attaches `child` as the next surrogate of this node.
    pub fn with_child(mut self, mut child: ModelNode<T>) -> Self {
        child.reindex(self.index.child(self.children.len() + 1));
        self.children.push(child);
        self
    }

    fn reindex(&mut self, index: ModelIndex) {
        for (k, c) in self.children.iter_mut().enumerate() {
            c.reindex(index.child(k + 1));
        }
        self.index = index;
    }

    pub fn index(&self) -> &ModelIndex {
        &self.index
    }

    pub fn model(&self) -> &SharedModel<T> {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn theta(&self) -> Option<&SharedOperator<T>> {
        self.theta.as_ref()
    }

    pub fn phi(&self) -> Option<&SharedOperator<T>> {
        self.phi.as_ref()
    }

    pub fn children(&self) -> &[ModelNode<T>] {
        &self.children
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn ancillary_size(&self) -> usize {
        self.ancillary_size
    }

    pub fn ancillary_inflation(&self) -> T {
        self.ancillary_inflation
    }

    /// Gain weighting this node's correction inside its parent's total
    /// variate, given the number of siblings (including itself).
    pub fn gain(&self, siblings: usize) -> Result<GainSpec<T>> {
        match &self.gain {
            Some(g) => Ok(g.clone()),
            None => crate::control::fixed_fraction_gain(siblings),
        }
    }

    pub fn explicit_gain(&self) -> Option<&GainSpec<T>> {
        self.gain.as_ref()
    }

    /// Pre-order traversal: the node, then each child subtree by ascending
    /// position.
    pub fn preorder(&self) -> Vec<&ModelNode<T>> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.preorder());
        }
        out
    }

    /// Post-order traversal: child subtrees by ascending position, then the
    /// node itself.
    pub fn postorder(&self) -> Vec<&ModelNode<T>> {
        let mut out = Vec::new();
        for c in &self.children {
            out.extend(c.postorder());
        }
        out.push(self);
        out
    }

    pub fn find(&self, index: &ModelIndex) -> Option<&ModelNode<T>> {
        if &self.index == index {
            return Some(self);
        }
        if !index.descends_from(&self.index) {
            return None;
        }
        let k = index.path()[self.index.path().len()];
        self.children.get(k - 1)?.find(index)
    }

    /// Nodes from this node down to `index`, both inclusive.
    pub fn path_to(&self, index: &ModelIndex) -> Option<Vec<&ModelNode<T>>> {
        if &self.index == index {
            return Some(vec![self]);
        }
        if !index.descends_from(&self.index) {
            return None;
        }
        let k = index.path()[self.index.path().len()];
        let mut rest = self.children.get(k - 1)?.path_to(index)?;
        rest.insert(0, self);
        Some(rest)
    }
}

/// Weighted collection of model trees with transfer operators between the
/// spaces of their roots.
#[derive(Clone)]
pub struct ModelForest<T: Real> {
    trees: Vec<ModelNode<T>>,
    weights: Vec<T>,
    transfers: BTreeMap<(usize, usize), SharedOperator<T>>,
}

impl<T: Real> fmt::Debug for ModelForest<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelForest")
            .field("trees", &self.trees)
            .field(
                "weights",
                &self.weights.iter().map(|w| to_f64(*w)).collect::<Vec<_>>(),
            )
            .field("transfers", &self.transfers.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl<T: Real> ModelForest<T> {
    /// Forest with uniform weights. Trees are renumbered `1..=M` in order.
    pub fn new(trees: Vec<ModelNode<T>>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidArgument(
                "a forest needs at least one tree".into(),
            ));
        }
        let m = trees.len();
        let trees = trees
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| {
                t.reindex(ModelIndex::root(i + 1));
                t
            })
            .collect();
        Ok(Self {
            trees,
            weights: vec![T::one() / count::<T>(m); m],
            transfers: BTreeMap::new(),
        })
    }

    /// Single-tree forest.
    pub fn single(tree: ModelNode<T>) -> Self {
        Self::new(vec![tree]).expect("one tree")
    }

    pub fn with_weights(mut self, weights: Vec<T>) -> Result<Self> {
        if weights.len() != self.trees.len() {
            return Err(Error::DimensionMismatch {
                context: "forest weights",
                expected: self.trees.len(),
                found: weights.len(),
            });
        }
        self.weights = weights;
        Ok(self)
    }

    /// Registers `tau(m, m')`, mapping the root space of tree `m'` into the
    /// root space of tree `m`.
    pub fn with_transfer(mut self, m: usize, m_from: usize, tau: SharedOperator<T>) -> Self {
        self.transfers.insert((m, m_from), tau);
        self
    }

    pub fn trees(&self) -> &[ModelNode<T>] {
        &self.trees
    }

    pub fn tree(&self, m: usize) -> &ModelNode<T> {
        &self.trees[m - 1]
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weight(&self, m: usize) -> T {
        self.weights[m - 1]
    }

    /// `tau(m, m')`, or `None` for the identity `tau(m, m)`.
    pub fn transfer(&self, m: usize, m_from: usize) -> Result<Option<&SharedOperator<T>>> {
        if m == m_from {
            return Ok(None);
        }
        self.transfers
            .get(&(m, m_from))
            .map(Some)
            .ok_or(Error::MissingTransfer(m, m_from))
    }

    pub fn node(&self, index: &ModelIndex) -> Option<&ModelNode<T>> {
        self.trees.get(index.tree().checked_sub(1)?)?.find(index)
    }

    /// Every node of every tree, trees in order, each tree in pre-order.
    pub fn nodes(&self) -> Vec<&ModelNode<T>> {
        self.trees.iter().flat_map(|t| t.preorder()).collect()
    }
}

/// Diagnostics gathered by [`validate_forest`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    /// Largest relative `||theta(phi(u)) - u|| / ||u||` over the probes of each
    /// non-root node.
    pub consistency: Vec<(ModelIndex, f64)>,
    /// `|sum w - 1|`.
    pub weight_residual: f64,
    /// Largest relative deviation of `tau(m, m') ∘ tau(m', m)` from the
    /// identity on the probes of the root of tree `m`.
    pub transfer_round_trip: Vec<((usize, usize), f64)>,
}

/// Tolerance on right-invertibility of each projection/interpolation pair.
pub const CONSISTENCY_TOLERANCE: f64 = 1e-8;

fn relative_gap<T: Real>(a: &DVector<T>, b: &DVector<T>) -> f64 {
    let denom = to_f64(b.norm());
    let gap = to_f64((a - b).norm());
    if denom > 0.0 {
        gap / denom
    } else {
        gap
    }
}

fn fail(node: &ModelIndex, reason: impl Into<String>) -> Error {
    Error::Validation {
        node: node.to_string(),
        reason: reason.into(),
    }
}

/// Checks structure, dimensions, weights and right-invertibility. `probes`
/// maps node indices to sample states in that node's space; nodes without
/// probes get only the structural checks.
pub fn validate_forest<T: Real>(
    f: &ModelForest<T>,
    probes: &BTreeMap<ModelIndex, Vec<DVector<T>>>,
) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    for (i, w) in f.weights.iter().enumerate() {
        if !(*w > T::zero()) {
            return Err(fail(&ModelIndex::root(i + 1), "weights must be positive"));
        }
    }
    let sum: f64 = f.weights.iter().map(|w| to_f64(*w)).sum();
    report.weight_residual = (sum - 1.0).abs();
    if report.weight_residual > 1e-12 {
        return Err(fail(&ModelIndex::root(1), "weights do not sum to one"));
    }

    for tree in &f.trees {
        for node in tree.preorder() {
            let idx = node.index();
            if let Some(g) = node.explicit_gain() {
                g.validate().map_err(|e| fail(idx, e.to_string()))?;
            }
            for (k, c) in node.children().iter().enumerate() {
                if c.index() != &idx.child(k + 1) {
                    return Err(fail(c.index(), "child index does not extend its parent's"));
                }
            }
            if idx.is_root() {
                if node.theta().is_some() || node.phi().is_some() {
                    return Err(fail(idx, "a root carries no projection or interpolation"));
                }
                continue;
            }
            let parent_dim = tree
                .find(&idx.parent().expect("non-root"))
                .expect("parent exists")
                .dim();
            let (theta, phi) = match (node.theta(), node.phi()) {
                (Some(t), Some(p)) => (t, p),
                _ => {
                    return Err(fail(
                        idx,
                        "a surrogate needs both projection and interpolation",
                    ))
                }
            };
            if theta.input_dim() != parent_dim || theta.output_dim() != node.dim() {
                return Err(fail(
                    idx,
                    "projection does not map the parent space onto this space",
                ));
            }
            if phi.input_dim() != node.dim() || phi.output_dim() != parent_dim {
                return Err(fail(
                    idx,
                    "interpolation does not map this space onto the parent space",
                ));
            }
            if node.ancillary_size() < 2 {
                return Err(fail(idx, "ancillary ensembles need at least two members"));
            }
            if !(node.ancillary_inflation() >= T::one()) {
                return Err(fail(idx, "ancillary inflation below one"));
            }
            if let Some(samples) = probes.get(idx) {
                let mut worst = 0.0_f64;
                for u in samples {
                    if u.len() != node.dim() {
                        return Err(fail(idx, "probe state has the wrong dimension"));
                    }
                    let back = theta.apply(phi.apply(u.column(0)).column(0));
                    worst = worst.max(relative_gap(&back, u));
                }
                if worst > CONSISTENCY_TOLERANCE {
                    return Err(fail(
                        idx,
                        format!("projection is not a right inverse of interpolation (deviation {worst:.3e})"),
                    ));
                }
                report.consistency.push((idx.clone(), worst));
            }
        }
    }

    let m = f.len();
    for a in 1..=m {
        for b in 1..=m {
            if a == b {
                continue;
            }
            let ab = f
                .transfer(a, b)
                .map_err(|e| fail(&ModelIndex::root(a), e.to_string()))?;
            let ab = ab.expect("distinct trees");
            if ab.input_dim() != f.tree(b).dim() || ab.output_dim() != f.tree(a).dim() {
                return Err(fail(
                    &ModelIndex::root(a),
                    format!("transfer ({a},{b}) has the wrong shape"),
                ));
            }
            let ba = f
                .transfer(b, a)
                .map_err(|e| fail(&ModelIndex::root(b), e.to_string()))?;
            let ba = ba.expect("distinct trees");
            if let Some(samples) = probes.get(&ModelIndex::root(a)) {
                let mut worst = 0.0_f64;
                for x in samples {
                    let back = ab.apply(ba.apply(x.column(0)).column(0));
                    worst = worst.max(relative_gap(&back, x));
                }
                report.transfer_round_trip.push(((a, b), worst));
            }
        }
    }
    Ok(report)
}

/// `sum_m' w(m') tau(m, m')(x(m'))` from one state per tree.
pub fn forest_average_mean<T: Real>(
    states: &[StateVector<T>],
    f: &ModelForest<T>,
    target: usize,
) -> Result<StateVector<T>> {
    if states.len() != f.len() {
        return Err(Error::DimensionMismatch {
            context: "per-tree states",
            expected: f.len(),
            found: states.len(),
        });
    }
    let dim = f.tree(target).dim();
    let mut out = DVector::zeros(dim);
    for (i, s) in states.iter().enumerate() {
        let m = i + 1;
        let moved = match f.transfer(target, m)? {
            None => s.values().clone(),
            Some(tau) => {
                if tau.input_dim() != s.dim() {
                    return Err(Error::DimensionMismatch {
                        context: "transfer input",
                        expected: tau.input_dim(),
                        found: s.dim(),
                    });
                }
                tau.apply(s.values().column(0))
            }
        };
        if moved.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "per-tree state",
                expected: dim,
                found: moved.len(),
            });
        }
        out += moved * f.weight(m);
    }
    StateVector::new(out, states[target - 1].space())
}

/// Covariance blocks `Cov(tau(m, a) Z(a), tau(m, b) Z(b))` keyed by the
/// ordered tree pair `(a, b)`, already expressed in the target space.
pub type CovarianceBlocks<T> = BTreeMap<(usize, usize), DMatrix<T>>;

/// `sum_a sum_b w(a) w(b) blocks[(a, b)]`.
pub fn forest_average_cov<T: Real>(
    blocks: &CovarianceBlocks<T>,
    f: &ModelForest<T>,
) -> Result<DMatrix<T>> {
    let m = f.len();
    let first = blocks.get(&(1, 1)).ok_or(Error::MissingBlock(1, 1))?;
    let mut out = DMatrix::zeros(first.nrows(), first.ncols());
    for a in 1..=m {
        for b in 1..=m {
            let block = blocks.get(&(a, b)).ok_or(Error::MissingBlock(a, b))?;
            if block.shape() != out.shape() {
                return Err(Error::DimensionMismatch {
                    context: "covariance block",
                    expected: out.len(),
                    found: block.len(),
                });
            }
            out += block * (f.weight(a) * f.weight(b));
        }
    }
    Ok(out)
}
