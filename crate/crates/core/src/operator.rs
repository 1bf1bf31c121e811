//! Opaque maps between model spaces and time-propagation contracts.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forest::ModelIndex;
use crate::scalar::Real;
use crate::stats::{Ensemble, SpaceId};

/// A (possibly nonlinear) map between two state spaces: a projection,
/// interpolation, transfer or observation operator.
pub trait Operator<T: Real>: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: DVectorView<'_, T>) -> DVector<T>;

    /// Applies the map member by member. Linear maps override this with a
    /// single matrix product.
    fn apply_members(&self, m: &DMatrix<T>) -> DMatrix<T> {
        let cols: Vec<DVector<T>> = (0..m.ncols()).map(|j| self.apply(m.column(j))).collect();
        if cols.is_empty() {
            return DMatrix::zeros(self.output_dim(), 0);
        }
        DMatrix::from_columns(&cols)
    }

    fn is_identity(&self) -> bool {
        false
    }

    /// Matrix representation when the map is linear.
    fn matrix(&self) -> Option<&DMatrix<T>> {
        None
    }
}

pub type SharedOperator<T> = Arc<dyn Operator<T>>;

/// Applies `op` to every member of `e`, labelling the result with `space`.
pub fn map_ensemble<T: Real>(
    op: &dyn Operator<T>,
    e: &Ensemble<T>,
    space: SpaceId,
) -> Result<Ensemble<T>> {
    if e.dim() != op.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "operator input",
            expected: op.input_dim(),
            found: e.dim(),
        });
    }
    if op.is_identity() {
        return Ok(e.clone().with_space(space));
    }
    Ensemble::new(op.apply_members(e.members()), space)
}

/// Identity on an `n`-dimensional space.
#[derive(Debug, Clone, Copy)]
pub struct Identity {
    pub dim: usize,
}

impl<T: Real> Operator<T> for Identity {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: DVectorView<'_, T>) -> DVector<T> {
        x.into_owned()
    }
    fn apply_members(&self, m: &DMatrix<T>) -> DMatrix<T> {
        m.clone()
    }
    fn is_identity(&self) -> bool {
        true
    }
}

/// Affine map `x -> A x + b`.
#[derive(Debug, Clone)]
pub struct AffineMap<T: Real> {
    matrix: DMatrix<T>,
    offset: Option<DVector<T>>,
}

impl<T: Real> AffineMap<T> {
    pub fn linear(matrix: DMatrix<T>) -> Self {
        Self {
            matrix,
            offset: None,
        }
    }

    pub fn new(matrix: DMatrix<T>, offset: DVector<T>) -> Result<Self> {
        if offset.len() != matrix.nrows() {
            return Err(Error::DimensionMismatch {
                context: "affine offset",
                expected: matrix.nrows(),
                found: offset.len(),
            });
        }
        Ok(Self {
            matrix,
            offset: Some(offset),
        })
    }
}

impl<T: Real> Operator<T> for AffineMap<T> {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }
    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn apply(&self, x: DVectorView<'_, T>) -> DVector<T> {
        let y = &self.matrix * x;
        match &self.offset {
            Some(b) => y + b,
            None => y,
        }
    }
    fn apply_members(&self, m: &DMatrix<T>) -> DMatrix<T> {
        let mut y = &self.matrix * m;
        if let Some(b) = &self.offset {
            for mut col in y.column_iter_mut() {
                col += b;
            }
        }
        y
    }
    fn matrix(&self) -> Option<&DMatrix<T>> {
        if self.offset.is_none() {
            Some(&self.matrix)
        } else {
            None
        }
    }
}

/// Wraps a closure as an operator.
pub struct FnOperator<T: Real, F> {
    input: usize,
    output: usize,
    f: F,
    _marker: std::marker::PhantomData<fn(T) -> T>,
}

impl<T: Real, F> FnOperator<T, F>
where
    F: Fn(DVectorView<'_, T>) -> DVector<T> + Send + Sync,
{
    pub fn new(input: usize, output: usize, f: F) -> Self {
        Self {
            input,
            output,
            f,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Real, F> Operator<T> for FnOperator<T, F>
where
    F: Fn(DVectorView<'_, T>) -> DVector<T> + Send + Sync,
{
    fn input_dim(&self) -> usize {
        self.input
    }
    fn output_dim(&self) -> usize {
        self.output
    }
    fn apply(&self, x: DVectorView<'_, T>) -> DVector<T> {
        (self.f)(x)
    }
}

/// Composition `outer ∘ inner`.
pub struct Composed<T: Real> {
    inner: SharedOperator<T>,
    outer: SharedOperator<T>,
}

impl<T: Real> Composed<T> {
    pub fn new(outer: SharedOperator<T>, inner: SharedOperator<T>) -> Result<Self> {
        if outer.input_dim() != inner.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "operator composition",
                expected: outer.input_dim(),
                found: inner.output_dim(),
            });
        }
        Ok(Self { inner, outer })
    }
}

impl<T: Real> Operator<T> for Composed<T> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.outer.output_dim()
    }
    fn apply(&self, x: DVectorView<'_, T>) -> DVector<T> {
        let y = self.inner.apply(x);
        self.outer.apply(y.column(0))
    }
    fn apply_members(&self, m: &DMatrix<T>) -> DMatrix<T> {
        self.outer.apply_members(&self.inner.apply_members(m))
    }
}

/// Time propagator advancing a state by one assimilation window.
pub trait Model<T: Real>: Send + Sync {
    fn dim(&self) -> usize;

    /// Advances `x` by `dt` model-time units.
    fn advance(&self, x: DVectorView<'_, T>, dt: T) -> std::result::Result<DVector<T>, String>;
}

impl<T: Real> fmt::Debug for dyn Model<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Model(dim={})", self.dim())
    }
}

pub type SharedModel<T> = Arc<dyn Model<T>>;

/// Advances every member of `e` through `model`. Members are independent and
/// may run on any thread; the output keeps member order.
pub fn propagate_ensemble<T: Real>(
    model: &dyn Model<T>,
    e: &Ensemble<T>,
    dt: T,
    node: &ModelIndex,
) -> Result<Ensemble<T>> {
    if e.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            context: "model input",
            expected: model.dim(),
            found: e.dim(),
        });
    }
    let cols: Vec<Result<DVector<T>>> = (0..e.size())
        .into_par_iter()
        .map(|j| {
            let out = model
                .advance(e.member(j), dt)
                .map_err(|reason| Error::ModelFailure {
                    node: node.clone(),
                    member: j,
                    reason,
                })?;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::ModelFailure {
                    node: node.clone(),
                    member: j,
                    reason: "non-finite state".into(),
                });
            }
            Ok(out)
        })
        .collect();
    let cols = cols.into_iter().collect::<Result<Vec<_>>>()?;
    if cols.is_empty() {
        return Ensemble::new(DMatrix::zeros(e.dim(), 0), e.space());
    }
    Ok(Ensemble::from_trusted(
        DMatrix::from_columns(&cols),
        e.space(),
    ))
}
