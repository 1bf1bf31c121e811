//! Point observations of a gridded state.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::operator::Operator;
use crate::scalar::Real;

/// Indices `floor(j n / count)` for `j = 0..count`: a uniform stride through
/// the flattened state.
pub fn observation_indices(n: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "cannot observe {count} of {n} points"
        )));
    }
    Ok((0..count).map(|j| j * n / count).collect())
}

/// Indices of a uniform `cx x cy` sub-lattice of an `nx x ny` grid stored
/// with x fastest. Lattice points sit at the centers of equal strips.
pub fn lattice_indices(nx: usize, ny: usize, cx: usize, cy: usize) -> Result<Vec<usize>> {
    if cx == 0 || cy == 0 || cx > nx || cy > ny {
        return Err(Error::InvalidArgument(format!(
            "cannot place a {cx}x{cy} lattice on a {nx}x{ny} grid"
        )));
    }
    let pick = |n: usize, c: usize, k: usize| (2 * k + 1) * n / (2 * c);
    let mut out = Vec::with_capacity(cx * cy);
    for j in 0..cy {
        for i in 0..cx {
            out.push(pick(nx, cx, i) + nx * pick(ny, cy, j));
        }
    }
    Ok(out)
}

/// Samples `psi` at `count` evenly strided indices.
pub fn observe_gridpoints<T: Real>(psi: DVectorView<'_, T>, count: usize) -> Result<DVector<T>> {
    let idx = observation_indices(psi.len(), count)?;
    Ok(DVector::from_iterator(count, idx.iter().map(|&k| psi[k])))
}

/// Linear operator picking fixed entries of the state.
#[derive(Debug, Clone)]
pub struct Selection<T: Real> {
    n: usize,
    indices: Vec<usize>,
    matrix: DMatrix<T>,
}

impl<T: Real> Selection<T> {
    pub fn new(n: usize, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&k| k >= n) {
            return Err(Error::InvalidArgument(format!(
                "index {bad} outside a state of {n}"
            )));
        }
        let mut matrix = DMatrix::zeros(indices.len(), n);
        for (r, &k) in indices.iter().enumerate() {
            matrix[(r, k)] = T::one();
        }
        Ok(Self { n, indices, matrix })
    }

    pub fn strided(n: usize, count: usize) -> Result<Self> {
        Self::new(n, observation_indices(n, count)?)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl<T: Real> Operator<T> for Selection<T> {
    fn input_dim(&self) -> usize {
        self.n
    }
    fn output_dim(&self) -> usize {
        self.indices.len()
    }
    fn apply(&self, x: DVectorView<'_, T>) -> DVector<T> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&k| x[k]))
    }
    fn apply_members(&self, m: &DMatrix<T>) -> DMatrix<T> {
        DMatrix::from_fn(self.indices.len(), m.ncols(), |r, c| {
            m[(self.indices[r], c)]
        })
    }
    fn matrix(&self) -> Option<&DMatrix<T>> {
        Some(&self.matrix)
    }
}
