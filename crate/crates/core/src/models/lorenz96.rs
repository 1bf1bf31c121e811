//! Lorenz-96 on a ring of `K` variables.

use nalgebra::{DVector, DVectorView};

use crate::error::{Error, Result};
use crate::operator::Model;
use crate::scalar::{real, to_f64, Real};

/// `dx_k/dt = (x_{k+1} - x_{k-2}) x_{k-1} - x_k + F` with cyclic indices.
///
/// # Panics
/// If `x` has fewer than four entries.
pub fn lorenz96_rhs<T: Real>(x: DVectorView<'_, T>, forcing: T) -> DVector<T> {
    let k = x.len();
    assert!(k >= 4, "Lorenz-96 needs at least 4 variables, got {k}");
    DVector::from_fn(k, |i, _| {
        let ip1 = x[(i + 1) % k];
        let im1 = x[(i + k - 1) % k];
        let im2 = x[(i + k - 2) % k];
        (ip1 - im2) * im1 - x[i] + forcing
    })
}

/// RK4 integrator for Lorenz-96 with a fixed maximum internal step.
#[derive(Debug, Clone, Copy)]
pub struct Lorenz96<T: Real> {
    dim: usize,
    forcing: T,
    max_step: T,
}

impl<T: Real> Lorenz96<T> {
    pub fn new(dim: usize, forcing: T, max_step: T) -> Result<Self> {
        if dim < 4 {
            return Err(Error::InvalidArgument(format!(
                "Lorenz-96 needs K >= 4, got {dim}"
            )));
        }
        if max_step <= T::zero() {
            return Err(Error::InvalidArgument(
                "internal step must be positive".into(),
            ));
        }
        Ok(Self {
            dim,
            forcing,
            max_step,
        })
    }

    /// K = 40, F = 8, internal step 0.01.
    pub fn standard() -> Self {
        Self {
            dim: 40,
            forcing: real(8.0),
            max_step: real(0.01),
        }
    }

    pub fn forcing(&self) -> T {
        self.forcing
    }

    pub fn rhs(&self, x: DVectorView<'_, T>) -> DVector<T> {
        lorenz96_rhs(x, self.forcing)
    }
}

impl<T: Real> Model<T> for Lorenz96<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn advance(&self, x: DVectorView<'_, T>, dt: T) -> std::result::Result<DVector<T>, String> {
        let mut y = x.into_owned();
        if dt == T::zero() {
            return Ok(y);
        }
        let steps = (dt / self.max_step).ceil();
        let h = dt / steps;
        let n = to_f64(steps) as usize;
        for _ in 0..n {
            y = rk4(&y, h, |v| self.rhs(v.as_view()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err("Lorenz-96 state became non-finite".into());
        }
        Ok(y)
    }
}

/// One classical Runge-Kutta step.
pub(crate) fn rk4<T: Real>(
    y: &DVector<T>,
    h: T,
    f: impl Fn(&DVector<T>) -> DVector<T>,
) -> DVector<T> {
    let half = h / real(2.0);
    let k1 = f(y);
    let k2 = f(&(y + &k1 * half));
    let k3 = f(&(y + &k2 * half));
    let k4 = f(&(y + &k3 * h));
    y + (k1 + (k2 + k3) * real::<T>(2.0) + k4) * (h / real(6.0))
}
