//! Symmetric positive definite solves with the ridge policy shared by the
//! control-variate gains and the Kalman gains.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};
use crate::scalar::{real, to_f64, Real};

/// Relative ridge `1e-8 * trace / n` added when a system is near-singular.
pub const RIDGE_FACTOR: f64 = 1e-8;

/// Outcome of an SPD solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveInfo {
    /// Ridge that was added to the diagonal, if any.
    pub ridge: Option<f64>,
    /// Cheap condition estimate from the Cholesky diagonal.
    pub condition: f64,
}

fn condition_estimate<T: Real>(chol: &Cholesky<T, Dyn>) -> f64 {
    let l = chol.l_dirty();
    let n = l.nrows();
    if n == 0 {
        return 1.0;
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for i in 0..n {
        let d = to_f64(l[(i, i)]);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    (hi / lo).powi(2)
}

/// Largest condition number accepted without regularization.
fn condition_limit<T: Real>() -> f64 {
    1.0 / (1e4 * to_f64(T::default_epsilon()))
}

fn refine<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, chol: &Cholesky<T, Dyn>, x: &mut DMatrix<T>) {
    for _ in 0..2 {
        let r = b - a * &*x;
        if r.iter().all(|v| *v == T::zero()) {
            break;
        }
        *x += chol.solve(&r);
    }
}

/// Cholesky factorization of a possibly regularized system.
struct Factored<T: Real> {
    chol: Cholesky<T, Dyn>,
    /// The matrix actually factored: `A`, or `A + ridge I`.
    system: DMatrix<T>,
    info: SolveInfo,
}

/// Factors `A` when it is well conditioned, `A + ridge I` with
/// `ridge = 1e-8 tr(A)/n` otherwise.
fn factor<T: Real>(a: &DMatrix<T>) -> Result<Factored<T>> {
    let n = a.nrows();
    if let Some(chol) = a.clone().cholesky() {
        let condition = condition_estimate(&chol);
        if condition.is_finite() && condition <= condition_limit::<T>() {
            return Ok(Factored {
                chol,
                system: a.clone(),
                info: SolveInfo {
                    ridge: None,
                    condition,
                },
            });
        }
    }
    let ridge = real::<T>(RIDGE_FACTOR) * a.trace() / crate::scalar::count::<T>(n);
    if !(ridge > T::zero()) {
        return Err(Error::SingularSystem {
            condition: f64::INFINITY,
        });
    }
    let mut reg = a.clone();
    for i in 0..n {
        reg[(i, i)] += ridge;
    }
    match reg.clone().cholesky() {
        Some(chol) => {
            let condition = condition_estimate(&chol);
            Ok(Factored {
                chol,
                system: reg,
                info: SolveInfo {
                    ridge: Some(to_f64(ridge)),
                    condition,
                },
            })
        }
        None => Err(Error::SingularSystem {
            condition: f64::INFINITY,
        }),
    }
}

fn check_system<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    rhs_len: usize,
    context: &'static str,
) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "spd_solve (square)",
            expected: n,
            found: a.ncols(),
        });
    }
    if rhs_len != n {
        return Err(Error::DimensionMismatch {
            context,
            expected: n,
            found: rhs_len,
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spd_solve input"));
    }
    Ok(())
}

fn trivial() -> SolveInfo {
    SolveInfo {
        ridge: None,
        condition: 1.0,
    }
}

/// Solves `A X = B` for symmetric positive (semi)definite `A`.
///
/// The unregularized factorization is used when it exists and is well
/// conditioned. Otherwise `A + ridge I` with `ridge = 1e-8 tr(A)/n` is
/// factored. Two steps of iterative refinement follow either way.
pub fn spd_solve<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<(DMatrix<T>, SolveInfo)> {
    check_system(a, b, b.nrows(), "spd_solve (rhs rows)")?;
    if a.nrows() == 0 {
        return Ok((DMatrix::zeros(0, b.ncols()), trivial()));
    }
    let f = factor(a)?;
    let mut x = f.chol.solve(b);
    refine(&f.system, b, &f.chol, &mut x);
    Ok((x, f.info))
}

/// `X = B A^{-1}` by column division when `A` is a well-conditioned
/// positive diagonal matrix.
fn diagonal_solve_right<T: Real>(
    b: &DMatrix<T>,
    a: &DMatrix<T>,
) -> Option<(DMatrix<T>, SolveInfo)> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n || b.ncols() != n || b.iter().any(|v| !v.is_finite()) {
        return None;
    }
    for j in 0..n {
        for i in 0..n {
            let v = a[(i, j)];
            if (i == j && !(v > T::zero() && v.is_finite())) || (i != j && v != T::zero()) {
                return None;
            }
        }
    }
    let d: Vec<f64> = (0..n).map(|i| to_f64(a[(i, i)])).collect();
    let condition =
        d.iter().cloned().fold(0.0, f64::max) / d.iter().cloned().fold(f64::INFINITY, f64::min);
    if condition > condition_limit::<T>() {
        return None;
    }
    let mut x = b.clone();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        col /= a[(j, j)];
    }
    Some((
        x,
        SolveInfo {
            ridge: None,
            condition,
        },
    ))
}

/// Solves `X A = B` for SPD `A`, i.e. `X = B A^{-1}`, with the same
/// regularization policy as [`spd_solve`]. When `B` has more rows than `A`
/// the solve goes through the explicit inverse so that the work is done by
/// matrix products.
pub fn spd_solve_right<T: Real>(b: &DMatrix<T>, a: &DMatrix<T>) -> Result<(DMatrix<T>, SolveInfo)> {
    let n = a.nrows();
    if let Some(x) = diagonal_solve_right(b, a) {
        return Ok(x);
    }
    if b.nrows() <= n {
        let (xt, info) = spd_solve(a, &b.transpose())?;
        return Ok((xt.transpose(), info));
    }
    check_system(a, b, b.ncols(), "spd_solve_right (rhs columns)")?;
    if n == 0 {
        return Ok((DMatrix::zeros(b.nrows(), 0), trivial()));
    }
    let f = factor(a)?;
    let inv = f.chol.inverse();
    let mut x = b * &inv;
    for _ in 0..2 {
        let r = b - &x * &f.system;
        if r.iter().all(|v| *v == T::zero()) {
            break;
        }
        x += r * &inv;
    }
    Ok((x, f.info))
}

/// Lower Cholesky factor of an SPD matrix, or an error naming `what`.
pub fn cholesky_factor<T: Real>(a: &DMatrix<T>, what: &'static str) -> Result<DMatrix<T>> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotPositiveDefinite(what));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    let sym_err = (a - a.transpose()).amax();
    if sym_err > real::<T>(1e-12) * (T::one() + a.amax()) {
        return Err(Error::NotPositiveDefinite(what));
    }
    a.clone()
        .cholesky()
        .map(|c| c.unpack())
        .ok_or(Error::NotPositiveDefinite(what))
}
