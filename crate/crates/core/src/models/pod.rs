//! Proper orthogonal decomposition of QG snapshots and the quadratic
//! Galerkin reduced model `u_t = a + B u + uᵀ C u`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::models::qg::{Qg, QgConfig, BLOWUP_FACTOR};
use crate::operator::{AffineMap, Model, SharedOperator};

/// Snapshot matrix, one state per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    pub data: DMatrix<f64>,
    /// Model time between consecutive snapshots, when known.
    pub spacing: Option<f64>,
}

impl SnapshotSet {
    pub fn new(data: DMatrix<f64>, spacing: Option<f64>) -> Self {
        Self { data, spacing }
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }
}

/// Leading left singular vectors of a snapshot matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PodModes {
    /// `n x r`, orthonormal columns.
    pub phi: DMatrix<f64>,
    /// Snapshot mean, when the data were centered.
    pub shift: Option<DVector<f64>>,
    /// All singular values of the (possibly centered) data, descending.
    pub singular_values: Vec<f64>,
}

/// Computes the dominant `r` modes of the snapshot second moment, or of the
/// covariance when `center` is set.
pub fn pod_modes(data: &DMatrix<f64>, r: usize, center: bool) -> Result<PodModes> {
    let (n, ns) = data.shape();
    if r == 0 {
        return Err(Error::InvalidArgument("POD rank must be positive".into()));
    }
    if ns < r {
        return Err(Error::InvalidArgument(format!(
            "{ns} snapshots cannot support rank {r}"
        )));
    }
    if r > n {
        return Err(Error::InvalidArgument(format!(
            "rank {r} exceeds state dimension {n}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("snapshots"));
    }
    let (x, shift) = if center {
        let mean = data.column_mean();
        let mut x = data.clone();
        for mut col in x.column_iter_mut() {
            col -= &mean;
        }
        (x, Some(mean))
    } else {
        (data.clone(), None)
    };
    let svd = x.svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| Error::InvalidArgument("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    let tol = singular_values[0] * n.max(ns) as f64 * f64::EPSILON;
    if singular_values.len() < r || !(singular_values[r - 1] > tol) {
        let rank = singular_values.iter().filter(|s| **s > tol).count();
        return Err(Error::InvalidArgument(format!(
            "rank {r} exceeds snapshot rank {rank}"
        )));
    }
    let mut phi = DMatrix::zeros(n, r);
    for (c, &k) in order.iter().take(r).enumerate() {
        let mut col = u.column(k).into_owned();
        // Fix the sign so the largest entry is positive.
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        phi.set_column(c, &col);
    }
    Ok(PodModes {
        phi,
        shift,
        singular_values,
    })
}

/// POD basis with the Galerkin tensors of a QG configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    pub phi: DMatrix<f64>,
    pub shift: Option<DVector<f64>>,
    pub a: DVector<f64>,
    pub b: DMatrix<f64>,
    /// `c[k][(i, j)]` multiplies `u_i u_j` in the tendency of `u_k`.
    pub c: Vec<DMatrix<f64>>,
    pub qg: QgConfig,
}

impl PodBasis {
    /// Projects the QG right-hand side onto `span(Φ)` around `shift`.
    pub fn galerkin(
        phi: DMatrix<f64>,
        shift: Option<DVector<f64>>,
        cfg: &QgConfig,
    ) -> Result<Self> {
        let qg = Qg::new(cfg.clone())?;
        let (n, r) = phi.shape();
        if n != cfg.dim() {
            return Err(Error::DimensionMismatch {
                context: "POD basis rows",
                expected: cfg.dim(),
                found: n,
            });
        }
        if let Some(s) = &shift {
            if s.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "POD shift",
                    expected: n,
                    found: s.len(),
                });
            }
        }
        let modes: Vec<Vec<f64>> = (0..r)
            .map(|j| phi.column(j).iter().copied().collect())
            .collect();
        let project = |omega_t: &[f64]| -> DVector<f64> {
            let psi_t = DVector::from_vec(qg.invert(omega_t));
            phi.tr_mul(&psi_t)
        };
        let add = |mut x: Vec<f64>, y: Vec<f64>| {
            x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
            x
        };

        let s: Vec<f64> = match &shift {
            Some(s) => s.iter().copied().collect(),
            None => vec![0.0; n],
        };
        let constant = add(
            add(qg.linear_vorticity_tendency(&s), qg.advection(&s, &s)),
            qg.forcing_tendency(),
        );
        let a = project(&constant);

        let mut b = DMatrix::zeros(r, r);
        for (j, m) in modes.iter().enumerate() {
            let mut lin = qg.linear_vorticity_tendency(m);
            if shift.is_some() {
                lin = add(add(lin, qg.advection(&s, m)), qg.advection(m, &s));
            }
            b.set_column(j, &project(&lin));
        }

        let mut c = vec![DMatrix::zeros(r, r); r];
        if cfg.advection {
            for (i, mi) in modes.iter().enumerate() {
                for (j, mj) in modes.iter().enumerate() {
                    let q = project(&qg.advection(mi, mj));
                    for k in 0..r {
                        c[k][(i, j)] = q[k];
                    }
                }
            }
        }
        Ok(Self {
            phi,
            shift,
            a,
            b,
            c,
            qg: cfg.clone(),
        })
    }

    pub fn rank(&self) -> usize {
        self.phi.ncols()
    }

    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    /// `θ(x) = Φᵀ (x - shift)`.
    pub fn theta(&self) -> SharedOperator<f64> {
        let pt = self.phi.transpose();
        match &self.shift {
            Some(s) => {
                let off = -(&pt * s);
                Arc::new(AffineMap::new(pt, off).expect("shift length checked at construction"))
            }
            None => Arc::new(AffineMap::linear(pt)),
        }
    }

    /// `φ(u) = shift + Φ u`.
    pub fn phi_operator(&self) -> SharedOperator<f64> {
        match &self.shift {
            Some(s) => Arc::new(
                AffineMap::new(self.phi.clone(), s.clone())
                    .expect("shift length checked at construction"),
            ),
            None => Arc::new(AffineMap::linear(self.phi.clone())),
        }
    }
}

/// Builds modes from snapshots and assembles the Galerkin tensors.
pub fn build_pod(
    snapshots: &SnapshotSet,
    r: usize,
    center: bool,
    cfg: &QgConfig,
) -> Result<PodBasis> {
    let modes = pod_modes(&snapshots.data, r, center)?;
    PodBasis::galerkin(modes.phi, modes.shift, cfg)
}

/// `a + B u + [uᵀ C_k u]_k`.
pub fn pod_rhs(u: DVectorView<'_, f64>, basis: &PodBasis) -> DVector<f64> {
    let mut out = &basis.a + &basis.b * u;
    for (k, ck) in basis.c.iter().enumerate() {
        out[k] += u.dot(&(ck * u));
    }
    out
}

/// The reduced model integrated with RK4.
#[derive(Debug, Clone)]
pub struct PodRom {
    basis: Arc<PodBasis>,
    substeps: usize,
}

impl PodRom {
    pub fn new(basis: Arc<PodBasis>, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::InvalidArgument(
                "ROM needs at least one substep".into(),
            ));
        }
        Ok(Self { basis, substeps })
    }

    pub fn basis(&self) -> &PodBasis {
        &self.basis
    }
}

impl Model<f64> for PodRom {
    fn dim(&self) -> usize {
        self.basis.rank()
    }

    fn advance(
        &self,
        x: DVectorView<'_, f64>,
        dt: f64,
    ) -> std::result::Result<DVector<f64>, String> {
        let mut y = x.into_owned();
        if dt == 0.0 {
            return Ok(y);
        }
        let start = y.norm().max(1.0);
        let h = dt / self.substeps as f64;
        let f = |v: &DVector<f64>| pod_rhs(v.as_view(), &self.basis);
        for _ in 0..self.substeps {
            y = crate::models::lorenz96::rk4(&y, h, f);
            let norm = y.norm();
            if !norm.is_finite() || norm > BLOWUP_FACTOR * start {
                return Err(format!("POD ROM diverged (|u| = {norm:.3e})"));
            }
        }
        Ok(y)
    }
}
