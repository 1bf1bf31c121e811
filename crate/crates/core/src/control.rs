//! Linear control variates: total-variate construction, optimal and
//! heuristic gains, and total-variate ensembles.
//!
//! Throughout, `h` is the identity and `g` is the interpolation `phi` of the
//! surrogate, so a total variate reads `Z = X - sum_m S_m [phi(Û_m) - phi(U_m)]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_solve_right, SolveInfo};
use crate::operator::Operator;
use crate::scalar::{count, real, Real};
use crate::stats::{cross_cov_of, ensemble_mean, Ensemble, StateVector};

/// How a control-variate gain is specified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainMode {
    Optimal,
    FixedFraction,
    ScaledAnomaly,
}

/// Gain `S` weighting one surrogate correction.
#[derive(Debug, Clone, PartialEq)]
pub enum GainSpec<T: Real> {
    /// Explicitly solved dense gain.
    Optimal(DMatrix<T>),
    /// `S = fraction * I`.
    FixedFraction(T),
    /// Anomaly-transform gain `S~ = scale * base`.
    ScaledAnomaly { scale: T, base: Box<GainSpec<T>> },
}

impl<T: Real> GainSpec<T> {
    pub fn mode(&self) -> GainMode {
        match self {
            GainSpec::Optimal(_) => GainMode::Optimal,
            GainSpec::FixedFraction(_) => GainMode::FixedFraction,
            GainSpec::ScaledAnomaly { .. } => GainMode::ScaledAnomaly,
        }
    }

    /// Dense matrix when one was solved for.
    pub fn matrix(&self) -> Option<DMatrix<T>> {
        match self {
            GainSpec::Optimal(m) => Some(m.clone()),
            GainSpec::FixedFraction(_) => None,
            GainSpec::ScaledAnomaly { scale, base } => base.matrix().map(|m| m * *scale),
        }
    }

    /// Effective scalar when the gain is a multiple of the identity.
    pub fn fraction(&self) -> Option<T> {
        match self {
            GainSpec::Optimal(_) => None,
            GainSpec::FixedFraction(f) => Some(*f),
            GainSpec::ScaledAnomaly { scale, base } => base.fraction().map(|f| *scale * f),
        }
    }

    /// `S * m`.
    pub fn apply(&self, m: &DMatrix<T>) -> Result<DMatrix<T>> {
        match self {
            GainSpec::Optimal(s) => {
                if s.ncols() != m.nrows() {
                    return Err(Error::DimensionMismatch {
                        context: "gain application",
                        expected: s.ncols(),
                        found: m.nrows(),
                    });
                }
                Ok(s * m)
            }
            GainSpec::FixedFraction(f) => Ok(m * *f),
            GainSpec::ScaledAnomaly { scale, base } => Ok(base.apply(m)? * *scale),
        }
    }

    /// The anomaly-transform gain for a node with `siblings` surrogates.
    pub fn for_anomalies(&self, siblings: usize) -> Self {
        GainSpec::ScaledAnomaly {
            scale: anomaly_gain_scale(siblings),
            base: Box::new(self.clone()),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            GainSpec::FixedFraction(f) => {
                if !(*f > T::zero() && *f <= T::one()) {
                    return Err(Error::InvalidArgument(format!(
                        "fixed-fraction gain must lie in (0, 1], got {}",
                        crate::scalar::to_f64(*f)
                    )));
                }
                Ok(())
            }
            GainSpec::Optimal(m) => {
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("gain matrix"));
                }
                Ok(())
            }
            GainSpec::ScaledAnomaly { base, .. } => base.validate(),
        }
    }
}

/// Covariance blocks of the surrogate reconstructions for one node.
#[derive(Debug, Clone)]
pub struct SurrogateCovariances<T: Real> {
    /// `control[m][k] = Cov(g(Û_m), g(Û_k))`.
    pub control: Vec<Vec<DMatrix<T>>>,
    /// `ancillary[m] = Cov(g(U_m), g(U_m))`.
    pub ancillary: Vec<DMatrix<T>>,
}

impl<T: Real> SurrogateCovariances<T> {
    pub fn count(&self) -> usize {
        self.ancillary.len()
    }

    /// Assembles the symmetric block system of the multi-surrogate gain
    /// equations: diagonal blocks `Cov(gÛ_m) + Cov(gU_m)`, off-diagonal
    /// blocks `Cov(gÛ_m, gÛ_k)`.
    pub fn assemble(&self) -> Result<DMatrix<T>> {
        let m = self.count();
        if self.control.len() != m || self.control.iter().any(|row| row.len() != m) {
            return Err(Error::InvalidArgument(format!(
                "expected a {m}x{m} block layout of control covariances"
            )));
        }
        let sizes: Vec<usize> = self.ancillary.iter().map(|a| a.nrows()).collect();
        let total: usize = sizes.iter().sum();
        let mut out = DMatrix::zeros(total, total);
        let mut r0 = 0;
        for (i, &ri) in sizes.iter().enumerate() {
            let mut c0 = 0;
            for (k, &rk) in sizes.iter().enumerate() {
                let block = &self.control[i][k];
                if block.nrows() != ri || block.ncols() != rk {
                    return Err(Error::DimensionMismatch {
                        context: "surrogate covariance block",
                        expected: ri * rk,
                        found: block.nrows() * block.ncols(),
                    });
                }
                let mut view = out.view_mut((r0, c0), (ri, rk));
                view.copy_from(block);
                if i == k {
                    let anc = &self.ancillary[i];
                    if anc.shape() != (ri, ri) {
                        return Err(Error::DimensionMismatch {
                            context: "ancillary covariance block",
                            expected: ri * ri,
                            found: anc.nrows() * anc.ncols(),
                        });
                    }
                    view += anc;
                }
                c0 += rk;
            }
            r0 += ri;
        }
        Ok(out)
    }
}

/// Solves the block normal equations `[S_1 .. S_M] B = [C_1 .. C_M]` for the
/// set of gains minimizing the trace of the total-variate covariance.
/// `rhs[m] = Cov(X, g(Û_m))`.
pub fn general_optimal_gain<T: Real>(
    blocks: &SurrogateCovariances<T>,
    rhs: &[DMatrix<T>],
) -> Result<Vec<GainSpec<T>>> {
    general_optimal_gain_with_info(blocks, rhs).map(|(g, _)| g)
}

/// [`general_optimal_gain`] that also reports whether regularization kicked in.
pub fn general_optimal_gain_with_info<T: Real>(
    blocks: &SurrogateCovariances<T>,
    rhs: &[DMatrix<T>],
) -> Result<(Vec<GainSpec<T>>, SolveInfo)> {
    let m = blocks.count();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "at least one surrogate is required".into(),
        ));
    }
    if rhs.len() != m {
        return Err(Error::DimensionMismatch {
            context: "gain right-hand sides",
            expected: m,
            found: rhs.len(),
        });
    }
    if let Some(reduced) = exchangeable_system(blocks, rhs) {
        let (s, info) = spd_solve_right(&rhs[0], &reduced)?;
        return Ok((vec![GainSpec::Optimal(s); m], info));
    }
    let system = blocks.assemble()?;
    let n = rhs[0].nrows();
    let mut stacked = DMatrix::zeros(n, system.nrows());
    let mut c0 = 0;
    for (block, anc) in rhs.iter().zip(&blocks.ancillary) {
        if block.nrows() != n || block.ncols() != anc.nrows() {
            return Err(Error::DimensionMismatch {
                context: "gain right-hand side block",
                expected: n * anc.nrows(),
                found: block.nrows() * block.ncols(),
            });
        }
        stacked.view_mut((0, c0), block.shape()).copy_from(block);
        c0 += block.ncols();
    }
    let (solution, info) = spd_solve_right(&stacked, &system)?;
    let mut gains = Vec::with_capacity(m);
    let mut c0 = 0;
    for anc in &blocks.ancillary {
        let r = anc.nrows();
        gains.push(GainSpec::Optimal(solution.columns(c0, r).into_owned()));
        c0 += r;
    }
    Ok((gains, info))
}

/// When every surrogate has the same control, ancillary and cross blocks,
/// all gains coincide and solve `S (M C + A) = B`.
fn exchangeable_system<T: Real>(
    blocks: &SurrogateCovariances<T>,
    rhs: &[DMatrix<T>],
) -> Option<DMatrix<T>> {
    let m = blocks.count();
    let c = blocks.control.first()?.first()?;
    let a = &blocks.ancillary[0];
    let same = blocks.control.len() == m
        && blocks
            .control
            .iter()
            .all(|row| row.len() == m && row.iter().all(|b| b == c))
        && blocks.ancillary.iter().all(|b| b == a)
        && rhs.iter().all(|b| b == &rhs[0]);
    if !same || c.shape() != a.shape() || rhs[0].ncols() != a.nrows() {
        return None;
    }
    Some(c * count::<T>(m) + a)
}

/// Relative residual `||[S] B - C|| / ||C||` of a gain set.
pub fn gain_residual<T: Real>(
    blocks: &SurrogateCovariances<T>,
    rhs: &[DMatrix<T>],
    gains: &[GainSpec<T>],
) -> Result<T> {
    let system = blocks.assemble()?;
    let n = rhs[0].nrows();
    let mut s = DMatrix::zeros(n, system.nrows());
    let mut c = DMatrix::zeros(n, system.nrows());
    let mut c0 = 0;
    for ((g, b), anc) in gains.iter().zip(rhs).zip(&blocks.ancillary) {
        let r = anc.nrows();
        let gm = match g.matrix() {
            Some(m) => m,
            None => DMatrix::identity(n, r) * g.fraction().unwrap_or_else(T::zero),
        };
        s.view_mut((0, c0), (n, r)).copy_from(&gm);
        c.view_mut((0, c0), (n, r)).copy_from(b);
        c0 += r;
    }
    let denom = c.norm();
    let resid = (s * system - &c).norm();
    Ok(if denom > T::zero() {
        resid / denom
    } else {
        resid
    })
}

/// Single-surrogate optimal gain `S = Cov(X, gÛ) (Cov(gÛ) + Cov(gU))^{-1}`.
pub fn optimal_gain_single<T: Real>(
    cov_xg: &DMatrix<T>,
    cov_gg_hat: &DMatrix<T>,
    cov_gg_anc: &DMatrix<T>,
) -> Result<GainSpec<T>> {
    let blocks = SurrogateCovariances {
        control: vec![vec![cov_gg_hat.clone()]],
        ancillary: vec![cov_gg_anc.clone()],
    };
    general_optimal_gain(&blocks, std::slice::from_ref(cov_xg))
        .map(|mut g| g.remove(0))
        .map_err(|e| match e {
            Error::SingularSystem { condition } => Error::RankDeficient { condition },
            other => other,
        })
}

/// `S = I / (M + 1)` for a node with `siblings = M` surrogates.
pub fn fixed_fraction_gain<T: Real>(siblings: usize) -> Result<GainSpec<T>> {
    if siblings == 0 {
        return Err(Error::InvalidArgument(
            "fixed-fraction gain needs at least one surrogate".into(),
        ));
    }
    Ok(GainSpec::FixedFraction(T::one() / count::<T>(siblings + 1)))
}

/// Scalar `1 / (1 + sqrt(2 / (M + 3)))` turning the optimal gain into the
/// gain that maps principal and control anomalies onto total-variate
/// anomalies.
pub fn anomaly_gain_scale<T: Real>(siblings: usize) -> T {
    let two = real::<T>(2.0);
    T::one() / (T::one() + (two / count::<T>(siblings + 3)).sqrt())
}

/// One surrogate contribution to a total variate.
pub struct ControlPair<'a, T: Real> {
    pub control: &'a Ensemble<T>,
    pub ancillary: &'a Ensemble<T>,
    pub interpolation: &'a dyn Operator<T>,
    pub gain: &'a GainSpec<T>,
}

/// Principal, control and ancillary ensembles of a bifidelity pair.
#[derive(Debug, Clone)]
pub struct VariateTriple<T: Real> {
    pub principal: Ensemble<T>,
    pub control: Ensemble<T>,
    pub ancillary: Ensemble<T>,
}

impl<T: Real> VariateTriple<T> {
    pub fn new(
        principal: Ensemble<T>,
        control: Ensemble<T>,
        ancillary: Ensemble<T>,
    ) -> Result<Self> {
        if principal.size() != control.size() {
            return Err(Error::UnpairedEnsembles {
                left: principal.size(),
                right: control.size(),
            });
        }
        Ok(Self {
            principal,
            control,
            ancillary,
        })
    }
}

fn mapped<T: Real>(op: &dyn Operator<T>, e: &Ensemble<T>, target_dim: usize) -> Result<DMatrix<T>> {
    if e.dim() != op.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "interpolation input",
            expected: op.input_dim(),
            found: e.dim(),
        });
    }
    if op.output_dim() != target_dim {
        return Err(Error::DimensionMismatch {
            context: "interpolation output",
            expected: target_dim,
            found: op.output_dim(),
        });
    }
    Ok(op.apply_members(e.members()))
}

fn mean_of<T: Real>(m: &DMatrix<T>) -> Result<DVector<T>> {
    Ok(ensemble_mean(&Ensemble::from_trusted(m.clone(), Default::default()))?.into_values())
}

/// `mean(X) - sum_m S_m (mean(phi(Û_m)) - mean(phi(U_m)))`.
pub fn total_variate_mean<T: Real>(
    principal: &Ensemble<T>,
    pairs: &[ControlPair<'_, T>],
) -> Result<StateVector<T>> {
    let mut z = ensemble_mean(principal)?.into_values();
    for p in pairs {
        let hat = mean_of(&mapped(p.interpolation, p.control, principal.dim())?)?;
        let anc = mean_of(&mapped(p.interpolation, p.ancillary, principal.dim())?)?;
        let diff = DMatrix::from_column_slice(hat.len(), 1, (hat - anc).as_slice());
        z -= p.gain.apply(&diff)?.column(0);
    }
    StateVector::new(z, principal.space())
}

/// A control ensemble with its interpolation and anomaly gain.
pub struct AnomalyControl<'a, T: Real> {
    pub control: &'a Ensemble<T>,
    pub interpolation: &'a dyn Operator<T>,
    pub gain: &'a GainSpec<T>,
}

/// Samples of the total variate written purely in terms of the principal
/// ensemble and its paired controls: mean `mean_z` and anomalies
/// `A_X - sum_m S~_m A_{phi(Û_m)}`.
pub fn total_variate_ensemble<T: Real>(
    principal: &Ensemble<T>,
    controls: &[AnomalyControl<'_, T>],
    mean_z: &StateVector<T>,
) -> Result<Ensemble<T>> {
    let n = principal.dim();
    if mean_z.dim() != n {
        return Err(Error::DimensionMismatch {
            context: "total-variate mean",
            expected: n,
            found: mean_z.dim(),
        });
    }
    let mut out = principal.members().clone();
    for c in controls {
        if c.control.size() != principal.size() {
            return Err(Error::UnpairedEnsembles {
                left: principal.size(),
                right: c.control.size(),
            });
        }
        let mut rec = mapped(c.interpolation, c.control, n)?;
        let mean = mean_of(&rec)?;
        for mut col in rec.column_iter_mut() {
            col -= &mean;
        }
        out -= c.gain.apply(&rec)?;
    }
    let shift = mean_z.values() - ensemble_mean(principal)?.values();
    for mut col in out.column_iter_mut() {
        col += &shift;
    }
    Ensemble::new(out, principal.space())
}

fn five_term<T: Real>(
    x: &DMatrix<T>,
    hat: &DMatrix<T>,
    anc: &DMatrix<T>,
    gain: T,
) -> Result<DMatrix<T>> {
    let cxx = cross_cov_of(x, x)?;
    let cxh = cross_cov_of(x, hat)?;
    let chx = cross_cov_of(hat, x)?;
    let chh = cross_cov_of(hat, hat)?;
    let cuu = cross_cov_of(anc, anc)?;
    let g2 = gain * gain;
    Ok(cxx - cxh * gain - chx * gain + chh * g2 + cuu * g2)
}

/// Full-space total-variate covariance
/// `Cov(X) - s Cov(X, phiÛ) - s Cov(phiÛ, X) + s^2 Cov(phiÛ) + s^2 Cov(phiU)`.
pub fn total_variate_cov_full<T: Real>(
    triple: &VariateTriple<T>,
    phi: &dyn Operator<T>,
    gain: T,
) -> Result<DMatrix<T>> {
    let n = triple.principal.dim();
    let hat = mapped(phi, &triple.control, n)?;
    let anc = mapped(phi, &triple.ancillary, n)?;
    five_term(triple.principal.members(), &hat, &anc, gain)
}

/// Reduced-space total-variate covariance, the same expansion with
/// `theta(X)` in place of `X` and `Û`, `U` in place of their reconstructions.
pub fn total_variate_cov_reduced<T: Real>(
    triple: &VariateTriple<T>,
    theta: &dyn Operator<T>,
    gain: T,
) -> Result<DMatrix<T>> {
    let r = triple.control.dim();
    let tx = mapped(theta, &triple.principal, r)?;
    five_term(
        &tx,
        triple.control.members(),
        triple.ancillary.members(),
        gain,
    )
}

/// Population covariance of `Z = X - S (gÛ - gU)` for a given gain.
pub fn population_total_variate_cov<T: Real>(
    cov_xx: &DMatrix<T>,
    cov_xg: &DMatrix<T>,
    cov_gg_hat: &DMatrix<T>,
    cov_gg_anc: &DMatrix<T>,
    gain: &DMatrix<T>,
) -> DMatrix<T> {
    cov_xx - gain * cov_xg.transpose() - cov_xg * gain.transpose()
        + gain * (cov_gg_hat + cov_gg_anc) * gain.transpose()
}
