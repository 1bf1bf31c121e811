//! Ensemble containers and deterministic ensemble statistics.
//!
//! Reductions run in ascending member order and never reassociate, so the
//! same input always yields the same bits.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::scalar::{count, Real};

/// Label of the state space an object lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SpaceId(pub u32);

/// A single state in some model space.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T: Real> {
    values: DVector<T>,
    space: SpaceId,
}

impl<T: Real> StateVector<T> {
    pub fn new(values: DVector<T>, space: SpaceId) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state vector"));
        }
        Ok(Self { values, space })
    }

    pub fn values(&self) -> &DVector<T> {
        &self.values
    }

    pub fn into_values(self) -> DVector<T> {
        self.values
    }

    pub fn space(&self) -> SpaceId {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// `N` samples of an `n`-dimensional state, one member per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Real> {
    members: DMatrix<T>,
    space: SpaceId,
}

impl<T: Real> Ensemble<T> {
    pub fn new(members: DMatrix<T>, space: SpaceId) -> Result<Self> {
        if members.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble"));
        }
        Ok(Self { members, space })
    }

    /// Builds an ensemble in the default space.
    pub fn from_members(members: DMatrix<T>) -> Result<Self> {
        Self::new(members, SpaceId::default())
    }

    pub fn from_columns(columns: &[DVector<T>], space: SpaceId) -> Result<Self> {
        if columns.is_empty() {
            return Self::new(DMatrix::zeros(0, 0), space);
        }
        Self::new(DMatrix::from_columns(columns), space)
    }

    pub(crate) fn from_trusted(members: DMatrix<T>, space: SpaceId) -> Self {
        Self { members, space }
    }

    pub fn members(&self) -> &DMatrix<T> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<T> {
        self.members
    }

    pub fn member(&self, j: usize) -> DVectorView<'_, T> {
        self.members.column(j)
    }

    pub fn space(&self) -> SpaceId {
        self.space
    }

    pub fn with_space(mut self, space: SpaceId) -> Self {
        self.space = space;
        self
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.members.nrows()
    }

    /// Member count `N`.
    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    /// Adds `shift` to every member.
    pub fn shifted(&self, shift: &DVector<T>) -> Result<Self> {
        if shift.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "ensemble shift",
                expected: self.dim(),
                found: shift.len(),
            });
        }
        let mut m = self.members.clone();
        for mut col in m.column_iter_mut() {
            col += shift;
        }
        Self::new(m, self.space)
    }
}

fn column_mean<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    // Shifted accumulation: a constant ensemble reproduces its member exactly.
    let first = m.column(0).into_owned();
    let mut acc = DVector::zeros(m.nrows());
    for j in 1..m.ncols() {
        acc += m.column(j) - &first;
    }
    acc /= count::<T>(m.ncols());
    first + acc
}

/// Ensemble mean, accumulated in ascending member order.
pub fn ensemble_mean<T: Real>(e: &Ensemble<T>) -> Result<StateVector<T>> {
    if e.size() == 0 {
        return Err(Error::EmptyEnsemble);
    }
    Ok(StateVector {
        values: column_mean(&e.members),
        space: e.space,
    })
}

/// Scaled anomalies `(E - mean 1^T) / sqrt(N - 1)`.
pub fn anomalies<T: Real>(e: &Ensemble<T>) -> Result<DMatrix<T>> {
    anomalies_of(&e.members)
}

pub(crate) fn anomalies_of<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    if m.ncols() < 2 {
        return Err(Error::DegenerateEnsemble { members: m.ncols() });
    }
    let mean = column_mean(m);
    let scale = count::<T>(m.ncols() - 1).sqrt();
    let mut a = m.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
        col /= scale;
    }
    Ok(a)
}

/// Unbiased sample cross covariance `A_a A_b^T` of two paired ensembles.
pub fn cross_cov<T: Real>(a: &Ensemble<T>, b: &Ensemble<T>) -> Result<DMatrix<T>> {
    cross_cov_of(&a.members, &b.members)
}

pub(crate) fn cross_cov_of<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if a.ncols() != b.ncols() {
        return Err(Error::UnpairedEnsembles {
            left: a.ncols(),
            right: b.ncols(),
        });
    }
    let aa = anomalies_of(a)?;
    let ab = anomalies_of(b)?;
    Ok(aa * ab.transpose())
}

/// Multiplicative inflation about the ensemble mean.
pub fn inflate<T: Real>(e: &Ensemble<T>, alpha: T) -> Result<Ensemble<T>> {
    if !(alpha >= T::one()) {
        return Err(Error::Deflation(crate::scalar::to_f64(alpha)));
    }
    if alpha == T::one() || e.size() == 0 {
        return Ok(e.clone());
    }
    let mean = column_mean(&e.members);
    let mut m = e.members.clone();
    for mut col in m.column_iter_mut() {
        let anomaly = &col - &mean;
        col.copy_from(&(&mean + anomaly * alpha));
    }
    Ensemble::new(m, e.space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ensemble(n: usize, big_n: usize, seed: u64) -> Ensemble<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, big_n, |_, _| rng.random_range(-3.0..3.0));
        Ensemble::from_members(m).unwrap()
    }

    // Independent oracle: explicit (N-1)-normalized double loop.
    fn loop_cov(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.ncols();
        let mut ma = vec![0.0; a.nrows()];
        let mut mb = vec![0.0; b.nrows()];
        for j in 0..n {
            for i in 0..a.nrows() {
                ma[i] += a[(i, j)] / n as f64;
            }
            for i in 0..b.nrows() {
                mb[i] += b[(i, j)] / n as f64;
            }
        }
        DMatrix::from_fn(a.nrows(), b.nrows(), |r, c| {
            (0..n)
                .map(|j| (a[(r, j)] - ma[r]) * (b[(c, j)] - mb[c]))
                .sum::<f64>()
                / (n as f64 - 1.0)
        })
    }

    #[test]
    fn mean_of_identical_columns_is_exact() {
        let v = DVector::from_vec(vec![0.1, -2.7, 1e-3]);
        let e = Ensemble::from_columns(&[v.clone(), v.clone(), v.clone()], SpaceId(0)).unwrap();
        assert_eq!(ensemble_mean(&e).unwrap().values(), &v);
    }

    #[test]
    fn mean_of_symmetric_pair() {
        let e =
            Ensemble::from_members(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(ensemble_mean(&e).unwrap().values().as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_matches_elementwise_average() {
        let e = random_ensemble(4, 5, 3);
        let mean = ensemble_mean(&e).unwrap();
        for i in 0..4 {
            let oracle: f64 = (0..5).map(|j| e.members()[(i, j)]).sum::<f64>() / 5.0;
            assert!((mean.values()[i] - oracle).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_and_degenerate_errors() {
        let e = Ensemble::<f64>::from_members(DMatrix::zeros(3, 0)).unwrap();
        assert_eq!(ensemble_mean(&e).unwrap_err().to_string(), "empty ensemble");
        let one = Ensemble::from_members(DMatrix::from_element(3, 1, 1.0)).unwrap();
        assert!(ensemble_mean(&one).is_ok());
        assert!(anomalies(&one)
            .unwrap_err()
            .to_string()
            .starts_with("degenerate ensemble"));
    }

    #[test]
    fn constant_ensemble_has_zero_anomalies() {
        let e = Ensemble::from_members(DMatrix::from_fn(3, 4, |i, _| i as f64 * 0.3)).unwrap();
        assert!(anomalies(&e).unwrap().iter().all(|v| *v == 0.0));
        assert!(cross_cov(&e, &e).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_member_anomalies_reproduce_unbiased_covariance() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let e = Ensemble::from_columns(&[v.clone(), -v.clone()], SpaceId(0)).unwrap();
        let a = anomalies(&e).unwrap();
        // Textbook unbiased covariance of {v, -v}: sum (x - 0)(x - 0)^T / (2 - 1) = 2 v v^T.
        let textbook = &v * v.transpose() * 2.0;
        assert!((&a * a.transpose() - textbook).amax() < 1e-14);
    }

    #[test]
    fn cross_cov_matches_direct_sum_oracle() {
        let a = random_ensemble(3, 4, 11);
        let b = random_ensemble(3, 4, 12);
        let c = cross_cov(&a, &b).unwrap();
        let oracle = loop_cov(a.members(), b.members());
        assert!((c - oracle).amax() < 1e-13);
    }

    #[test]
    fn cross_cov_rejects_unpaired() {
        let a = random_ensemble(3, 4, 1);
        let b = random_ensemble(3, 5, 2);
        assert!(cross_cov(&a, &b)
            .unwrap_err()
            .to_string()
            .starts_with("unpaired ensembles"));
    }

    #[test]
    fn inflation_identity_and_errors() {
        let e = random_ensemble(5, 6, 9);
        assert_eq!(inflate(&e, 1.0).unwrap(), e);
        assert_eq!(
            inflate(&e, 0.99).unwrap_err().to_string(),
            "deflation not permitted: alpha = 0.99"
        );
        let c = Ensemble::from_members(DMatrix::from_element(3, 4, 2.5)).unwrap();
        assert_eq!(inflate(&c, 1.3).unwrap(), c);
    }

    #[test]
    fn inflation_scales_covariance() {
        let e = random_ensemble(6, 8, 21);
        let out = inflate(&e, 1.05).unwrap();
        let c0 = cross_cov(&e, &e).unwrap();
        let c1 = cross_cov(&out, &out).unwrap();
        assert!((c1 - c0 * 1.1025).amax() < 1e-12);
    }

    #[test]
    fn generic_over_f32() {
        let e =
            Ensemble::<f32>::from_members(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(ensemble_mean(&e).unwrap().values()[0], 2.0);
        assert!((cross_cov(&e, &e).unwrap()[(0, 0)] - 1.0).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn anomalies_are_centered(n in 1usize..50, big_n in 2usize..20, seed in any::<u64>()) {
            let e = random_ensemble(n, big_n, seed);
            let a = anomalies(&e).unwrap();
            let scale = e.members().amax().max(1.0);
            for i in 0..n {
                let s: f64 = a.row(i).iter().sum();
                prop_assert!(s.abs() <= 1e-12 * scale * big_n as f64);
            }
        }

        #[test]
        fn cross_cov_matches_oracle_and_is_psd(n in 1usize..50, big_n in 2usize..20, seed in any::<u64>()) {
            let a = random_ensemble(n, big_n, seed);
            let b = random_ensemble(n, big_n, seed.wrapping_add(1));
            let c = cross_cov(&a, &b).unwrap();
            let oracle = loop_cov(a.members(), b.members());
            prop_assert!((&c - &oracle).amax() <= 1e-12 * oracle.amax().max(1.0));
            prop_assert!((cross_cov(&b, &a).unwrap() - c.transpose()).amax() == 0.0);

            let caa = cross_cov(&a, &a).unwrap();
            let tr = caa.trace();
            let eig = caa.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|l| *l >= -1e-10 * tr));
        }

        #[test]
        fn inflation_preserves_mean(n in 1usize..20, big_n in 2usize..12, alpha in 1.0f64..1.5, seed in any::<u64>()) {
            let e = random_ensemble(n, big_n, seed);
            let m0 = ensemble_mean(&e).unwrap();
            let m1 = ensemble_mean(&inflate(&e, alpha).unwrap()).unwrap();
            prop_assert!((m0.values() - m1.values()).amax() <= 1e-14 * 3.0 * 4.0);
        }
    }
}
