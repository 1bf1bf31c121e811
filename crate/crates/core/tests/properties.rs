use mfenkf::control::{gain_residual, ControlPair, SurrogateCovariances};
use mfenkf::linalg::spd_solve;
use mfenkf::operator::Identity;
use mfenkf::{general_optimal_gain, inflate, total_variate_mean, Ensemble, GainSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| g.random_range(-1.0..1.0))
}

fn spd(n: usize, seed: u64) -> DMatrix<f64> {
    let a = gaussian(n, n + 3, seed);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

fn matrix(g: &GainSpec<f64>) -> DMatrix<f64> {
    g.matrix().expect("optimal gains are matrices")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spd_solve_satisfies_its_system(n in 1usize..12, k in 1usize..5, seed in any::<u64>()) {
        let a = spd(n, seed);
        let b = gaussian(n, k, seed ^ 1);
        let (x, info) = spd_solve(&a, &b).unwrap();
        prop_assert!(info.ridge.is_none());
        prop_assert!((&a * &x - &b).amax() <= 1e-9 * b.amax().max(1.0) * info.condition);
    }

    #[test]
    fn optimal_gains_solve_the_normal_equations(
        m in 1usize..4,
        n in 1usize..5,
        r in 1usize..4,
        seed in any::<u64>(),
    ) {
        // Joint covariance of (gÛ_1..gÛ_M) is a principal block of an SPD matrix.
        let joint = spd(m * r, seed);
        let control = (0..m)
            .map(|i| (0..m).map(|k| joint.view((i * r, k * r), (r, r)).into_owned()).collect())
            .collect();
        let ancillary = (0..m).map(|i| spd(r, seed.wrapping_add(i as u64 + 1))).collect();
        let blocks = SurrogateCovariances { control, ancillary };
        let rhs: Vec<DMatrix<f64>> = (0..m).map(|i| gaussian(n, r, seed ^ (17 + i as u64))).collect();
        let gains = general_optimal_gain(&blocks, &rhs).unwrap();
        prop_assert!(gain_residual(&blocks, &rhs, &gains).unwrap() <= 1e-10);
    }

    #[test]
    fn exchangeable_surrogates_share_the_dense_solution(
        m in 1usize..5,
        r in 1usize..4,
        seed in any::<u64>(),
    ) {
        let c = spd(r, seed);
        let a = spd(r, seed ^ 2);
        let b = gaussian(3, r, seed ^ 3);
        let blocks = SurrogateCovariances { control: vec![vec![c.clone(); m]; m], ancillary: vec![a.clone(); m] };
        let gains = general_optimal_gain(&blocks, &vec![b.clone(); m]).unwrap();
        let system = blocks.assemble().unwrap();
        let stacked = DMatrix::from_fn(3, m * r, |i, j| b[(i, j % r)]);
        let dense = system.transpose().lu().solve(&stacked.transpose()).unwrap().transpose();
        for (i, g) in gains.iter().enumerate() {
            let s = matrix(g);
            let d = dense.columns(i * r, r);
            prop_assert!((&s - d).amax() <= 1e-9 * d.amax().max(1.0));
        }
    }

    #[test]
    fn equal_surrogate_means_leave_the_principal_mean(
        n in 1usize..8,
        big_n in 2usize..10,
        fraction in 0.05f64..1.0,
        seed in any::<u64>(),
    ) {
        let x = Ensemble::from_members(gaussian(n, big_n, seed)).unwrap();
        let u_hat = Ensemble::from_members(gaussian(n, big_n, seed ^ 5)).unwrap();
        // Same mean as the control, different members and size.
        let mean = u_hat.members().column_mean();
        let extra = gaussian(n, big_n + 3, seed ^ 6);
        let extra_mean = extra.column_mean();
        let anc = DMatrix::from_fn(n, big_n + 3, |i, j| extra[(i, j)] - extra_mean[i] + mean[i]);
        let u = Ensemble::from_members(anc).unwrap();
        let op = Identity { dim: n };
        let gain = GainSpec::FixedFraction(fraction);
        let pair = ControlPair { control: &u_hat, ancillary: &u, interpolation: &op, gain: &gain };
        let z = total_variate_mean(&x, &[pair]).unwrap();
        let xbar = x.members().column_mean();
        prop_assert!((z.values() - &xbar).amax() <= 1e-12);
    }

    #[test]
    fn inflation_scales_anomalies(n in 1usize..10, big_n in 2usize..10, alpha in 1.0f64..2.0, seed in any::<u64>()) {
        let e = Ensemble::from_members(gaussian(n, big_n, seed)).unwrap();
        let f = inflate(&e, alpha).unwrap();
        let mean = e.members().column_mean();
        for j in 0..big_n {
            let want = (e.members().column(j) - &mean) * alpha;
            let got = f.members().column(j) - &mean;
            prop_assert!((got - want).amax() <= 1e-12);
        }
    }
}
