use std::f64::consts::PI;

use mfenkf::models::pod::{build_pod, pod_rhs, SnapshotSet};
use mfenkf::models::qg::{Qg, QgConfig, DAY};
use nalgebra::{DMatrix, DVector};

const LA: f64 = 5.0 * PI * PI / 4.0;
const LB: f64 = 5.0 * PI * PI;

/// ψ = A + B/2 with A = sin(πx) sin(πy/2), B = sin(2πx) sin(πy). Both are
/// Laplacian eigenfunctions vanishing on the boundary, so ω = λ_A A + λ_B B/2
/// and J(ψ, ω) reduces to a multiple of the Jacobian of A and B.
fn manufactured(cfg: &QgConfig) -> (Vec<f64>, Vec<f64>) {
    let mut psi = Vec::new();
    let mut omega_t = Vec::new();
    for k in 0..cfg.dim() {
        let (x, y) = cfg.point(k);
        let a = (PI * x).sin() * (PI * y / 2.0).sin();
        let b = (2.0 * PI * x).sin() * (PI * y).sin();
        let ax = PI * (PI * x).cos() * (PI * y / 2.0).sin();
        let ay = PI / 2.0 * (PI * x).sin() * (PI * y / 2.0).cos();
        let bx = 2.0 * PI * (2.0 * PI * x).cos() * (PI * y).sin();
        let by = PI * (2.0 * PI * x).sin() * (PI * y).cos();
        psi.push(a + 0.5 * b);
        let advection = 0.5 * (LB - LA) * (ax * by - ay * bx);
        let beta = (ax + 0.5 * bx) / cfg.rossby;
        let viscous = -(LA * LA * a + 0.5 * LB * LB * b) / cfg.reynolds;
        let forcing = (PI * (y - 1.0)).sin() / cfg.rossby;
        omega_t.push(advection + beta + viscous + forcing);
    }
    (psi, omega_t)
}

fn max_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn manufactured_solution_converges_at_second_order() {
    let grids = [(15, 31), (31, 63), (63, 127)];
    let errs: Vec<f64> = grids
        .iter()
        .map(|&(nx, ny)| {
            let cfg = QgConfig::new(nx, ny, 450.0);
            let (psi, exact) = manufactured(&cfg);
            max_err(&Qg::new(cfg).unwrap().vorticity_tendency(&psi), &exact)
        })
        .collect();
    for w in errs.windows(2) {
        let slope = (w[0] / w[1]).log2();
        assert!(slope >= 1.9, "slope {slope} from {errs:?}");
    }
}

#[test]
fn streamfunction_tendency_converges() {
    // The ψ tendency inverts the vorticity tendency; compare against the
    // discrete inverse of the exact vorticity tendency on nested grids.
    let mut errs = Vec::new();
    for (nx, ny) in [(15, 31), (31, 63), (63, 127)] {
        let cfg = QgConfig::new(nx, ny, 450.0);
        let qg = Qg::new(cfg.clone()).unwrap();
        let (psi, exact) = manufactured(&cfg);
        let t = qg.rhs(DVector::from_vec(psi).as_view()).unwrap();
        errs.push(max_err(t.as_slice(), &qg.invert(&exact)));
    }
    assert!(errs[0] / errs[2] > 12.0, "{errs:?}");
}

fn spun_up(cfg: &QgConfig, windows: usize) -> DVector<f64> {
    let qg = Qg::new(cfg.clone()).unwrap();
    let mut psi = DVector::zeros(cfg.dim());
    for _ in 0..windows {
        psi = qg.step(psi.as_view(), DAY).unwrap();
    }
    psi
}

#[test]
fn inviscid_unforced_flow_conserves_energy_and_enstrophy() {
    let desk = QgConfig::desk(450.0);
    let psi = spun_up(&desk, 300);
    let cfg = QgConfig::inviscid_unforced(31, 63);
    let qg = Qg::new(cfg.clone()).unwrap();
    let step = DAY / desk.substeps as f64;
    let mut p = psi;
    for _ in 0..20 {
        let e0 = qg.energy(p.as_slice());
        let z0 = qg.enstrophy(p.as_slice());
        let next = qg.step(p.as_view(), step).unwrap();
        let de = (qg.energy(next.as_slice()) - e0).abs() / e0;
        let dz = (qg.enstrophy(next.as_slice()) - z0).abs() / z0;
        assert!(
            de <= 1e-8 && dz <= 1e-8,
            "energy drift {de:e}, enstrophy drift {dz:e}"
        );
        p = next;
    }
}

#[test]
fn full_grid_energy_stays_bounded() {
    let cfg = QgConfig::full(450.0);
    let qg = Qg::new(cfg.clone()).unwrap();
    let mut psi = DVector::zeros(cfg.dim());
    let mut peak: f64 = 0.0;
    for _ in 0..350 {
        psi = qg.step(psi.as_view(), DAY).unwrap();
        peak = peak.max(qg.energy(psi.as_slice()));
    }
    assert!(peak.is_finite() && peak < 1e5, "peak energy {peak}");
}

#[test]
fn galerkin_model_is_the_exact_projection() {
    let base = QgConfig::new(15, 31, 450.0);
    let qg = Qg::new(base.clone()).unwrap();
    let mut psi = DVector::zeros(base.dim());
    let mut cols = Vec::new();
    for w in 0..200 {
        psi = qg.step(psi.as_view(), DAY).unwrap();
        if w % 5 == 4 {
            cols.push(psi.clone());
        }
    }
    let snaps = SnapshotSet::new(DMatrix::from_columns(&cols), Some(5.0 * DAY));
    for advection in [false, true] {
        for center in [false, true] {
            let cfg = QgConfig {
                advection,
                ..base.clone()
            };
            let basis = build_pod(&snaps, 6, center, &cfg).unwrap();
            let full = Qg::new(cfg).unwrap();
            let phi = basis.phi_operator();
            for s in 0..4 {
                let u = DVector::from_fn(6, |i, _| ((i + 2 * s) as f64 * 0.7).sin() * 3.0);
                let reduced = pod_rhs(u.as_view(), &basis);
                let lifted = phi.apply(u.as_view());
                let projected = basis.phi.tr_mul(&full.rhs(lifted.as_view()).unwrap());
                let err = (&reduced - &projected).amax() / projected.amax();
                assert!(
                    err < 1e-10,
                    "advection {advection}, center {center}: {err:e}"
                );
            }
            let ptp = basis.phi.tr_mul(&basis.phi);
            assert!((ptp - DMatrix::identity(6, 6)).amax() < 1e-10);
        }
    }
}
