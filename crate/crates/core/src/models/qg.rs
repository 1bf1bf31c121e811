//! Wind-driven double-gyre quasi-geostrophic model on `[0,1] x [0,2]`.
//!
//! The prognostic state is the streamfunction `ψ` on the interior points of a
//! uniform grid, stored with `x` fastest: entry `i + nx * j` is the point
//! `(x_i, y_j) = ((i + 1) hx, (j + 1) hy)`. Both `ψ` and `ω = -Δψ` vanish on
//! the boundary. The vorticity equation is
//!
//! `ω_t = -J(ψ, ω) + Ro⁻¹ ψ_x + Re⁻¹ Δω + Ro⁻¹ F`, `J(ψ, ω) = ψ_y ω_x - ψ_x ω_y`,
//!
//! with double-gyre forcing `F = sin(π (y - 1))`.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DVector, DVectorView};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::operator::Model;

/// One day of model time.
pub const DAY: f64 = 0.0109;

/// Growth factor of `‖ψ‖` over one window treated as numerical blow-up.
pub const BLOWUP_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct QgConfig {
    pub nx: usize,
    pub ny: usize,
    /// Reynolds number; `f64::INFINITY` removes viscosity.
    pub reynolds: f64,
    pub rossby: f64,
    /// RK4 steps per assimilation window.
    pub substeps: usize,
    pub beta: bool,
    pub forcing: bool,
    pub advection: bool,
}

impl QgConfig {
    /// Defaults: Ro = 0.0036, all terms on, and `3 (nx + 1) / 4` RK4
    /// substeps per day-long window (at least 8), which keeps the advective
    /// Courant number of the western boundary current below the RK4 limit.
    pub fn new(nx: usize, ny: usize, reynolds: f64) -> Self {
        Self {
            nx,
            ny,
            reynolds,
            rossby: 0.0036,
            substeps: (3 * (nx + 1) / 4).max(8),
            beta: true,
            forcing: true,
            advection: true,
        }
    }

    /// The 63 x 127 grid.
    pub fn full(reynolds: f64) -> Self {
        Self::new(63, 127, reynolds)
    }

    /// The 31 x 63 grid used for desk-scale runs.
    pub fn desk(reynolds: f64) -> Self {
        Self::new(31, 63, reynolds)
    }

    /// No forcing, no beta term, no viscosity: only advection remains.
    pub fn inviscid_unforced(nx: usize, ny: usize) -> Self {
        Self {
            beta: false,
            forcing: false,
            ..Self::new(nx, ny, f64::INFINITY)
        }
    }

    pub fn dim(&self) -> usize {
        self.nx * self.ny
    }

    pub fn hx(&self) -> f64 {
        1.0 / (self.nx + 1) as f64
    }

    pub fn hy(&self) -> f64 {
        2.0 / (self.ny + 1) as f64
    }

    /// Coordinates of interior point `k`.
    pub fn point(&self, k: usize) -> (f64, f64) {
        let (i, j) = (k % self.nx, k / self.nx);
        ((i + 1) as f64 * self.hx(), (j + 1) as f64 * self.hy())
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::InvalidArgument(format!(
                "QG grid {}x{} too small",
                self.nx, self.ny
            )));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidArgument(
                "QG needs at least one substep".into(),
            ));
        }
        if !(self.rossby > 0.0) || !(self.reynolds > 0.0) {
            return Err(Error::InvalidArgument(
                "Rossby and Reynolds numbers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Discrete sine transform (type I) of many lines of equal length via a
/// complex FFT of the odd extension. Two real lines share one complex
/// transform, one in the real part and one in the imaginary part.
struct Dst {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Dst {
    fn new(n: usize, planner: &mut FftPlanner<f64>) -> Self {
        Self {
            n,
            fft: planner.plan_fft_forward(2 * (n + 1)),
        }
    }

    /// Transforms `lines` contiguous lines of length `n` in place.
    fn apply(&self, data: &mut [f64], lines: usize) {
        let n = self.n;
        let m = 2 * (n + 1);
        let pairs = lines.div_ceil(2);
        let mut buf = vec![Complex::new(0.0, 0.0); m * pairs];
        for p in 0..pairs {
            let dst = &mut buf[p * m..(p + 1) * m];
            for j in 0..n {
                let v = data[2 * p * n + j];
                dst[j + 1].re = v;
                dst[m - 1 - j].re = -v;
            }
            if 2 * p + 1 < lines {
                for j in 0..n {
                    let v = data[(2 * p + 1) * n + j];
                    dst[j + 1].im = v;
                    dst[m - 1 - j].im = -v;
                }
            }
        }
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        self.fft.process_with_scratch(&mut buf, &mut scratch);
        for p in 0..pairs {
            let z = &buf[p * m..(p + 1) * m];
            for k in 1..=n {
                data[2 * p * n + k - 1] = -0.25 * (z[k].im - z[m - k].im);
            }
            if 2 * p + 1 < lines {
                for k in 1..=n {
                    data[(2 * p + 1) * n + k - 1] = 0.25 * (z[k].re - z[m - k].re);
                }
            }
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Solver for `-Δ_h u = f` with homogeneous Dirichlet data, diagonalized by
/// sine transforms in both directions.
struct Poisson {
    nx: usize,
    ny: usize,
    dst_x: Dst,
    dst_y: Dst,
    /// Scaled inverse eigenvalues of `-Δ_h`, y fastest.
    inv_eig: Vec<f64>,
}

impl Poisson {
    fn new(cfg: &QgConfig) -> Self {
        let (nx, ny) = (cfg.nx, cfg.ny);
        let mut planner = FftPlanner::new();
        let (hx, hy) = (cfg.hx(), cfg.hy());
        let scale = 4.0 / ((nx + 1) * (ny + 1)) as f64;
        let mut inv_eig = Vec::with_capacity(nx * ny);
        for p in 1..=nx {
            let sx = (p as f64 * PI / (2 * (nx + 1)) as f64).sin();
            for q in 1..=ny {
                let sy = (q as f64 * PI / (2 * (ny + 1)) as f64).sin();
                inv_eig.push(scale / (4.0 * sx * sx / (hx * hx) + 4.0 * sy * sy / (hy * hy)));
            }
        }
        Self {
            nx,
            ny,
            dst_x: Dst::new(nx, &mut planner),
            dst_y: Dst::new(ny, &mut planner),
            inv_eig,
        }
    }

    fn solve(&self, f: &[f64]) -> Vec<f64> {
        let mut a = f.to_vec();
        self.dst_x.apply(&mut a, self.ny);
        let mut t = transpose(&a, self.ny, self.nx);
        self.dst_y.apply(&mut t, self.nx);
        for (v, w) in t.iter_mut().zip(&self.inv_eig) {
            *v *= w;
        }
        self.dst_y.apply(&mut t, self.nx);
        let mut a = transpose(&t, self.nx, self.ny);
        self.dst_x.apply(&mut a, self.ny);
        a
    }
}

/// Zero-padded copy of an interior field, `(nx + 2) x (ny + 2)`, x fastest.
fn pad(f: &[f64], nx: usize, ny: usize) -> Vec<f64> {
    let w = nx + 2;
    let mut p = vec![0.0; w * (ny + 2)];
    for j in 0..ny {
        p[(j + 1) * w + 1..(j + 1) * w + 1 + nx].copy_from_slice(&f[j * nx..(j + 1) * nx]);
    }
    p
}

/// 5-point Laplacian with zero boundary values.
pub fn laplacian(f: &[f64], cfg: &QgConfig) -> Vec<f64> {
    let (nx, ny) = (cfg.nx, cfg.ny);
    let (ax, ay) = (1.0 / (cfg.hx() * cfg.hx()), 1.0 / (cfg.hy() * cfg.hy()));
    let w = nx + 2;
    let p = pad(f, nx, ny);
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let c = (j + 1) * w + i + 1;
            out[j * nx + i] =
                (p[c + 1] - 2.0 * p[c] + p[c - 1]) * ax + (p[c + w] - 2.0 * p[c] + p[c - w]) * ay;
        }
    }
    out
}

/// Arakawa's energy- and enstrophy-conserving approximation of
/// `a_x b_y - a_y b_x`, with both fields zero on the boundary.
pub fn arakawa_jacobian(a: &[f64], b: &[f64], cfg: &QgConfig) -> Vec<f64> {
    let (nx, ny) = (cfg.nx, cfg.ny);
    let w = nx + 2;
    let pa = pad(a, nx, ny);
    let pb = pad(b, nx, ny);
    let scale = 1.0 / (12.0 * cfg.hx() * cfg.hy());
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let c = (j + 1) * w + i + 1;
            let (e, wv, n, s) = (c + 1, c - 1, c + w, c - w);
            let (ne, nw, se, sw) = (n + 1, n - 1, s + 1, s - 1);
            let j1 = (pa[e] - pa[wv]) * (pb[n] - pb[s]) - (pa[n] - pa[s]) * (pb[e] - pb[wv]);
            let j2 =
                pa[e] * (pb[ne] - pb[se]) - pa[wv] * (pb[nw] - pb[sw]) - pa[n] * (pb[ne] - pb[nw])
                    + pa[s] * (pb[se] - pb[sw]);
            let j3 =
                pa[ne] * (pb[n] - pb[e]) - pa[sw] * (pb[wv] - pb[s]) - pa[nw] * (pb[n] - pb[wv])
                    + pa[se] * (pb[e] - pb[s]);
            out[j * nx + i] = (j1 + j2 + j3) * scale;
        }
    }
    out
}

/// Centered `∂f/∂x` with zero boundary values.
pub fn ddx(f: &[f64], cfg: &QgConfig) -> Vec<f64> {
    let (nx, ny) = (cfg.nx, cfg.ny);
    let w = nx + 2;
    let p = pad(f, nx, ny);
    let s = 0.5 / cfg.hx();
    let mut out = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let c = (j + 1) * w + i + 1;
            out[j * nx + i] = (p[c + 1] - p[c - 1]) * s;
        }
    }
    out
}

/// Grid function `sin(π (y - 1))`.
pub fn double_gyre_forcing(cfg: &QgConfig) -> Vec<f64> {
    (0..cfg.dim())
        .map(|k| {
            let (_, y) = cfg.point(k);
            (PI * (y - 1.0)).sin()
        })
        .collect()
}

/// Precomputed QG operators for one configuration.
pub struct Qg {
    cfg: QgConfig,
    poisson: Poisson,
    forcing: Vec<f64>,
}

impl std::fmt::Debug for Qg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Qg").field("cfg", &self.cfg).finish()
    }
}

impl Qg {
    pub fn new(cfg: QgConfig) -> Result<Self> {
        cfg.validate()?;
        let poisson = Poisson::new(&cfg);
        let forcing = double_gyre_forcing(&cfg);
        Ok(Self {
            cfg,
            poisson,
            forcing,
        })
    }

    pub fn config(&self) -> &QgConfig {
        &self.cfg
    }

    /// `ω = -Δ_h ψ`.
    pub fn vorticity(&self, psi: &[f64]) -> Vec<f64> {
        laplacian(psi, &self.cfg).into_iter().map(|v| -v).collect()
    }

    /// Solves `-Δ_h ψ = ω`.
    pub fn invert(&self, omega: &[f64]) -> Vec<f64> {
        self.poisson.solve(omega)
    }

    /// Linear part of the vorticity tendency: beta and viscous terms.
    pub fn linear_vorticity_tendency(&self, psi: &[f64]) -> Vec<f64> {
        let cfg = &self.cfg;
        let mut out = vec![0.0; cfg.dim()];
        if cfg.beta {
            for (o, d) in out.iter_mut().zip(ddx(psi, cfg)) {
                *o += d / cfg.rossby;
            }
        }
        if cfg.reynolds.is_finite() {
            let lap_omega = laplacian(&self.vorticity(psi), cfg);
            for (o, l) in out.iter_mut().zip(lap_omega) {
                *o += l / cfg.reynolds;
            }
        }
        out
    }

    /// Quadratic part `-J(a, -Δ b) = J_std(a, ω_b)` of the vorticity
    /// tendency, zero when advection is disabled.
    pub fn advection(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        if !self.cfg.advection {
            return vec![0.0; self.cfg.dim()];
        }
        arakawa_jacobian(a, &self.vorticity(b), &self.cfg)
    }

    /// Constant part `Ro⁻¹ F`.
    pub fn forcing_tendency(&self) -> Vec<f64> {
        if self.cfg.forcing {
            self.forcing.iter().map(|f| f / self.cfg.rossby).collect()
        } else {
            vec![0.0; self.cfg.dim()]
        }
    }

    /// Full vorticity tendency `ω_t` for streamfunction `ψ`.
    pub fn vorticity_tendency(&self, psi: &[f64]) -> Vec<f64> {
        let cfg = &self.cfg;
        let omega = self.vorticity(psi);
        let mut out = if cfg.advection {
            arakawa_jacobian(psi, &omega, cfg)
        } else {
            vec![0.0; cfg.dim()]
        };
        if cfg.beta {
            for (o, d) in out.iter_mut().zip(ddx(psi, cfg)) {
                *o += d / cfg.rossby;
            }
        }
        if cfg.reynolds.is_finite() {
            for (o, l) in out.iter_mut().zip(laplacian(&omega, cfg)) {
                *o += l / cfg.reynolds;
            }
        }
        if cfg.forcing {
            for (o, f) in out.iter_mut().zip(&self.forcing) {
                *o += f / cfg.rossby;
            }
        }
        out
    }

    /// Streamfunction tendency `ψ_t = (-Δ_h)⁻¹ ω_t`.
    pub fn rhs(&self, psi: DVectorView<'_, f64>) -> Result<DVector<f64>> {
        if psi.len() != self.cfg.dim() {
            return Err(Error::DimensionMismatch {
                context: "QG state",
                expected: self.cfg.dim(),
                found: psi.len(),
            });
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("QG streamfunction"));
        }
        let psi: Vec<f64> = psi.iter().copied().collect();
        Ok(DVector::from_vec(
            self.invert(&self.vorticity_tendency(&psi)),
        ))
    }

    /// Advances `ψ` by `window` with `substeps` RK4 steps.
    pub fn step(&self, psi: DVectorView<'_, f64>, window: f64) -> Result<DVector<f64>> {
        let mut y = psi.into_owned();
        if window == 0.0 {
            return Ok(y);
        }
        let start = y.norm().max(1.0);
        let h = window / self.cfg.substeps as f64;
        for _ in 0..self.cfg.substeps {
            let k1 = self.rhs(y.as_view())?;
            let k2 = self.rhs((&y + &k1 * (0.5 * h)).as_view())?;
            let k3 = self.rhs((&y + &k2 * (0.5 * h)).as_view())?;
            let k4 = self.rhs((&y + &k3 * h).as_view())?;
            y += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            let norm = y.norm();
            if !norm.is_finite() || norm > BLOWUP_FACTOR * start {
                return Err(Error::Diverged(format!(
                    "QG streamfunction norm reached {norm:.3e}; reduce the internal step"
                )));
            }
        }
        Ok(y)
    }

    /// Discrete energy `½ Σ ψ ω hx hy`.
    pub fn energy(&self, psi: &[f64]) -> f64 {
        let omega = self.vorticity(psi);
        0.5 * psi.iter().zip(&omega).map(|(a, b)| a * b).sum::<f64>()
            * self.cfg.hx()
            * self.cfg.hy()
    }

    /// Discrete enstrophy `½ Σ ω² hx hy`.
    pub fn enstrophy(&self, psi: &[f64]) -> f64 {
        let omega = self.vorticity(psi);
        0.5 * omega.iter().map(|w| w * w).sum::<f64>() * self.cfg.hx() * self.cfg.hy()
    }
}

impl Model<f64> for Qg {
    fn dim(&self) -> usize {
        self.cfg.dim()
    }

    fn advance(
        &self,
        x: DVectorView<'_, f64>,
        dt: f64,
    ) -> std::result::Result<DVector<f64>, String> {
        self.step(x, dt).map_err(|e| e.to_string())
    }
}

/// `∂ψ/∂t` for a single evaluation. Builds the transform plans each call;
/// hold a [`Qg`] to evaluate repeatedly.
pub fn qg_rhs(psi: DVectorView<'_, f64>, cfg: &QgConfig) -> Result<DVector<f64>> {
    Qg::new(cfg.clone())?.rhs(psi)
}

/// Advances `ψ` by one window.
pub fn qg_step(psi: DVectorView<'_, f64>, cfg: &QgConfig, window: f64) -> Result<DVector<f64>> {
    Qg::new(cfg.clone())?.step(psi, window)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(cfg: &QgConfig, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..cfg.dim())
            .map(|k| {
                let (x, y) = cfg.point(k);
                f(x, y)
            })
            .collect()
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    #[test]
    fn poisson_inverts_the_laplacian() {
        let cfg = QgConfig::new(15, 31, 450.0);
        let qg = Qg::new(cfg.clone()).unwrap();
        let f = field(&cfg, |x, y| (3.0 * x + y * y).cos() + x * y);
        let u = qg.invert(&f);
        let back: Vec<f64> = laplacian(&u, &cfg).iter().map(|v| -v).collect();
        let err: Vec<f64> = back.iter().zip(&f).map(|(a, b)| a - b).collect();
        assert!(max_abs(&err) < 1e-11, "{}", max_abs(&err));
    }

    #[test]
    fn dst_matches_direct_sum() {
        let mut planner = FftPlanner::new();
        let n = 7;
        let d = Dst::new(n, &mut planner);
        for lines in [1, 2, 3] {
            let x: Vec<f64> = (0..n * lines)
                .map(|j| (j as f64 * 0.37).sin() + 0.1)
                .collect();
            let mut y = x.clone();
            d.apply(&mut y, lines);
            for l in 0..lines {
                for k in 0..n {
                    let direct: f64 = (0..n)
                        .map(|j| {
                            x[l * n + j] * (PI * ((j + 1) * (k + 1)) as f64 / (n + 1) as f64).sin()
                        })
                        .sum();
                    assert!((y[l * n + k] - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_state_tendency_is_forcing_only() {
        let cfg = QgConfig::new(15, 31, 450.0);
        let qg = Qg::new(cfg.clone()).unwrap();
        let t = qg.rhs(DVector::zeros(cfg.dim()).as_view()).unwrap();
        let forcing: Vec<f64> = double_gyre_forcing(&cfg)
            .iter()
            .map(|f| f / cfg.rossby)
            .collect();
        let expected = qg.invert(&forcing);
        assert!(t.amax() > 1.0);
        assert!((t - DVector::from_vec(expected)).amax() < 1e-12);
    }

    #[test]
    fn proportional_fields_have_zero_jacobian() {
        let cfg = QgConfig::new(15, 31, 450.0);
        let a = field(&cfg, |x, y| (PI * x).sin() * (1.3 * y).sin() + x * x * y);
        let b: Vec<f64> = a.iter().map(|v| -2.5 * v).collect();
        assert!(max_abs(&arakawa_jacobian(&a, &b, &cfg)) < 1e-9);
        assert!(max_abs(&arakawa_jacobian(&a, &a, &cfg)) < 1e-9);
    }

    #[test]
    fn jacobian_is_antisymmetric_and_conservative() {
        let cfg = QgConfig::new(15, 31, 450.0);
        let a = field(&cfg, |x, y| {
            (PI * x).sin() * (PI * y / 2.0).sin() * (1.0 + x * y)
        });
        let b = field(&cfg, |x, y| {
            (2.0 * PI * x).sin() * (PI * y).sin() + (PI * x).sin() * (1.5 * PI * y).sin()
        });
        let ab = arakawa_jacobian(&a, &b, &cfg);
        let ba = arakawa_jacobian(&b, &a, &cfg);
        let sum: Vec<f64> = ab.iter().zip(&ba).map(|(x, y)| x + y).collect();
        assert!(max_abs(&sum) < 1e-9);
        let dot_a: f64 = a.iter().zip(&ab).map(|(x, y)| x * y).sum();
        let dot_b: f64 = b.iter().zip(&ab).map(|(x, y)| x * y).sum();
        let scale = max_abs(&ab) * cfg.dim() as f64;
        assert!(dot_a.abs() < 1e-12 * scale, "{dot_a}");
        assert!(dot_b.abs() < 1e-12 * scale, "{dot_b}");
    }

    #[test]
    fn zero_window_is_identity_and_nan_is_rejected() {
        let cfg = QgConfig::new(15, 31, 450.0);
        let qg = Qg::new(cfg.clone()).unwrap();
        let psi = DVector::from_vec(field(&cfg, |x, y| (PI * x).sin() * (PI * y / 2.0).sin()));
        assert_eq!(qg.step(psi.as_view(), 0.0).unwrap(), psi);
        let mut bad = psi.clone();
        bad[3] = f64::NAN;
        assert!(qg.rhs(bad.as_view()).is_err());
        assert!(qg.step(bad.as_view(), DAY).is_err());
        assert!(qg.rhs(DVector::zeros(4).as_view()).is_err());
    }

    #[test]
    fn halving_the_internal_step_barely_changes_a_window() {
        let cfg = QgConfig::new(15, 31, 450.0);
        let coarse = Qg::new(cfg.clone()).unwrap();
        let fine = Qg::new(QgConfig {
            substeps: 2 * cfg.substeps,
            ..cfg.clone()
        })
        .unwrap();
        let psi = DVector::from_vec(field(&cfg, |x, y| {
            0.1 * (PI * x).sin() * (PI * y / 2.0).sin()
                + 0.05 * (2.0 * PI * x).sin() * (3.0 * PI * y / 2.0).sin()
        }));
        let a = coarse.step(psi.as_view(), DAY).unwrap();
        let b = fine.step(psi.as_view(), DAY).unwrap();
        assert!(
            (&a - &b).norm() <= 1e-6 * a.norm(),
            "{}",
            (&a - &b).norm() / a.norm()
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Qg::new(QgConfig::new(1, 31, 450.0)).is_err());
        assert!(Qg::new(QgConfig {
            substeps: 0,
            ..QgConfig::new(15, 31, 450.0)
        })
        .is_err());
        assert!(Qg::new(QgConfig::new(15, 31, -1.0)).is_err());
    }
}
