//! Homoclinic persistence: the Melnikov profile with its fast-direction term,
//! the splitting of the perturbed manifolds measured by shooting to a section,
//! and the energy-matching connection of the conservative case.
//!
//! Shooting never searches for crossing times. A point is launched from a local
//! graph at chart time `t0 + τ` and flowed to time `t0`; the launch offsets `τ`
//! are unknowns of the Newton system and landing on the section is one of its
//! equations.

use std::f64::consts::PI;
use std::ops::{AddAssign, SubAssign};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{NespError, Result};
use crate::integrate::{integrate_full, integrate_limit, IntegratorOptions, Trajectory};
use crate::linalg::{op_norm, DichotomySplit};
use crate::manifold::{solve_center_graph, solve_graph, LpConfig, ManifoldKind};
use crate::model::SlowFastSystem;
use crate::quadrature::{integrate, QuadConfig};
use crate::systems::ClosedFormOrbit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OrbitSource {
    ClosedForm,
    Shooting,
}

type OrbitFn = dyn Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync;

/// Homoclinic orbit `x_h` of the limit system, possibly closing modulo a lattice shift.
#[derive(Clone)]
pub struct HomoclinicOrbit {
    eval: Arc<OrbitFn>,
    /// Anchor `x_h(0)`.
    pub x0: DVector<f64>,
    /// Equilibrium approached as `t → +∞` (the origin approached as `t → −∞`).
    pub exit_shift: DVector<f64>,
    /// Rates of approach as `t → −∞` and `t → +∞`.
    pub rates: (f64, f64),
    pub source: OrbitSource,
}

impl std::fmt::Debug for HomoclinicOrbit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HomoclinicOrbit")
            .field("x0", &self.x0.as_slice())
            .field("exit_shift", &self.exit_shift.as_slice())
            .field("rates", &self.rates)
            .field("source", &self.source)
            .finish()
    }
}

impl HomoclinicOrbit {
    /// `(x_h(t), ẋ_h(t))`.
    pub fn eval(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        (self.eval)(t)
    }

    pub fn state(&self, t: f64) -> DVector<f64> {
        (self.eval)(t).0
    }

    /// Offset from the equilibrium the orbit approaches on the side of `t`.
    pub fn offset(&self, t: f64) -> DVector<f64> {
        let x = self.state(t);
        if t >= 0.0 {
            x - &self.exit_shift
        } else {
            x
        }
    }

    /// Max of `|ẋ_h − (A x_h + f(x_h, 0, t, 0))|` on `n + 1` points of `[−t_max, t_max]`.
    pub fn residual(&self, sys: &SlowFastSystem, t_max: f64, n: usize) -> Result<f64> {
        let y0 = vec![0.0; sys.n_y];
        let mut worst: f64 = 0.0;
        for i in 0..=n {
            let t = -t_max + 2.0 * t_max * i as f64 / n as f64;
            let (x, dx) = self.eval(t);
            let rhs = &sys.a * &x + sys.f_vec(x.as_slice(), &y0, t, 0.0)?;
            worst = worst.max((rhs - dx).amax());
        }
        Ok(worst)
    }

    /// Least-squares decay rates of `|x_h − equilibrium|` on `[−12, −6]` and `[6, 12]`.
    pub fn fitted_rates(&self) -> (f64, f64) {
        let fit = |sign: f64| {
            let pts: Vec<(f64, f64)> =
                (0..=60).map(|i| 6.0 + 0.1 * i as f64).map(|s| (s, self.offset(sign * s).norm().ln())).collect();
            let m = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            -sxy / sxx
        };
        (fit(-1.0), fit(1.0))
    }
}

/// Wrap a closed-form orbit after checking its ODE residual to `1e-9` on `[−10, 10]`.
pub fn homoclinic_closed_form(sys: &SlowFastSystem, orbit: &ClosedFormOrbit) -> Result<HomoclinicOrbit> {
    let eval = orbit.eval.clone();
    let h = HomoclinicOrbit {
        x0: eval(0.0).0,
        eval,
        exit_shift: orbit.exit_shift.clone(),
        rates: orbit.rates,
        source: OrbitSource::ClosedForm,
    };
    if h.x0.len() != sys.n_x || h.exit_shift.len() != sys.n_x {
        return Err(NespError::Dimension("homoclinic orbit does not match the slow dimension".into()));
    }
    let r = h.residual(sys, 10.0, 400)?;
    if r > 1e-9 {
        return Err(NespError::Model(format!("closed-form homoclinic residual {r:.3e} exceeds 1e-9")));
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShootingConfig {
    /// Launch offset along the unstable eigenvector.
    pub delta0: f64,
    /// `+1` or `−1`: which branch of the unstable manifold.
    pub branch: f64,
    pub t_max: f64,
    /// Largest admissible distance from the arrival equilibrium's stable manifold.
    pub miss_tol: f64,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig { delta0: 1e-6, branch: 1.0, t_max: 60.0, miss_tol: 1e-6 }
    }
}

fn limit_rhs(sys: &SlowFastSystem, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    Ok(&sys.a * x + sys.f_vec(x.as_slice(), &vec![0.0; sys.n_y], t, 0.0)?)
}

/// Offset from the arrival equilibrium below which the orbit is continued by the linear flow.
const ARRIVAL_OFFSET: f64 = 1e-4;

/// Homoclinic orbit by shooting along the one-dimensional unstable manifold of the
/// limit system. Time zero is the midpoint crossing for orbits closing modulo a
/// shift and the point farthest from the equilibrium otherwise.
pub fn homoclinic_shooting(sys: &SlowFastSystem, split: &DichotomySplit, cfg: &ShootingConfig) -> Result<HomoclinicOrbit> {
    if split.dim_u() != 1 {
        return Err(NespError::Assumption(format!(
            "shooting needs a one-dimensional unstable space, found {}",
            split.dim_u()
        )));
    }
    let mut e = split.v_u.column(0).into_owned();
    e /= e.norm();
    if e.iter().find(|v| v.abs() > 1e-12).copied().unwrap_or(1.0) < 0.0 {
        e = -e;
    }
    let xi = e * (cfg.delta0 * cfg.branch.signum());
    let lp = LpConfig::default();
    let launch = solve_graph(sys, split, ManifoldKind::Unstable, xi.as_slice(), &[], 0.0, 0.0, &lp, true)?.point;
    let launch = launch.rows(0, sys.n_x).into_owned();
    // Short steps keep the dense output accurate enough to locate the speed maximum.
    let opts = IntegratorOptions { h_max: 0.02, ..IntegratorOptions::tight() };
    let traj = integrate_limit(sys, launch.as_slice(), 0.0, cfg.t_max, 0.0, &opts)?;
    // Speed along the orbit: one maximum on the excursion, then a minimum near the arrival equilibrium.
    let speeds: Vec<(f64, f64, DVector<f64>)> = (0..traj.len())
        .map(|k| {
            let x = DVector::from_vec(traj.node(k));
            let v = limit_rhs(sys, &x, traj.t[k]).map(|v| v.norm()).unwrap_or(f64::NAN);
            (traj.t[k], v, x)
        })
        .collect();
    // First speed maximum: the excursion. Later maxima belong to drift off the arrival saddle.
    let k_max = (1..speeds.len().saturating_sub(1))
        .find(|&k| speeds[k + 1].1 < speeds[k].1 && speeds[k].1 > 1e3 * cfg.delta0)
        .ok_or_else(|| NespError::NoConvergence("the shooting orbit has no excursion within t_max".into()))?;
    // First local speed minimum after the maximum; the flow later drifts off the saddle.
    let k_min = (k_max + 1..speeds.len().saturating_sub(1))
        .find(|&k| speeds[k + 1].1 > speeds[k].1)
        .unwrap_or(speeds.len() - 1);
    // Arrival equilibrium by Newton from the slowest point.
    let mut x_e = speeds[k_min].2.clone();
    for _ in 0..50 {
        let r = limit_rhs(sys, &x_e, 0.0)?;
        let mut jac = DMatrix::zeros(sys.n_x, sys.n_x);
        for i in 0..sys.n_x {
            let mut p = x_e.clone();
            let mut m = x_e.clone();
            p[i] += 1e-7;
            m[i] -= 1e-7;
            jac.set_column(i, &((limit_rhs(sys, &p, 0.0)? - limit_rhs(sys, &m, 0.0)?) / 2e-7));
        }
        let step = jac.lu().solve(&r).ok_or_else(|| NespError::Singular("arrival equilibrium Jacobian".into()))?;
        x_e -= &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    if limit_rhs(sys, &x_e, 0.0)?.amax() > 1e-10 {
        return Err(NespError::NoConvergence("no arrival equilibrium found by shooting".into()));
    }
    // Hand over to the linear flow once the offset is small enough that the
    // quadratic remainder is negligible.
    let mut t_arr = speeds[k_min].0;
    let mut t = speeds[k_max].0;
    while t < speeds[k_min].0 {
        let x = DVector::from_vec(traj.state_at(t)?);
        if (&x - &x_e).norm() < ARRIVAL_OFFSET {
            t_arr = t;
            break;
        }
        t += 0.01;
    }
    let miss = (&split.p_u * (DVector::from_vec(traj.state_at(t_arr)?) - &x_e)).norm();
    if miss > cfg.miss_tol {
        return Err(NespError::NoConvergence(format!(
            "shooting misses the stable manifold of the arrival equilibrium by {miss:.3e}"
        )));
    }
    // Time origin: the midpoint crossing when the orbit closes modulo a shift, else
    // the farthest point from the equilibrium. (The speed maximum can be degenerate.)
    let x_at = |t: f64| DVector::from_vec(traj.state_at(t).unwrap_or_else(|_| vec![f64::NAN; sys.n_x]));
    let t_star = if x_e.norm() > 1e-8 {
        let phi = |t: f64| (x_at(t) - &x_e * 0.5).dot(&x_e);
        let k = (1..=k_min)
            .find(|&k| phi(speeds[k - 1].0) * phi(speeds[k].0) <= 0.0)
            .ok_or_else(|| NespError::NoCrossing("the shooting orbit never reaches the midpoint".into()))?;
        let (mut a, mut b) = (speeds[k - 1].0, speeds[k].0);
        let fa = phi(a);
        while b - a > 1e-13 {
            let m = 0.5 * (a + b);
            if phi(m) * fa > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    } else {
        let k_far = (0..=k_min).max_by(|&i, &j| speeds[i].2.norm().total_cmp(&speeds[j].2.norm())).unwrap_or(0);
        let (mut a, mut b) = (speeds[k_far.saturating_sub(1)].0, speeds[(k_far + 1).min(k_min)].0);
        let gr = 0.5 * (5f64.sqrt() - 1.0);
        while b - a > 1e-12 {
            let c = b - gr * (b - a);
            let d = a + gr * (b - a);
            if x_at(c).norm() > x_at(d).norm() {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    };

    let lam_u = split.spec_u.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let lam_s = split.spec_s.iter().map(|z| -z.re).fold(f64::INFINITY, f64::min);
    let x_arr = DVector::from_vec(traj.state_at(t_arr)?);
    let tail = &split.p_s * (&x_arr - &x_e);
    let a_f = split.a_f.clone();
    let (sys2, xe2, launch2) = (sys.clone(), x_e.clone(), launch.clone());
    let traj = Arc::new(traj);
    let eval = move |t: f64| -> (DVector<f64>, DVector<f64>) {
        let s = t + t_star;
        let x = if s < 0.0 {
            &launch2 * (lam_u * s).exp()
        } else if s > t_arr {
            &xe2 + crate::linalg::expm(&a_f, s - t_arr).map(|m| m * &tail).unwrap_or_else(|_| tail.clone())
        } else {
            DVector::from_vec(traj.state_at(s).unwrap_or_else(|_| vec![f64::NAN; launch2.len()]))
        };
        let v = limit_rhs(&sys2, &x, t).unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN));
        (x, v)
    };
    Ok(HomoclinicOrbit {
        x0: eval(0.0).0,
        eval: Arc::new(eval),
        exit_shift: x_e,
        rates: (lam_u, lam_s),
        source: OrbitSource::Shooting,
    })
}

/// Closed form when supplied, shooting otherwise.
pub fn homoclinic_orbit(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    closed_form: Option<&ClosedFormOrbit>,
) -> Result<HomoclinicOrbit> {
    match closed_form {
        Some(c) => homoclinic_closed_form(sys, c),
        None => homoclinic_shooting(sys, split, &ShootingConfig::default()),
    }
}

/// Cross section `x0 + Σ`, `Σ = v^⊥ × Y`, with the Euclidean splitting
/// `Σ = span{ω} ⊕ Π`, `Π = Σ ∩ ker DH(x0)`.
#[derive(Debug, Clone)]
pub struct SectionFrame {
    pub x0: DVector<f64>,
    /// `A x0 + f(x0, 0, 0, 0)`.
    pub v: DVector<f64>,
    pub grad_h: DVector<f64>,
    /// In Σ with `DH(x0) ω = 1`.
    pub omega: DVector<f64>,
    pub n_y: usize,
    v_hat: DVector<f64>,
    g_hat: DVector<f64>,
    /// Orthonormal basis of Π in the ambient `(x, y)` space.
    pub basis_pi: DMatrix<f64>,
}

impl SectionFrame {
    pub fn new(sys: &SlowFastSystem, orbit: &HomoclinicOrbit) -> Result<Self> {
        let inv = sys.invariant.as_ref().ok_or_else(|| NespError::Assumption("the section needs an invariant H".into()))?;
        let (nx, ny) = (sys.n_x, sys.n_y);
        let n = nx + ny;
        let x0 = orbit.x0.clone();
        let v = limit_rhs(sys, &x0, 0.0)?;
        if v.norm() < 1e-10 {
            return Err(NespError::Assumption("the anchor is an equilibrium".into()));
        }
        let grad_h = inv.grad_x(x0.as_slice(), &vec![0.0; ny], 0.0)?;
        let vh = &v / v.norm();
        let g_perp = &grad_h - &vh * grad_h.dot(&vh);
        if g_perp.norm() < 1e-10 {
            return Err(NespError::Assumption("DH(x0) vanishes on the section".into()));
        }
        let omega = &g_perp / grad_h.dot(&g_perp);
        let ext = |u: &DVector<f64>| DVector::from_iterator(n, u.iter().cloned().chain(std::iter::repeat(0.0).take(ny)));
        let v_hat = ext(&vh);
        let g_hat = ext(&(&g_perp / g_perp.norm()));
        // Gram–Schmidt of the unit vectors against {v̂, ĝ}.
        let mut basis: Vec<DVector<f64>> = vec![v_hat.clone(), g_hat.clone()];
        for i in 0..n {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&e);
                    e -= b * c;
                }
            }
            if e.norm() > 1e-8 {
                basis.push(&e / e.norm());
            }
        }
        let basis_pi = DMatrix::from_columns(&basis[2..]);
        Ok(SectionFrame { x0, v, grad_h, omega, n_y: ny, v_hat, g_hat, basis_pi })
    }

    fn rel(&self, p: &DVector<f64>) -> DVector<f64> {
        let mut d = p.clone();
        d.rows_mut(0, self.x0.len()).sub_assign(&self.x0);
        d
    }

    /// Signed distance from the section along `v̂`.
    pub fn q_v(&self, p: &DVector<f64>) -> f64 {
        self.v_hat.dot(&self.rel(p))
    }

    /// `d = DH(x0)(p − x0)`.
    pub fn d(&self, p: &DVector<f64>) -> f64 {
        self.grad_h.dot(&self.rel(p).rows(0, self.x0.len()))
    }

    /// Π-coordinates of `p − x0`.
    pub fn pi_coords(&self, p: &DVector<f64>) -> DVector<f64> {
        self.basis_pi.transpose() * self.rel(p)
    }

    /// `(Q_v, Q_ω, Q_Π)` as ambient matrices; they sum to the identity.
    pub fn projections(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (
            &self.v_hat * self.v_hat.transpose(),
            &self.g_hat * self.g_hat.transpose(),
            &self.basis_pi * self.basis_pi.transpose(),
        )
    }
}

/// Forward step of the one-sided `ε` derivative.
const EPS_FD: f64 = 1e-4;

/// `ω(t, t0) = DH(x_h)(∂_ε f − D_y f J⁻¹ g)(x_h(t), 0, t + t0, 0)`.
pub fn melnikov_integrand(sys: &SlowFastSystem, orbit: &HomoclinicOrbit, t: f64, t0: f64) -> Result<f64> {
    let inv = sys.invariant.as_ref().ok_or_else(|| NespError::Assumption("the Melnikov integrand needs H".into()))?;
    let (x, _) = orbit.eval(t);
    let y0 = vec![0.0; sys.n_y];
    let s = t + t0;
    let xs = x.as_slice();
    let dh = inv.grad_x(xs, &y0, 0.0)?;
    let f0 = sys.f_vec(xs, &y0, s, 0.0)?;
    let f1 = sys.f_vec(xs, &y0, s, EPS_FD)?;
    let f2 = sys.f_vec(xs, &y0, s, 2.0 * EPS_FD)?;
    let mut w = (f1 * 4.0 - &f0 * 3.0 - f2) / (2.0 * EPS_FD);
    if sys.n_y > 0 {
        let jg = sys.j_inv()? * sys.g_vec(xs, &y0, s, 0.0)?;
        let scale = jg.norm();
        if scale > 0.0 {
            let h = 1e-6 / scale;
            let yp: Vec<f64> = jg.iter().map(|v| h * v).collect();
            let ym: Vec<f64> = jg.iter().map(|v| -h * v).collect();
            w -= (sys.f_vec(xs, &yp, s, 0.0)? - sys.f_vec(xs, &ym, s, 0.0)?) / (2.0 * h);
        }
    }
    Ok(dh.dot(&w))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MelnikovConfig {
    pub quad: QuadConfig,
    /// Half-width of the integration window; chosen from the tail bound when `None`.
    pub t_tail: Option<f64>,
    pub t_tail_max: f64,
}

impl Default for MelnikovConfig {
    fn default() -> Self {
        MelnikovConfig { quad: QuadConfig { abs_tol: 1e-10, rel_tol: 1e-12, max_intervals: 4000 }, t_tail: None, t_tail_max: 80.0 }
    }
}

/// `sup |ω|` on `±[T, T + 4]` over four phases of `t0`, divided by the slower decay rate.
fn tail_bound(sys: &SlowFastSystem, orbit: &HomoclinicOrbit, t: f64) -> Result<f64> {
    let rate = orbit.rates.0.min(orbit.rates.1);
    let mut sup: f64 = 0.0;
    for k in 0..=16 {
        let s = t + 0.25 * k as f64;
        for t0 in [0.0, 0.5 * PI, PI, 1.5 * PI] {
            sup = sup.max(melnikov_integrand(sys, orbit, s, t0)?.abs());
            sup = sup.max(melnikov_integrand(sys, orbit, -s, t0)?.abs());
        }
    }
    Ok(sup / rate)
}

/// Tail window and its bound.
pub fn tail_window(sys: &SlowFastSystem, orbit: &HomoclinicOrbit, cfg: &MelnikovConfig) -> Result<(f64, f64)> {
    if let Some(t) = cfg.t_tail {
        return Ok((t, tail_bound(sys, orbit, t)?));
    }
    let target = 0.01 * cfg.quad.abs_tol;
    let mut t = 10.0;
    loop {
        let b = tail_bound(sys, orbit, t)?;
        if b < target {
            return Ok((t, b));
        }
        if t >= cfg.t_tail_max {
            if b > 1e-3 {
                return Err(NespError::Assumption(format!(
                    "the Melnikov integrand does not decay (tail bound {b:.3e} at T = {t}); check H(0) = 0 and DH(0) = 0"
                )));
            }
            return Ok((t, b));
        }
        t = (t + 5.0).min(cfg.t_tail_max);
    }
}

/// `M(t0)` with its quadrature error estimate.
pub fn melnikov_value(sys: &SlowFastSystem, orbit: &HomoclinicOrbit, t0: f64, t_tail: f64, quad: &QuadConfig) -> Result<(f64, f64)> {
    let f = |t: f64| melnikov_integrand(sys, orbit, t, t0);
    let lo = integrate(f, -t_tail, 0.0, quad)?;
    let hi = integrate(f, 0.0, t_tail, quad)?;
    Ok((lo.value + hi.value, lo.error + hi.error))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MelnikovRoot {
    pub t0: f64,
    /// `M'(t0)` from a five-point stencil.
    pub slope: f64,
    pub simple: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MelnikovProfile {
    pub t0: Vec<f64>,
    pub m: Vec<f64>,
    pub quad_err: Vec<f64>,
    pub t_tail: f64,
    pub tail_bound: f64,
    pub roots: Vec<MelnikovRoot>,
}

/// Roots with `|M'|` below this are not simple.
pub const SIMPLICITY_THRESHOLD: f64 = 1e-6;

/// `M` on a grid of `t0`, with sign-change roots refined to `1e-12`.
pub fn melnikov_profile(
    sys: &SlowFastSystem,
    orbit: &HomoclinicOrbit,
    t0_grid: &[f64],
    cfg: &MelnikovConfig,
) -> Result<MelnikovProfile> {
    let (t_tail, bound) = tail_window(sys, orbit, cfg)?;
    let vals: Vec<(f64, f64)> =
        t0_grid.par_iter().map(|&t0| melnikov_value(sys, orbit, t0, t_tail, &cfg.quad)).collect::<Result<_>>()?;
    let m_at = |t0: f64| melnikov_value(sys, orbit, t0, t_tail, &cfg.quad).map(|v| v.0);
    let mut roots = Vec::new();
    for i in 1..t0_grid.len() {
        let (a, b) = (t0_grid[i - 1], t0_grid[i]);
        let (fa, fb) = (vals[i - 1].0, vals[i].0);
        if fa == 0.0 {
            roots.push(a);
        } else if fa * fb < 0.0 {
            roots.push(illinois(&m_at, a, b, fa, fb, 1e-12, 0.0)?);
        }
    }
    if let (Some(&last), Some(v)) = (t0_grid.last(), vals.last()) {
        if v.0 == 0.0 {
            roots.push(last);
        }
    }
    let roots = roots
        .into_iter()
        .map(|r| {
            let h = 1e-3;
            let d = (m_at(r - 2.0 * h)? - 8.0 * m_at(r - h)? + 8.0 * m_at(r + h)? - m_at(r + 2.0 * h)?) / (12.0 * h);
            Ok(MelnikovRoot { t0: r, slope: d, simple: d.abs() > SIMPLICITY_THRESHOLD })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MelnikovProfile {
        t0: t0_grid.to_vec(),
        m: vals.iter().map(|v| v.0).collect(),
        quad_err: vals.iter().map(|v| v.1 + bound).collect(),
        t_tail,
        tail_bound: bound,
        roots,
    })
}

impl MelnikovProfile {
    /// Header `t0,M,quad_err`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t0,M,quad_err\n");
        for i in 0..self.t0.len() {
            s.push_str(&format!("{:e},{:e},{:e}\n", self.t0[i], self.m[i], self.quad_err[i]));
        }
        s
    }
}

/// Illinois regula falsi on a bracket; stops on `|Δt| < xtol` or `|f| ≤ ftol`.
fn illinois<F: Fn(f64) -> Result<f64>>(f: &F, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64, xtol: f64, ftol: f64) -> Result<f64> {
    let mut side = 0;
    for _ in 0..200 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = f(c)?;
        if fc.abs() <= ftol || (b - a).abs() < xtol {
            return Ok(c);
        }
        if fc * fb < 0.0 {
            a = b;
            fa = fb;
            b = c;
            fb = fc;
            side = 0;
        } else {
            b = c;
            fb = fc;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() < xtol {
            return Ok(if fa.abs() < fb.abs() { a } else { b });
        }
    }
    Err(NespError::NoConvergence("bracketed root refinement did not converge".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplittingConfig {
    pub lp: LpConfig,
    pub integrator: IntegratorOptions,
    /// Residual tolerance of the matching Newton solves.
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Launch time on the center-stable side; from the chart-size bound when `None`.
    pub t1: Option<f64>,
    /// Launch time on the unstable side (negative); from the chart-size bound when `None`.
    pub t2: Option<f64>,
    /// Matches with `|P − x0|/ε` above this are flagged as suspect.
    pub certificate_limit: f64,
}

impl Default for SplittingConfig {
    fn default() -> Self {
        SplittingConfig {
            lp: LpConfig::default(),
            integrator: IntegratorOptions::tight(),
            newton_tol: 1e-12,
            max_newton: 30,
            t1: None,
            t2: None,
            certificate_limit: 100.0,
        }
    }
}

/// Launch times `(t1, t2)`: the first `t > 0` and last `t < 0` with
/// `|x_h(t) − equilibrium| < r / (2(1 + |P_cs| + |P_u|))`.
pub fn launch_times(orbit: &HomoclinicOrbit, split: &DichotomySplit, r: f64) -> Result<(f64, f64)> {
    let bound = r / (2.0 * (1.0 + op_norm(&split.p_cs()) + op_norm(&split.p_u)));
    let find = |sign: f64| -> Result<f64> {
        let mut t = 0.0;
        while t < 200.0 {
            if orbit.offset(sign * t).norm() < bound {
                return Ok(sign * t);
            }
            t += 0.01;
        }
        Err(NespError::Assumption("the orbit does not enter the chart ball".into()))
    };
    Ok((find(1.0)?, find(-1.0)?))
}

/// Periodicity of the full field under the orbit's exit shift, checked on probes.
fn check_shift_symmetry(sys: &SlowFastSystem, shift: &DVector<f64>, eps: f64) -> Result<()> {
    if shift.amax() == 0.0 {
        return Ok(());
    }
    for p in crate::model::probe_points(sys.n_x + sys.n_y, 8, 0.3, 0x51f7) {
        let (x, y) = p.split_at(sys.n_x);
        let xs: Vec<f64> = x.iter().zip(shift.iter()).map(|(a, b)| a + b).collect();
        for t in [0.0, 1.3] {
            let a = &sys.a * DVector::from_column_slice(x) + sys.f_vec(x, y, t, eps)?;
            let b = &sys.a * DVector::from_vec(xs.clone()) + sys.f_vec(&xs, y, t, eps)?;
            let ga = sys.g_vec(x, y, t, eps)?;
            let gb = sys.g_vec(&xs, y, t, eps)?;
            if (a - b).amax() > 1e-9 || (ga - gb).amax() > 1e-9 {
                return Err(NespError::Assumption(
                    "the field is not invariant under the orbit's exit shift; the far equilibrium is not a copy of the origin".into(),
                ));
            }
        }
    }
    Ok(())
}

/// One side of a shooting problem: a local graph launched at chart time `t0 + τ`
/// and flowed to `t0`.
struct Side<'a> {
    sys: &'a SlowFastSystem,
    split: &'a DichotomySplit,
    kind: ManifoldKind,
    /// Fixed along-orbit chart coordinate.
    base: DVector<f64>,
    /// Free transverse chart directions.
    perp: DMatrix<f64>,
    /// Equilibrium the chart is centered at.
    center: DVector<f64>,
    free_y: bool,
    t0: f64,
    eps: f64,
    cfg: &'a SplittingConfig,
}

impl<'a> Side<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        sys: &'a SlowFastSystem,
        split: &'a DichotomySplit,
        orbit: &HomoclinicOrbit,
        kind: ManifoldKind,
        t_launch: f64,
        t0: f64,
        eps: f64,
        cfg: &'a SplittingConfig,
    ) -> Self {
        let (proj, basis) = match kind {
            ManifoldKind::Stable => (split.p_s.clone(), split.v_s.clone()),
            ManifoldKind::Unstable => (split.p_u.clone(), split.v_u.clone()),
            ManifoldKind::CenterStable => (split.p_cs(), hcat(&split.v_c, &split.v_s)),
            _ => (split.p_cu(), hcat(&split.v_c, &split.v_u)),
        };
        let base = &proj * orbit.offset(t_launch);
        let perp = complement(&basis, &base);
        let center = if t_launch >= 0.0 { orbit.exit_shift.clone() } else { DVector::zeros(sys.n_x) };
        let free_y = matches!(kind, ManifoldKind::CenterStable | ManifoldKind::CenterUnstable);
        Side { sys, split, kind, base, perp, center, free_y, t0, eps, cfg }
    }

    /// `1 + transverse + fast` unknowns.
    fn unknowns(&self) -> usize {
        1 + self.perp.ncols() + if self.free_y { self.sys.n_y } else { 0 }
    }

    /// Landing point at time `t0` for unknowns `(τ, a, ξ_y)`.
    fn land(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let (nx, ny) = (self.sys.n_x, self.sys.n_y);
        let tau = theta[0];
        let k = self.perp.ncols();
        let xi = &self.base + &self.perp * DVector::from_column_slice(&theta[1..1 + k]);
        let xi_y: Vec<f64> = if self.free_y { theta[1 + k..1 + k + ny].to_vec() } else { Vec::new() };
        let gp = solve_graph(self.sys, self.split, self.kind, xi.as_slice(), &xi_y, self.t0 + tau, self.eps, &self.cfg.lp, false)?;
        let mut p = gp.point;
        p.rows_mut(0, nx).add_assign(&self.center);
        let traj = integrate_full(
            self.sys,
            p.rows(0, nx).as_slice(),
            p.rows(nx, ny).as_slice(),
            self.t0 + tau,
            self.t0,
            self.eps,
            &self.cfg.integrator,
        )?;
        Ok(DVector::from_vec(traj.final_state()))
    }
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = a.column_iter().chain(b.column_iter()).map(|c| c.into_owned()).collect();
    if cols.is_empty() {
        return DMatrix::zeros(a.nrows(), 0);
    }
    DMatrix::from_columns(&cols)
}

/// Orthonormal basis of `span(basis) ∩ d^⊥`.
fn complement(basis: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let n = basis.nrows();
    let mut out: Vec<DVector<f64>> = Vec::new();
    let dn = d.norm();
    let dh = if dn > 0.0 { Some(d / dn) } else { None };
    for c in basis.column_iter() {
        let mut e = c.into_owned();
        for _ in 0..2 {
            if let Some(dh) = &dh {
                let p = dh.dot(&e);
                e -= dh * p;
            }
            for b in &out {
                let p = b.dot(&e);
                e -= b * p;
            }
        }
        if e.norm() > 1e-8 * c.norm().max(1e-300) {
            out.push(&e / e.norm());
        }
    }
    let keep = basis.ncols().saturating_sub(usize::from(dh.is_some()));
    out.truncate(keep);
    if out.is_empty() {
        return DMatrix::zeros(n, 0);
    }
    DMatrix::from_columns(&out)
}

/// Result of a matching solve.
struct Matched {
    theta_a: Vec<f64>,
    theta_b: Vec<f64>,
    qa: DVector<f64>,
    qb: DVector<f64>,
    iterations: usize,
    residual: f64,
}

/// Newton with a forward-difference Jacobian on two decoupled shooting maps.
/// `residual(qa, qb)` must return as many components as there are unknowns.
#[allow(clippy::too_many_arguments)]
fn match_newton<A, B, R>(
    fa: &A,
    fb: &B,
    residual: &R,
    theta_a: Vec<f64>,
    theta_b: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Matched>
where
    A: Fn(&[f64]) -> Result<DVector<f64>> + Sync,
    B: Fn(&[f64]) -> Result<DVector<f64>> + Sync,
    R: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Sync,
{
    let (na, nb) = (theta_a.len(), theta_b.len());
    let mut ta = theta_a;
    let mut tb = theta_b;
    let (mut qa, mut qb) = rayon::join(|| fa(&ta), || fb(&tb));
    let (mut qa_v, mut qb_v) = (qa?, qb?);
    let mut r = residual(&qa_v, &qb_v);
    if r.len() != na + nb {
        return Err(NespError::Dimension(format!("matching system has {} equations for {} unknowns", r.len(), na + nb)));
    }
    const STEP: f64 = 1e-6;
    for it in 0..max_iter {
        let rn = r.amax();
        if rn <= tol {
            return Ok(Matched { theta_a: ta, theta_b: tb, qa: qa_v, qb: qb_v, iterations: it, residual: rn });
        }
        let cols: Vec<Result<DVector<f64>>> = (0..na + nb)
            .into_par_iter()
            .map(|j| {
                if j < na {
                    let mut p = ta.clone();
                    p[j] += STEP;
                    Ok((residual(&fa(&p)?, &qb_v) - &r) / STEP)
                } else {
                    let mut p = tb.clone();
                    p[j - na] += STEP;
                    Ok((residual(&qa_v, &fb(&p)?) - &r) / STEP)
                }
            })
            .collect();
        let cols = cols.into_iter().collect::<Result<Vec<_>>>()?;
        let jac = DMatrix::from_columns(&cols);
        let delta = jac.lu().solve(&(-&r)).ok_or_else(|| NespError::Singular("matching Jacobian".into()))?;
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let na_t: Vec<f64> = ta.iter().zip(delta.iter()).map(|(t, d)| t + alpha * d).collect();
            let nb_t: Vec<f64> = tb.iter().zip(delta.iter().skip(na)).map(|(t, d)| t + alpha * d).collect();
            (qa, qb) = rayon::join(|| fa(&na_t), || fb(&nb_t));
            if let (Ok(a), Ok(b)) = (&qa, &qb) {
                let rr = residual(a, b);
                if rr.amax() < rn || rr.amax() <= tol {
                    ta = na_t;
                    tb = nb_t;
                    qa_v = a.clone();
                    qb_v = b.clone();
                    r = rr;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(NespError::NoConvergence(format!("matching Newton stalled at residual {rn:.3e}")));
        }
    }
    let rn = r.amax();
    if rn <= tol * 10.0 {
        return Ok(Matched { theta_a: ta, theta_b: tb, qa: qa_v, qb: qb_v, iterations: max_iter, residual: rn });
    }
    Err(NespError::NoConvergence(format!("matching Newton: residual {rn:.3e} after {max_iter} iterations")))
}

#[derive(Debug, Clone, Serialize)]
pub struct SplittingResult {
    pub t0: f64,
    pub eps: f64,
    /// `H(P^u) − H(P^cs)`.
    pub h_diff: f64,
    #[serde(serialize_with = "ser_vec")]
    pub p_u: DVector<f64>,
    #[serde(serialize_with = "ser_vec")]
    pub p_cs: DVector<f64>,
    /// Launch offsets `(τ_u, τ_cs)`.
    pub launch: (f64, f64),
    /// `|P^u − x0| / ε`, the measured matching constant.
    pub c_prime: f64,
    pub suspect: bool,
    pub newton_iterations: usize,
    pub residual: f64,
}

fn ser_vec<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// `H(P^u) − H(P^cs)` at the section through `x_h(0)` for arrival time `t0`.
pub fn splitting_distance(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    orbit: &HomoclinicOrbit,
    t0: f64,
    eps: f64,
    cfg: &SplittingConfig,
) -> Result<SplittingResult> {
    if !(eps > 0.0) {
        return Err(NespError::Parameter("splitting needs eps > 0".into()));
    }
    let inv = sys.invariant.as_ref().ok_or_else(|| NespError::Assumption("splitting needs an invariant H".into()))?;
    check_shift_symmetry(sys, &orbit.exit_shift, eps)?;
    let frame = SectionFrame::new(sys, orbit)?;
    let r = cfg.lp.radius.unwrap_or(sys.hints.cutoff_radius);
    let (t1d, t2d) = launch_times(orbit, split, r)?;
    let (t1, t2) = (cfg.t1.unwrap_or(t1d), cfg.t2.unwrap_or(t2d));
    let u = Side::new(sys, split, orbit, ManifoldKind::Unstable, t2, t0, eps, cfg);
    let s = Side::new(sys, split, orbit, ManifoldKind::CenterStable, t1, t0, eps, cfg);
    let nx = sys.n_x;
    let residual = |qu: &DVector<f64>, qs: &DVector<f64>| -> DVector<f64> {
        let pi = frame.basis_pi.transpose() * (qu - qs);
        DVector::from_iterator(2 + pi.len(), [frame.q_v(qu), frame.q_v(qs)].into_iter().chain(pi.iter().cloned()))
    };
    let mut ta = vec![0.0; u.unknowns()];
    ta[0] = t2;
    let mut tb = vec![0.0; s.unknowns()];
    tb[0] = t1;
    let m = match_newton(&|th: &[f64]| u.land(th), &|th: &[f64]| s.land(th), &residual, ta, tb, cfg.newton_tol, cfg.max_newton)?;
    let y0 = vec![0.0; sys.n_y];
    let h = |p: &DVector<f64>| inv.eval(p.rows(0, nx).as_slice(), &y0, 0.0);
    let h_diff = h(&m.qa)? - h(&m.qb)?;
    let mut rel = m.qa.clone();
    rel.rows_mut(0, nx).sub_assign(&frame.x0);
    let c_prime = rel.norm() / eps;
    Ok(SplittingResult {
        t0,
        eps,
        h_diff,
        p_u: m.qa,
        p_cs: m.qb,
        launch: (m.theta_a[0], m.theta_b[0]),
        c_prime,
        suspect: c_prime > cfg.certificate_limit,
        newton_iterations: m.iterations,
        residual: m.residual,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SplittingRow {
    pub eps: f64,
    pub t0: f64,
    pub h_diff: f64,
    pub eps_times_m: f64,
    pub ratio: f64,
    pub c_prime: f64,
    pub suspect: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplittingStudy {
    pub m: f64,
    pub m_err: f64,
    pub rows: Vec<SplittingRow>,
    /// `max |ratio − 1| / √ε`.
    pub c_fit: f64,
    /// Log-log slope of `|H_diff − εM|` against `ε`.
    pub deviation_exponent: Option<f64>,
}

impl SplittingStudy {
    /// Header `eps,t0,H_diff,eps_times_M,ratio`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,t0,H_diff,eps_times_M,ratio\n");
        for r in &self.rows {
            s.push_str(&format!("{:e},{:e},{:e},{:e},{:e}\n", r.eps, r.t0, r.h_diff, r.eps_times_m, r.ratio));
        }
        s
    }
}

/// Splitting against `εM(t0)` over an `ε` list (evaluated in parallel).
pub fn splitting_study(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    orbit: &HomoclinicOrbit,
    t0: f64,
    eps_list: &[f64],
    cfg: &SplittingConfig,
    mcfg: &MelnikovConfig,
) -> Result<SplittingStudy> {
    let (t_tail, bound) = tail_window(sys, orbit, mcfg)?;
    let (m, m_err) = melnikov_value(sys, orbit, t0, t_tail, &mcfg.quad)?;
    let results: Vec<SplittingResult> =
        eps_list.par_iter().map(|&e| splitting_distance(sys, split, orbit, t0, e, cfg)).collect::<Result<_>>()?;
    let rows: Vec<SplittingRow> = results
        .iter()
        .map(|r| SplittingRow {
            eps: r.eps,
            t0,
            h_diff: r.h_diff,
            eps_times_m: r.eps * m,
            ratio: r.h_diff / (r.eps * m),
            c_prime: r.c_prime,
            suspect: r.suspect,
        })
        .collect();
    let c_fit = rows.iter().map(|r| (r.ratio - 1.0).abs() / r.eps.sqrt()).fold(0.0, f64::max);
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| (r.h_diff - r.eps_times_m).abs() > 0.0)
        .map(|r| (r.eps.ln(), (r.h_diff - r.eps_times_m).abs().ln()))
        .collect();
    let deviation_exponent = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(SplittingStudy { m, m_err: m_err + bound, rows, c_fit, deviation_exponent })
}

#[derive(Debug, Clone, Serialize)]
pub struct TubeCheck {
    pub horizon: f64,
    /// `max_t (|P_c x̃| + |y|) / (|P_c x̃(0)| + |y(0)|)` with `x̃` relative to the nearer equilibrium.
    pub max_ratio: f64,
    /// Distance of `x(T)` from the arrival equilibrium.
    pub final_offset: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Connection {
    pub eps: f64,
    pub tau0: f64,
    pub h_tau0: f64,
    /// `(τ, h(τ))` on the scan grid.
    pub h_grid: Vec<(f64, f64)>,
    #[serde(serialize_with = "ser_vec")]
    pub point: DVector<f64>,
    /// `|p^s(τ0) − p^u(τ0)|`.
    pub gap: f64,
    /// `|point − x0| / ε`.
    pub c_prime: f64,
    pub tube: TubeCheck,
    #[serde(skip)]
    pub orbit: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConnectionConfig {
    pub splitting: SplittingConfig,
    pub h_tol: f64,
    /// Points of the `τ` scan.
    pub grid: usize,
    pub tube_horizon: f64,
}

impl Default for ConnectionConfig {
    fn default() -> Self {
        ConnectionConfig { splitting: SplittingConfig::default(), h_tol: 1e-10, grid: 5, tube_horizon: 20.0 }
    }
}

/// Intersection of the center-stable and center-unstable manifolds of an autonomous
/// conservative system, by the energy-matching homotopy between the stable and
/// unstable manifold points on the section.
pub fn conservative_connection(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    orbit: &HomoclinicOrbit,
    eps: f64,
    cfg: &ConnectionConfig,
) -> Result<Connection> {
    if eps == 0.0 {
        return Err(NespError::NoBracket("h(0) = h(1) = 0 at eps = 0: the bracket is degenerate".into()));
    }
    if !(eps > 0.0) {
        return Err(NespError::Parameter("the connection needs eps > 0".into()));
    }
    if !sys.flags.autonomous {
        return Err(NespError::Assumption("the conservative connection needs an autonomous system".into()));
    }
    if sys.n_x != 2 || split.dim_s() != 1 || split.dim_u() != 1 {
        return Err(NespError::Assumption("the connection is implemented for a planar saddle slow block".into()));
    }
    let inv = sys.invariant.as_ref().ok_or_else(|| NespError::Assumption("the connection needs an invariant H".into()))?;
    check_shift_symmetry(sys, &orbit.exit_shift, eps)?;
    let scfg = &cfg.splitting;
    let frame = SectionFrame::new(sys, orbit)?;
    let r = scfg.lp.radius.unwrap_or(sys.hints.cutoff_radius);
    let (t1d, t2d) = launch_times(orbit, split, r)?;
    let (t1, t2) = (scfg.t1.unwrap_or(t1d), scfg.t2.unwrap_or(t2d));
    let t0 = 0.0;
    let side = |k| Side::new(sys, split, orbit, k, if matches!(k, ManifoldKind::Stable | ManifoldKind::CenterStable) { t1 } else { t2 }, t0, eps, scfg);
    let (s_side, u_side) = (side(ManifoldKind::Stable), side(ManifoldKind::Unstable));
    let (cs_side, cu_side) = (side(ManifoldKind::CenterStable), side(ManifoldKind::CenterUnstable));
    let none = |_: &[f64]| -> Result<DVector<f64>> { Ok(DVector::zeros(0)) };
    let on_section = |q: &DVector<f64>, _: &DVector<f64>| DVector::from_element(1, frame.q_v(q));
    let single = |s: &Side, tl: f64| -> Result<DVector<f64>> {
        let mut th = vec![0.0; s.unknowns()];
        th[0] = tl;
        Ok(match_newton(&|th: &[f64]| s.land(th), &none, &on_section, th, vec![], scfg.newton_tol, scfg.max_newton)?.qa)
    };
    let (ps, pu) = rayon::join(|| single(&s_side, t1), || single(&u_side, t2));
    let (ps, pu) = (ps?, pu?);
    let (qs0, qu0) = (frame.pi_coords(&ps), frame.pi_coords(&pu));
    let h_of = |p: &DVector<f64>| inv.eval(p.rows(0, 2).as_slice(), p.rows(2, sys.n_y).as_slice(), eps);

    // Point of a center graph landing on the section with prescribed Π-coordinates.
    let on_target = |side: &Side, target: &DVector<f64>, guess: &[f64]| -> Result<(Vec<f64>, DVector<f64>)> {
        let res = |q: &DVector<f64>, _: &DVector<f64>| {
            let pi = frame.pi_coords(q) - target;
            DVector::from_iterator(1 + pi.len(), std::iter::once(frame.q_v(q)).chain(pi.iter().cloned()))
        };
        let m = match_newton(&|th: &[f64]| side.land(th), &none, &res, guess.to_vec(), vec![], scfg.newton_tol, scfg.max_newton)?;
        Ok((m.theta_a, m.qa))
    };
    let guess = |side: &Side, tl: f64| {
        let mut g = vec![0.0; side.unknowns()];
        g[0] = tl;
        g
    };
    let eval_h = |tau: f64, gs: &[f64], gu: &[f64]| -> Result<(f64, Vec<f64>, Vec<f64>, DVector<f64>, DVector<f64>)> {
        let target = &qs0 * (1.0 - tau) + &qu0 * tau;
        let (a, b) = rayon::join(|| on_target(&cs_side, &target, gs), || on_target(&cu_side, &target, gu));
        let ((ths, pss), (thu, puu)) = (a?, b?);
        Ok((h_of(&pss)? - h_of(&puu)?, ths, thu, pss, puu))
    };
    let n = cfg.grid.max(2);
    let mut scan = Vec::with_capacity(n);
    let (mut gs, mut gu) = (guess(&cs_side, t1), guess(&cu_side, t2));
    for i in 0..n {
        let tau = i as f64 / (n - 1) as f64;
        let v = eval_h(tau, &gs, &gu)?;
        gs = v.1.clone();
        gu = v.2.clone();
        scan.push((tau, v));
    }
    let h_grid: Vec<(f64, f64)> = scan.iter().map(|(t, v)| (*t, v.0)).collect();
    let exact = scan.iter().find(|(_, v)| v.0.abs() < cfg.h_tol);
    let (tau0, h0, pss, puu) = if let Some((t, v)) = exact {
        (*t, v.0, v.3.clone(), v.4.clone())
    } else {
        let k = (1..n).find(|&k| scan[k - 1].1 .0 * scan[k].1 .0 < 0.0).ok_or_else(|| {
            NespError::NoBracket(format!("h(0) = {:.3e} and h(1) = {:.3e} have the same sign", h_grid[0].1, h_grid[n - 1].1))
        })?;
        let (a, b) = (&scan[k - 1], &scan[k]);
        let cache = std::sync::Mutex::new((a.1 .1.clone(), a.1 .2.clone(), None));
        let f = |tau: f64| -> Result<f64> {
            let (g1, g2) = {
                let c = cache.lock().unwrap();
                (c.0.clone(), c.1.clone())
            };
            let v = eval_h(tau, &g1, &g2)?;
            *cache.lock().unwrap() = (v.1.clone(), v.2.clone(), Some((tau, v.0, v.3.clone(), v.4.clone())));
            Ok(v.0)
        };
        let tau0 = illinois(&f, a.0, b.0, a.1 .0, b.1 .0, 1e-14, cfg.h_tol)?;
        let last = cache.into_inner().unwrap().2;
        match last {
            Some((t, h, p1, p2)) if t == tau0 => (t, h, p1, p2),
            _ => {
                let v = eval_h(tau0, &a.1 .1, &a.1 .2)?;
                (tau0, v.0, v.3, v.4)
            }
        }
    };
    let gap = (&pss - &puu).norm();
    let mut rel = pss.clone();
    rel.rows_mut(0, 2).sub_assign(&frame.x0);
    let c_prime = rel.norm() / eps;
    let (tube, traj) = tube_check(sys, split, orbit, &pss, eps, cfg.tube_horizon, &scfg.integrator)?;
    Ok(Connection { eps, tau0, h_tau0: h0, h_grid, point: pss, gap, c_prime, tube, orbit: traj })
}

/// Flow forward from the connection point and compare the center-plus-fast size
/// with its initial value; the orbit must also settle near the arrival equilibrium.
fn tube_check(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    orbit: &HomoclinicOrbit,
    p: &DVector<f64>,
    eps: f64,
    horizon: f64,
    opts: &IntegratorOptions,
) -> Result<(TubeCheck, Trajectory)> {
    let (nx, ny) = (sys.n_x, sys.n_y);
    let traj = integrate_full(sys, p.rows(0, nx).as_slice(), p.rows(nx, ny).as_slice(), 0.0, horizon, eps, opts)?;
    let size = |z: &[f64]| -> f64 {
        let x = DVector::from_column_slice(&z[..nx]);
        let near = if (&x - &orbit.exit_shift).norm() < x.norm() { &x - &orbit.exit_shift } else { x };
        (&split.p_c * near).norm() + DVector::from_column_slice(&z[nx..]).norm()
    };
    let s0 = size(p.as_slice());
    let mut worst: f64 = 0.0;
    let samples = (horizon * 200.0) as usize;
    for i in 0..=samples {
        let z = traj.state_at(horizon * i as f64 / samples as f64)?;
        worst = worst.max(size(&z) / s0);
    }
    let end = traj.final_state();
    let final_offset = (DVector::from_column_slice(&end[..nx]) - &orbit.exit_shift).norm();
    let r = sys.hints.cutoff_radius;
    let passed = worst <= 2.0 && final_offset < r;
    Ok((TubeCheck { horizon, max_ratio: worst, final_offset, passed }, traj))
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyCheck {
    pub min_ratio: f64,
    /// Chart coordinates `(ξ_c, u)` of the minimizer.
    pub argmin: Vec<f64>,
    pub samples: usize,
    pub passed: bool,
}

/// Minimum of `H(z, ε)/(|ξ_c|² + |u|²)` over center-manifold points `z` with chart
/// coordinates on a grid of the box `[−b, b]`, `u = y/ε` unless the system's fast
/// variable is already scaled.
pub fn energy_positivity_check(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    eps: f64,
    b: f64,
    per_axis: usize,
    lp: &LpConfig,
) -> Result<EnergyCheck> {
    let inv = sys.invariant.as_ref().ok_or_else(|| NespError::Assumption("the energy check needs H".into()))?;
    let scaled = inv.expansion.as_ref().map(|e| e.scaled_fast).unwrap_or(true);
    let (nx, ny, nc) = (sys.n_x, sys.n_y, split.dim_c());
    let dims = nc + ny;
    let per_axis = per_axis.max(2);
    let nodes: Vec<f64> = (0..per_axis).map(|i| -b + 2.0 * b * i as f64 / (per_axis - 1) as f64).collect();
    let total = per_axis.pow(dims as u32);
    let vc = if nc > 0 { split.v_c.clone() } else { DMatrix::zeros(nx, 0) };
    let results: Vec<Result<Option<(f64, Vec<f64>)>>> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut f = flat;
            let coords: Vec<f64> = (0..dims)
                .map(|_| {
                    let v = nodes[f % per_axis];
                    f /= per_axis;
                    v
                })
                .collect();
            let denom: f64 = coords.iter().map(|c| c * c).sum();
            if denom < 1e-300 {
                return Ok(None);
            }
            let xi_c = &vc * DVector::from_column_slice(&coords[..nc]);
            let u = &coords[nc..];
            let y: Vec<f64> = if scaled { u.to_vec() } else { u.iter().map(|v| v * eps).collect() };
            let c = solve_center_graph(sys, split, xi_c.as_slice(), &y, 0.0, eps, lp, false)?;
            let h = inv.eval(c.point.rows(0, nx).as_slice(), c.point.rows(nx, ny).as_slice(), eps)?;
            Ok(Some((h / denom, coords)))
        })
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut count = 0;
    for r in results {
        if let Some((v, c)) = r? {
            count += 1;
            if best.as_ref().map_or(true, |b| v < b.0) {
                best = Some((v, c));
            }
        }
    }
    let (min_ratio, argmin) = best.ok_or_else(|| NespError::Parameter("the sample box has no nonzero points".into()))?;
    Ok(EnergyCheck { min_ratio, argmin, samples: count, passed: min_ratio > 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::default_split;
    use crate::systems::{pendulum_separatrix, ForcedPendulum, Forcing};

    fn forced(gamma: f64, forcing: &str) -> (SlowFastSystem, DichotomySplit, HomoclinicOrbit) {
        let sys = ForcedPendulum { g: 1.0, gamma, forcing: Forcing::expr(forcing, &[]).unwrap() }.build().unwrap();
        let split = default_split(&sys).unwrap();
        let orbit = homoclinic_closed_form(&sys, &pendulum_separatrix(1.0)).unwrap();
        (sys, split, orbit)
    }

    #[test]
    fn separatrix_energy_and_rates() {
        let (sys, _, orbit) = forced(0.1, "sin(t)");
        let inv = sys.invariant.as_ref().unwrap();
        for i in 0..=40 {
            let t = -10.0 + 0.5 * i as f64;
            let x = orbit.state(t);
            assert!(inv.eval(x.as_slice(), &[0.0, 0.0], 0.0).unwrap().abs() < 1e-12);
        }
        let (a, b) = orbit.fitted_rates();
        assert!((a - 1.0).abs() < 0.1 && (b - 1.0).abs() < 0.1, "{a} {b}");
    }

    #[test]
    fn section_frame_invariants() {
        let (sys, _, orbit) = forced(0.1, "sin(t)");
        let f = SectionFrame::new(&sys, &orbit).unwrap();
        assert!((f.grad_h.dot(&f.omega) - 1.0).abs() < 1e-10);
        let (qv, qw, qp) = f.projections();
        assert!((&qv + &qw + &qp - DMatrix::identity(4, 4)).amax() < 1e-10);
        for q in [&qv, &qw, &qp] {
            assert!((q * q - q).amax() < 1e-10);
        }
        let v4 = DVector::from_vec(vec![f.v[0], f.v[1], 0.0, 0.0]);
        assert!(((&qv * &v4) - &v4).amax() < 1e-12);
    }

    #[test]
    fn integrand_matches_hand_contraction() {
        let (sys, _, orbit) = forced(0.1, "sin(t)");
        for &(t, t0) in &[(0.3, 0.0), (-1.2, 0.7), (2.5, 2.0)] {
            let (_, dx) = orbit.eval(t);
            let p = dx[0];
            let expect = p * (-0.2 * p + (t + t0).sin());
            assert!((melnikov_integrand(&sys, &orbit, t, t0).unwrap() - expect).abs() < 1e-8);
        }
    }

    #[test]
    fn rigid_profile_and_root() {
        let (sys, _, orbit) = forced(0.1, "sin(t)");
        let grid: Vec<f64> = (0..20).map(|i| i as f64 * 2.0 * PI / 20.0).collect();
        let p = melnikov_profile(&sys, &orbit, &grid, &MelnikovConfig::default()).unwrap();
        let amp = 2.0 * PI / (PI / 2.0).cosh();
        for (t0, m) in p.t0.iter().zip(&p.m) {
            assert!((m - (-1.6 + amp * t0.sin())).abs() < 1e-8, "{t0} {m}");
        }
        let root = p.roots[0];
        assert!((root.t0 - (1.6 / amp).asin()).abs() < 1e-9);
        assert!(root.simple && (root.slope - amp * root.t0.cos()).abs() < 1e-5);
        assert!(p.to_csv().starts_with("t0,M,quad_err\n"));
    }

    #[test]
    fn conservative_perturbation_has_zero_profile() {
        let (sys, _, orbit) = forced(0.0, "sin(x1)");
        let cfg = MelnikovConfig::default();
        let grid = [0.0, 1.0, 2.0, 3.0];
        let p = melnikov_profile(&sys, &orbit, &grid, &cfg).unwrap();
        assert!(p.m.iter().all(|m| m.abs() <= 10.0 * cfg.quad.abs_tol), "{:?}", p.m);
    }

    #[test]
    fn shooting_reproduces_separatrix() {
        let (sys, split, orbit) = forced(0.1, "sin(t)");
        let shot = homoclinic_shooting(&sys, &split, &ShootingConfig::default()).unwrap();
        assert!((&shot.exit_shift - &orbit.exit_shift).amax() < 1e-8, "{:?}", shot);
        for i in 0..=100 {
            let t = -5.0 + 0.1 * i as f64;
            assert!((shot.state(t) - orbit.state(t)).amax() < 1e-6, "t = {t} {}", (shot.state(t) - orbit.state(t)).amax());
        }
    }

    #[test]
    fn complement_drops_the_direction() {
        let b = DMatrix::identity(3, 3);
        let d = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let c = complement(&b, &d);
        assert_eq!(c.ncols(), 2);
        assert!((c.transpose() * d).amax() < 1e-14);
        assert_eq!(complement(&DMatrix::from_column_slice(2, 1, &[1.0, 0.0]), &DVector::from_vec(vec![2.0, 0.0])).ncols(), 0);
    }

    #[test]
    fn conservative_energy_is_positive_on_the_center_graph() {
        let b = crate::systems::builtin("elastic_pendulum_conservative", &Default::default()).unwrap();
        let split = default_split(&b.system).unwrap();
        let e = energy_positivity_check(&b.system, &split, 1e-2, 0.05, 3, &LpConfig::default()).unwrap();
        // No center directions: H restricted to the fast plane is |u|²/2 up to O(ε).
        assert!(e.passed && (e.min_ratio - 0.5).abs() < 1e-2, "{e:?}");
        assert_eq!(e.samples, 8);
    }

    proptest::proptest! {
        #[test]
        fn complement_is_orthonormal_and_orthogonal(vals in proptest::collection::vec(-1.0f64..1.0, 12), dv in proptest::collection::vec(-1.0f64..1.0, 4)) {
            let basis = DMatrix::from_column_slice(4, 3, &vals[..12]);
            let d = &basis * DVector::from_column_slice(&dv[..3]);
            proptest::prop_assume!(basis.clone().svd(false, false).singular_values.min() > 1e-3 && d.norm() > 1e-3);
            let c = complement(&basis, &d);
            proptest::prop_assert_eq!(c.ncols(), 2);
            proptest::prop_assert!((c.transpose() * &c - DMatrix::identity(2, 2)).amax() < 1e-10);
            proptest::prop_assert!((c.transpose() * &d).amax() < 1e-10 * d.norm());
        }

        #[test]
        fn integrand_is_periodic_in_t0(t in -8.0f64..8.0, t0 in 0.0f64..6.3) {
            let (sys, _, orbit) = forced(0.1, "sin(t)");
            let a = melnikov_integrand(&sys, &orbit, t, t0).unwrap();
            let b = melnikov_integrand(&sys, &orbit, t, t0 + 2.0 * PI).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
