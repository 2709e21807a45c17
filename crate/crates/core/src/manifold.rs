//! Lyapunov–Perron solvers for local integral manifolds and stable fibers.
//!
//! Every solver is one engine: a Picard iteration of the variation-of-constants
//! operator on a uniform grid of `[0, T]` in problem time `s`. Components in the
//! outgoing projection start from the chart coordinate at `s = 0`; incoming
//! components are integrated back from `s = T`, where they vanish. Backward-time
//! manifolds (u, cu) run the same engine on the time-reversed equation. The
//! convolution integrals are exact exponential quadratures of a cubic
//! interpolant of the forcing, so the stiff rotation `J/ε` costs nothing.

use std::f64::consts::LN_10;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::diagonalize::{CertificateMode, LinearBlocks};
use crate::error::{NespError, Result};
use crate::integrate::{integrate_full, IntegratorOptions};
use crate::linalg::{op_norm, phi_matrices, spectral_dichotomy, DichotomySplit, Gaps};
use crate::model::{probe_points, SlowFastSystem};
use crate::slowlimit::{SweepPoint, SweepResult};

/// Quintic bump: `1` on `[0, 1/3]`, `0` on `[1, ∞)`, smoothstep in between.
pub fn bump(s: f64) -> f64 {
    if s <= 1.0 / 3.0 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        let u = 1.5 * (s - 1.0 / 3.0);
        1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    }
}

pub fn bump_derivative(s: f64) -> f64 {
    if s <= 1.0 / 3.0 || s >= 1.0 {
        0.0
    } else {
        let u = 1.5 * (s - 1.0 / 3.0);
        -45.0 * u * u * (1.0 - u) * (1.0 - u)
    }
}

/// `max |λ'|` over a fine grid; the analytic value is `2.8125`.
pub fn bump_slope_bound() -> f64 {
    (0..=20_000).map(|i| bump_derivative(i as f64 / 10_000.0).abs()).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// The cut-off nonlinearity `(λ(ρ/r)F1, λ(ρ/r)G1)` with `ρ = |x| + |y|`,
/// `F1 = f − f_x x − f_y y`, `G1 = g − g_x x − g_y y`, and the linear blocks
/// taken at the origin with `ε = 0`.
#[derive(Debug, Clone)]
pub struct CutField {
    pub sys: SlowFastSystem,
    pub lin: LinearBlocks,
    pub radius: f64,
}

pub fn cutoff_modify(sys: &SlowFastSystem, r: f64) -> Result<CutField> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(NespError::Parameter(format!("cut-off radius must be positive, got {r}")));
    }
    let slope = bump_slope_bound();
    if slope > 3.0 {
        return Err(NespError::Model(format!("bump slope {slope} exceeds 3")));
    }
    // Linear blocks at ε = 0 are t-independent for a valid system.
    let lin = LinearBlocks::at_origin(sys, 0.0, 0.0)?;
    Ok(CutField { sys: sys.clone(), lin, radius: r })
}

impl CutField {
    pub fn lambda(&self, x: &[f64], y: &[f64]) -> f64 {
        bump((norm(x) + norm(y)) / self.radius)
    }

    /// Uncut remainders `(F1, G1)`.
    pub fn remainder(&self, x: &[f64], y: &[f64], t: f64, eps: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let xv = DVector::from_column_slice(x);
        let yv = DVector::from_column_slice(y);
        let f = self.sys.f_vec(x, y, t, eps)? - &self.lin.fx * &xv - &self.lin.fy * &yv;
        let g = self.sys.g_vec(x, y, t, eps)? - &self.lin.gx * &xv - &self.lin.gy * &yv;
        Ok((f, g))
    }

    /// Cut remainders `(F, G)`.
    pub fn eval(&self, x: &[f64], y: &[f64], t: f64, eps: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        let lam = self.lambda(x, y);
        if lam == 0.0 {
            return Ok((DVector::zeros(x.len()), DVector::zeros(y.len())));
        }
        let (f, g) = self.remainder(x, y, t, eps)?;
        Ok((f * lam, g * lam))
    }

    /// `A_f = A + f_x`.
    pub fn a_f(&self) -> DMatrix<f64> {
        self.lin.a_f()
    }
}

/// Dichotomy of `A_f` with the system's band hints, or bands fitted to the spectrum.
pub fn default_split(sys: &SlowFastSystem) -> Result<DichotomySplit> {
    let a_f = LinearBlocks::at_origin(sys, 0.0, 0.0)?.a_f();
    let gaps = match sys.hints.gaps {
        Some((a1, a2, a1p, a2p)) => Gaps::new(a1, a2, a1p, a2p)?,
        None => Gaps::auto(&a_f)?,
    };
    spectral_dichotomy(&a_f, gaps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ManifoldKind {
    Stable,
    Unstable,
    CenterStable,
    CenterUnstable,
    Center,
    Fiber,
}

impl ManifoldKind {
    pub fn name(self) -> &'static str {
        match self {
            ManifoldKind::Stable => "s",
            ManifoldKind::Unstable => "u",
            ManifoldKind::CenterStable => "cs",
            ManifoldKind::CenterUnstable => "cu",
            ManifoldKind::Center => "c",
            ManifoldKind::Fiber => "fiber",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "s" | "stable" => ManifoldKind::Stable,
            "u" | "unstable" => ManifoldKind::Unstable,
            "cs" | "center-stable" => ManifoldKind::CenterStable,
            "cu" | "center-unstable" => ManifoldKind::CenterUnstable,
            "c" | "center" => ManifoldKind::Center,
            "fiber" => ManifoldKind::Fiber,
            _ => return None,
        })
    }

    /// `+1` for forward-time problems, `-1` for backward-time ones.
    fn direction(self) -> f64 {
        match self {
            ManifoldKind::Unstable | ManifoldKind::CenterUnstable => -1.0,
            _ => 1.0,
        }
    }

    /// Rates on the `(a1, a2)` side of the spectrum.
    fn lower_window(self) -> bool {
        matches!(self, ManifoldKind::Stable | ManifoldKind::CenterUnstable | ManifoldKind::Fiber)
    }

    /// The fast block is a chart coordinate rather than a slaved one.
    fn fast_outgoing(self) -> bool {
        matches!(self, ManifoldKind::CenterStable | ManifoldKind::CenterUnstable)
    }

    /// The global manifold of the cut system rather than the local one of the original.
    fn is_cut(self) -> bool {
        !matches!(self, ManifoldKind::Stable | ManifoldKind::Unstable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpConfig {
    /// Weight exponent in `(a1, a2)`; the window midpoint when `None`.
    pub eta: Option<f64>,
    /// Weight exponent in `(a1', a2')` for the u and cs manifolds; midpoint when `None`.
    pub eta_prime: Option<f64>,
    /// Weight of the fast block in the norm; `max(ε, 1e-3)` when `None`.
    pub eps_star: Option<f64>,
    /// Cut-off radius; the system hint when `None`.
    pub radius: Option<f64>,
    /// Horizon; chosen from `tol` and the spectral gap when `None`.
    pub t_trunc: Option<f64>,
    pub t_trunc_max: f64,
    pub h_max: f64,
    /// `h ≤ fast_step·ε` when the fast block oscillates freely.
    pub fast_step: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub certificate: CertificateMode,
    /// Graph interpolation order, 1 or 3.
    pub interp_order: usize,
}

impl Default for LpConfig {
    fn default() -> Self {
        LpConfig {
            eta: None,
            eta_prime: None,
            eps_star: None,
            radius: None,
            t_trunc: None,
            t_trunc_max: 40.0,
            h_max: 0.02,
            fast_step: 0.25,
            tol: 1e-12,
            max_iter: 200,
            certificate: CertificateMode::Report,
            interp_order: 3,
        }
    }
}

impl LpConfig {
    pub fn eps_star(&self, eps: f64) -> f64 {
        self.eps_star.unwrap_or(eps.max(1e-3))
    }
}

/// Sufficient contraction conditions with measured constants; all three must be positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionReport {
    pub eta: f64,
    pub window: (f64, f64),
    pub eps_star: f64,
    /// Sampled `sup |D(F, G)|` over the cut ball.
    pub r_bar: f64,
    pub k: f64,
    pub c0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
}

impl ContractionReport {
    pub fn min(&self) -> f64 {
        self.sigma1.min(self.sigma2).min(self.sigma3)
    }
}

/// Sampled sup of the operator norm of the cut nonlinearity's Jacobian.
fn measure_r_bar(field: &CutField, t0: f64, eps: f64, slow_only: bool) -> Result<f64> {
    let (nx, ny) = (field.sys.n_x, if slow_only { 0 } else { field.sys.n_y });
    let n = nx + ny;
    let r = field.radius;
    let mut pts = probe_points(n, 48, r, 0x4d31);
    pts.push(vec![0.0; n]);
    let h = 1e-6 * r.max(1e-3);
    let zero_y = vec![0.0; field.sys.n_y];
    let eval = |z: &[f64], t: f64| -> Result<DVector<f64>> {
        let (x, y) = z.split_at(nx);
        let y = if slow_only { &zero_y[..] } else { y };
        let (f, g) = field.eval(x, y, t, eps)?;
        Ok(if slow_only { f } else { DVector::from_iterator(n, f.iter().chain(g.iter()).cloned()) })
    };
    let mut worst: f64 = 0.0;
    for p in pts.iter_mut() {
        let rho = norm(&p[..nx]) + norm(&p[nx..]);
        if rho > r {
            p.iter_mut().for_each(|v| *v *= r / rho);
        }
        for dt in [0.0, 0.7, 1.9] {
            let mut jac = DMatrix::zeros(n, n);
            for i in 0..n {
                let mut zp = p.clone();
                let mut zm = p.clone();
                zp[i] += h;
                zm[i] -= h;
                let col = (eval(&zp, t0 + dt)? - eval(&zm, t0 + dt)?) / (2.0 * h);
                jac.set_column(i, &col);
            }
            worst = worst.max(op_norm(&jac));
        }
    }
    Ok(worst)
}

fn contraction_report(
    field: &CutField,
    split: &DichotomySplit,
    window: (f64, f64),
    eta: f64,
    t0: f64,
    eps: f64,
    eps_star: f64,
    slow_only: bool,
) -> Result<ContractionReport> {
    let r_bar = measure_r_bar(field, t0, eps, slow_only)?;
    let lin = &field.lin;
    let c0 = [op_norm(&lin.fy), op_norm(&lin.gx), op_norm(&lin.gy), 1.0].into_iter().fold(0.0, f64::max);
    let k = split.k.max(1.0);
    let (a1, a2) = window;
    let sigma1 = 0.5 - c0 * c0 * eps;
    let sigma2 = 1.0 - 3.0 * (k / (a2 - eta) + k / (eta - a1) + 1.0) * (r_bar + c0 * eps_star);
    let sigma3 = 1.0 - (3.0 / eps_star) * (k / (a2 - eta) + k + 1.0) * (r_bar + 2.0 * c0 * c0 * eps);
    Ok(ContractionReport { eta, window, eps_star, r_bar, k, c0, sigma1, sigma2, sigma3 })
}

/// Monomial coefficients of the Lagrange basis on `nodes`: `ℓ_j(s) = Σ_m c[j][m] s^m`.
fn lagrange_monomials(nodes: &[f64; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for j in 0..4 {
        let mut poly = [1.0, 0.0, 0.0, 0.0];
        let mut denom = 1.0;
        let mut deg = 0;
        for i in 0..4 {
            if i == j {
                continue;
            }
            for m in (0..=deg + 1).rev() {
                let lower = if m > 0 { poly[m - 1] } else { 0.0 };
                poly[m] = lower - nodes[i] * poly[m];
            }
            deg += 1;
            denom *= nodes[j] - nodes[i];
        }
        for m in 0..4 {
            out[j][m] = poly[m] / denom;
        }
    }
    out
}

/// Stencil offsets for the first, interior and last intervals.
const PATTERNS: [[isize; 4]; 3] = [[0, 1, 2, 3], [-1, 0, 1, 2], [-2, -1, 0, 1]];

fn pattern(k: usize, steps: usize) -> usize {
    if k == 0 {
        0
    } else if k + 2 > steps {
        2
    } else {
        1
    }
}

/// `W_j` with `∫_0^h e^{(h−σ)M} p(σ) dσ = Σ_j W_j w_j` for the cubic `p` through
/// `w_j` at `σ = nodes[j]·h`.
fn etd_weights(phis: &[DMatrix<f64>], h: f64, nodes: &[f64; 4]) -> [DMatrix<f64>; 4] {
    let c = lagrange_monomials(nodes);
    let fact = [1.0, 1.0, 2.0, 6.0];
    std::array::from_fn(|j| {
        let mut w = DMatrix::zeros(phis[0].nrows(), phis[0].ncols());
        for m in 0..4 {
            w += &phis[m + 1] * (h * c[j][m] * fact[m]);
        }
        w
    })
}

/// Discrete variation-of-constants operator for one problem.
struct Engine {
    n: usize,
    steps: usize,
    e_out: DMatrix<f64>,
    e_in: DMatrix<f64>,
    w_out: [[DMatrix<f64>; 4]; 3],
    w_in: [[DMatrix<f64>; 4]; 3],
}

impl Engine {
    fn new(l: &DMatrix<f64>, p_out: &DMatrix<f64>, h: f64, steps: usize) -> Self {
        let n = l.nrows();
        let p_in = DMatrix::identity(n, n) - p_out;
        let fwd = phi_matrices(&(l * h), 4);
        let bwd = phi_matrices(&(l * -h), 4);
        let w_out = std::array::from_fn(|p| {
            let nodes = PATTERNS[p].map(|o| o as f64);
            etd_weights(&fwd, h, &nodes).map(|w| p_out * w)
        });
        // Backward over [t_k, t_{k+1}] in σ' = t_{k+1} − τ: node k+o sits at σ' = (1 − o)h.
        let w_in = std::array::from_fn(|p| {
            let nodes = PATTERNS[p].map(|o| 1.0 - o as f64);
            etd_weights(&bwd, h, &nodes).map(|w| &p_in * w)
        });
        Engine { n, steps, e_out: p_out * &fwd[0], e_in: &p_in * &bwd[0], w_out, w_in }
    }

    /// Apply the operator to the forcing samples `w` (columns per node).
    fn sweep(&self, xi: &DVector<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, steps) = (self.n, self.steps);
        let mut z = DMatrix::zeros(n, steps + 1);
        let mut acc = DVector::zeros(n);
        let mut cur = xi.clone();
        z.set_column(0, &cur);
        for k in 0..steps {
            let p = pattern(k, steps);
            acc.gemv(1.0, &self.e_out, &cur, 0.0);
            for (j, o) in PATTERNS[p].iter().enumerate() {
                acc.gemv(1.0, &self.w_out[p][j], &w.column((k as isize + o) as usize), 1.0);
            }
            std::mem::swap(&mut cur, &mut acc);
            z.set_column(k + 1, &cur);
        }
        cur.fill(0.0);
        for k in (0..steps).rev() {
            let p = pattern(k, steps);
            acc.gemv(1.0, &self.e_in, &cur, 0.0);
            for (j, o) in PATTERNS[p].iter().enumerate() {
                acc.gemv(-1.0, &self.w_in[p][j], &w.column((k as isize + o) as usize), 1.0);
            }
            std::mem::swap(&mut cur, &mut acc);
            let mut col = z.column_mut(k);
            col += &cur;
        }
        z
    }
}

/// Converged Picard orbit of one solve.
#[derive(Debug, Clone, Serialize)]
pub struct LpSolution {
    pub kind: ManifoldKind,
    pub t0: f64,
    pub eps: f64,
    /// Times relative to `t0`; negative for backward-time manifolds.
    pub times: Vec<f64>,
    /// Columns `(x, y)` at `times`; relative to the base orbit for fibers.
    #[serde(skip)]
    pub states: DMatrix<f64>,
    pub n_x: usize,
    pub eta: f64,
    pub h: f64,
    pub t_trunc: f64,
    /// The horizon hit `t_trunc_max` before reaching the tolerance-derived value.
    pub truncation_capped: bool,
    pub iterations: usize,
    /// Last Picard update in the weighted norm.
    pub last_step: f64,
    pub eps_star: f64,
}

impl LpSolution {
    pub fn state(&self, k: usize) -> DVector<f64> {
        self.states.column(k).into_owned()
    }

    /// Fitted exponential rate of `|x| + |y|/ε⋆` in `t` along the orbit, away from
    /// the chart point and the underflow region.
    pub fn decay_rate(&self) -> Option<f64> {
        let vals: Vec<f64> = (0..self.states.ncols())
            .map(|k| {
                let c = self.states.column(k);
                norm(c.rows(0, self.n_x).as_slice())
                    + norm(c.rows(self.n_x, c.nrows() - self.n_x).as_slice()) / self.eps_star
            })
            .collect();
        let top = vals.iter().cloned().fold(0.0, f64::max);
        let pts: Vec<(f64, f64)> = self
            .times
            .iter()
            .zip(&vals)
            .filter(|(t, v)| t.abs() >= 1.0 && **v > 1e-11 * top && **v > 0.0)
            .map(|(t, v)| (t.abs(), v.ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        if sxx == 0.0 {
            return None;
        }
        let slope = sxy / sxx;
        Some(if self.times.last().copied().unwrap_or(0.0) < 0.0 { -slope } else { slope })
    }
}

/// Graph value of one chart point plus its orbit.
#[derive(Debug, Clone, Serialize)]
pub struct GraphPoint {
    pub kind: ManifoldKind,
    /// s, u: `((I − P)x(0), y(0))`; cs: `P_u x(0)`; cu: `P_s x(0)`.
    #[serde(serialize_with = "ser_vec")]
    pub value: DVector<f64>,
    /// The manifold point `(x(0), y(0))`.
    #[serde(serialize_with = "ser_vec")]
    pub point: DVector<f64>,
    pub solution: LpSolution,
    pub contraction: ContractionReport,
}

fn ser_vec<S: serde::Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (na, nb) = (a.nrows(), b.nrows());
    let mut m = DMatrix::zeros(na + nb, na + nb);
    m.view_mut((0, 0), (na, na)).copy_from(a);
    m.view_mut((na, na), (nb, nb)).copy_from(b);
    m
}

/// `g(x, 0, t, ε) ≡ 0` on probes: `y ≡ 0` is invariant and the fast block can be skipped.
fn fast_dormant(sys: &SlowFastSystem, r: f64, eps: f64) -> Result<bool> {
    if sys.n_y == 0 {
        return Ok(true);
    }
    let y0 = vec![0.0; sys.n_y];
    for x in probe_points(sys.n_x, 16, r, 0xd0e5) {
        for t in [0.0, 0.7, 1.9, 4.3] {
            if sys.g_vec(&x, &y0, t, eps)?.amax() > 1e-14 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

struct Problem<'a> {
    field: &'a CutField,
    split: &'a DichotomySplit,
    kind: ManifoldKind,
    t0: f64,
    eps: f64,
    cfg: &'a LpConfig,
    /// y ≡ 0 and the fast block is dropped.
    slow_only: bool,
}

/// Grid and weight parameters resolved for one problem.
/// Unweighted Picard steps below this (relative to the orbit size) count as converged.
const ROUNDOFF_FLOOR: f64 = 1e3 * f64::EPSILON;

struct Resolved {
    eta: f64,
    window: (f64, f64),
    h: f64,
    steps: usize,
    t_trunc: f64,
    capped: bool,
    eps_star: f64,
}

impl<'a> Problem<'a> {
    fn n_x(&self) -> usize {
        self.field.sys.n_x
    }

    fn n_y(&self) -> usize {
        if self.slow_only {
            0
        } else {
            self.field.sys.n_y
        }
    }

    fn resolve(&self, fast_resolution: bool) -> Result<Resolved> {
        let g = self.split.gaps;
        let (window, eta) = if self.kind.lower_window() {
            ((g.a1, g.a2), self.cfg.eta)
        } else {
            ((g.a1p, g.a2p), self.cfg.eta_prime)
        };
        let eta = eta.unwrap_or(0.5 * (window.0 + window.1));
        if !(eta > window.0 && eta < window.1) {
            return Err(NespError::Parameter(format!(
                "eta = {eta} must lie strictly inside ({}, {}) for the {} manifold",
                window.0,
                window.1,
                self.kind.name()
            )));
        }
        let gap = (eta - window.0).min(window.1 - eta);
        let wanted = (100.0 / self.cfg.tol).ln() / gap;
        let (t_trunc, capped) = match self.cfg.t_trunc {
            Some(t) => (t, false),
            None => (wanted.min(self.cfg.t_trunc_max), wanted > self.cfg.t_trunc_max),
        };
        if !(t_trunc > 0.0) {
            return Err(NespError::Parameter("the truncation horizon must be positive".into()));
        }
        let mut h = self.cfg.h_max;
        if fast_resolution && self.n_y() > 0 {
            h = h.min(self.cfg.fast_step * self.eps);
        }
        let steps = ((t_trunc / h).ceil() as usize).max(8);
        Ok(Resolved {
            eta,
            window,
            h: t_trunc / steps as f64,
            steps,
            t_trunc,
            capped,
            eps_star: self.cfg.eps_star(self.eps),
        })
    }

    /// Outgoing projection on the active state space.
    fn p_out(&self) -> DMatrix<f64> {
        let s = self.split;
        let px = match self.kind {
            ManifoldKind::Stable | ManifoldKind::Fiber => s.p_s.clone(),
            ManifoldKind::Unstable => s.p_u.clone(),
            ManifoldKind::CenterStable => s.p_cs(),
            ManifoldKind::CenterUnstable => s.p_cu(),
            ManifoldKind::Center => unreachable!("the center graph is assembled from cs and cu"),
        };
        let ny = self.n_y();
        let py = if self.kind.fast_outgoing() { DMatrix::identity(ny, ny) } else { DMatrix::zeros(ny, ny) };
        block_diag(&px, &py)
    }

    fn generator(&self) -> DMatrix<f64> {
        let a_f = self.field.a_f();
        if self.n_y() == 0 {
            return a_f;
        }
        let lin = &self.field.lin;
        block_diag(&a_f, &(&lin.j / self.eps + &lin.gy))
    }

    /// `d·w(z, t0 + d·s)`, `w = (f_y y + F, g_x x + G)`.
    fn forcing(&self, s: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.kind.direction();
        let t = self.t0 + d * s;
        let nx = self.n_x();
        let zeros;
        let (x, y) = if self.slow_only {
            zeros = vec![0.0; self.field.sys.n_y];
            (z, &zeros[..])
        } else {
            z.split_at(nx)
        };
        let (f, g) = if self.kind.is_cut() {
            self.field.eval(x, y, t, self.eps)?
        } else {
            self.field.remainder(x, y, t, self.eps)?
        };
        let lin = &self.field.lin;
        let yv = DVector::from_column_slice(y);
        let wx = f + &lin.fy * &yv;
        out[..nx].iter_mut().zip(wx.iter()).for_each(|(o, v)| *o = d * v);
        if !self.slow_only {
            let wy = g + &lin.gx * DVector::from_column_slice(x);
            out[nx..].iter_mut().zip(wy.iter()).for_each(|(o, v)| *o = d * v);
        }
        Ok(())
    }

    fn weighted_norm(&self, z: &DMatrix<f64>, res: &Resolved) -> f64 {
        let nx = self.n_x();
        let eta_p = self.kind.direction() * res.eta;
        (0..z.ncols())
            .map(|k| {
                let c = z.column(k);
                let v = norm(c.rows(0, nx).as_slice()) + norm(c.rows(nx, c.nrows() - nx).as_slice()) / res.eps_star;
                (-eta_p * k as f64 * res.h).exp() * v
            })
            .fold(0.0, f64::max)
    }

    /// Picard iteration; `base` is the orbit the fiber is measured from.
    fn solve(&self, xi: &DVector<f64>, res: &Resolved, base: Option<&DMatrix<f64>>) -> Result<LpSolution> {
        let n = self.n_x() + self.n_y();
        let engine = Engine::new(&(self.generator() * self.kind.direction()), &self.p_out(), res.h, res.steps);
        let cols = res.steps + 1;
        let base_w = match base {
            Some(b) => Some(self.sample(b, res, None)?),
            None => None,
        };
        let radius = self.field.radius;
        let nx = self.n_x();
        let mut w = DMatrix::zeros(n, cols);
        let mut z = engine.sweep(xi, &w);
        let mut last = f64::INFINITY;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < self.cfg.max_iter {
            iterations += 1;
            if !self.kind.is_cut() {
                let worst = (0..cols)
                    .map(|k| {
                        let c = z.column(k);
                        norm(c.rows(0, nx).as_slice()) + norm(c.rows(nx, n - nx).as_slice())
                    })
                    .fold(0.0, f64::max);
                if worst > radius {
                    return Err(NespError::Radius(format!(
                        "{} manifold orbit reaches |x| + |y| = {worst:.3e} > r = {radius}",
                        self.kind.name()
                    )));
                }
            }
            w = self.sample(&z, res, base)?;
            if let Some(bw) = &base_w {
                w -= bw;
            }
            let next = engine.sweep(xi, &w);
            let diff = &next - &z;
            last = self.weighted_norm(&diff, res);
            // The growing weight amplifies roundoff in the field near the far end of the
            // window; an unweighted step at roundoff level is converged as well.
            let raw = diff.amax();
            let floor = ROUNDOFF_FLOOR * (1.0 + next.amax());
            z = next;
            if !last.is_finite() || last > 1e8 {
                return Err(NespError::NoConvergence(format!(
                    "Picard iteration for the {} manifold diverged at iteration {iterations}",
                    self.kind.name()
                )));
            }
            if last < self.cfg.tol || raw <= floor {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(NespError::NoConvergence(format!(
                "Picard iteration for the {} manifold: step {last:.3e} after {iterations} iterations",
                self.kind.name()
            )));
        }
        let d = self.kind.direction();
        let mut states = DMatrix::zeros(self.n_x() + self.field.sys.n_y, cols);
        states.view_mut((0, 0), (n, cols)).copy_from(&z);
        Ok(LpSolution {
            kind: self.kind,
            t0: self.t0,
            eps: self.eps,
            times: (0..cols).map(|k| d * k as f64 * res.h).collect(),
            states,
            n_x: self.n_x(),
            eta: res.eta,
            h: res.h,
            t_trunc: res.t_trunc,
            truncation_capped: res.capped,
            iterations,
            last_step: last,
            eps_star: res.eps_star,
        })
    }

    /// Forcing at every node of `z` (shifted by `base` when given).
    fn sample(&self, z: &DMatrix<f64>, res: &Resolved, base: Option<&DMatrix<f64>>) -> Result<DMatrix<f64>> {
        let n = z.nrows();
        let mut w = DMatrix::zeros(n, z.ncols());
        let h = res.h;
        w.as_mut_slice().par_chunks_mut(n).with_min_len(256).enumerate().try_for_each(|(k, out)| {
            let zk = &z.as_slice()[k * n..(k + 1) * n];
            match base {
                Some(b) => {
                    let pt: Vec<f64> = zk.iter().zip(&b.as_slice()[k * n..(k + 1) * n]).map(|(a, c)| a + c).collect();
                    self.forcing(k as f64 * h, &pt, out)
                }
                None => self.forcing(k as f64 * h, zk, out),
            }
        })?;
        Ok(w)
    }
}

fn check_in_range(p: &DMatrix<f64>, v: &DVector<f64>, what: &str) -> Result<()> {
    let off = (v - p * v).norm();
    if off > 1e-9 * v.norm().max(1.0) {
        return Err(NespError::Parameter(format!("{what} has a component {off:.3e} outside its subspace")));
    }
    Ok(())
}

fn context(sys: &SlowFastSystem, cfg: &LpConfig) -> Result<CutField> {
    cutoff_modify(sys, cfg.radius.unwrap_or(sys.hints.cutoff_radius))
}

fn check_dims(sys: &SlowFastSystem, split: &DichotomySplit, xi_x: &[f64], xi_y: &[f64]) -> Result<()> {
    if split.n() != sys.n_x || xi_x.len() != sys.n_x || (!xi_y.is_empty() && xi_y.len() != sys.n_y) {
        return Err(NespError::Dimension("chart coordinates do not match the system".into()));
    }
    Ok(())
}

/// Graph solve for one of s, u, cs, cu. `xi_y` is ignored for s and u and for the
/// slow-only operator; `slow_only` drops the fast block (`y ≡ 0`), which is the
/// unperturbed operator and the only meaningful one at `eps = 0`.
#[allow(clippy::too_many_arguments)]
pub fn solve_graph(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    kind: ManifoldKind,
    xi_x: &[f64],
    xi_y: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
    slow_only: bool,
) -> Result<GraphPoint> {
    let field = context(sys, cfg)?;
    solve_with(&field, split, kind, xi_x, xi_y, t0, eps, cfg, slow_only, None)
}

#[allow(clippy::too_many_arguments)]
fn solve_with(
    field: &CutField,
    split: &DichotomySplit,
    kind: ManifoldKind,
    xi_x: &[f64],
    xi_y: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
    slow_only: bool,
    grid: Option<(f64, usize)>,
) -> Result<GraphPoint> {
    let sys = &field.sys;
    check_dims(sys, split, xi_x, xi_y)?;
    if matches!(kind, ManifoldKind::Center | ManifoldKind::Fiber) {
        return Err(NespError::Parameter(format!("{} is not a single-graph manifold", kind.name())));
    }
    if eps < 0.0 || (eps == 0.0 && !slow_only) {
        return Err(NespError::Parameter("eps must be positive for the full operator".into()));
    }
    let xv = DVector::from_column_slice(xi_x);
    let yv = if xi_y.is_empty() || !kind.fast_outgoing() { DVector::zeros(sys.n_y) } else { DVector::from_column_slice(xi_y) };
    let px = match kind {
        ManifoldKind::Stable => split.p_s.clone(),
        ManifoldKind::Unstable => split.p_u.clone(),
        ManifoldKind::CenterStable => split.p_cs(),
        _ => split.p_cu(),
    };
    check_in_range(&px, &xv, &format!("the {} chart coordinate", kind.name()))?;
    let slow_only = slow_only || (yv.amax() == 0.0 && fast_dormant(sys, field.radius, eps)?);
    let prob = Problem { field, split, kind, t0, eps, cfg, slow_only };
    let mut res = prob.resolve(kind.fast_outgoing())?;
    if let Some((h, steps)) = grid {
        res.h = h;
        res.steps = steps;
        res.t_trunc = h * steps as f64;
    }
    let contraction =
        contraction_report(field, split, res.window, res.eta, t0, eps, res.eps_star, slow_only)?;
    if cfg.certificate == CertificateMode::Enforce && contraction.min() <= 0.0 {
        return Err(NespError::NoContraction(format!(
            "sigma1 = {:.3e}, sigma2 = {:.3e}, sigma3 = {:.3e} (r_bar = {:.3e}, K = {:.3}, eta = {})",
            contraction.sigma1, contraction.sigma2, contraction.sigma3, contraction.r_bar, contraction.k, res.eta
        )));
    }
    let xi: DVector<f64> = if slow_only {
        xv.clone()
    } else {
        DVector::from_iterator(sys.n_x + sys.n_y, xv.iter().chain(yv.iter()).cloned())
    };
    let solution = prob.solve(&xi, &res, None)?;
    let point = solution.state(0);
    let x0 = point.rows(0, sys.n_x).into_owned();
    let y0 = point.rows(sys.n_x, sys.n_y).into_owned();
    let value = match kind {
        ManifoldKind::Stable => stack(&(&x0 - &split.p_s * &x0), &y0),
        ManifoldKind::Unstable => stack(&(&x0 - &split.p_u * &x0), &y0),
        ManifoldKind::CenterStable => &split.p_u * &x0,
        _ => &split.p_s * &x0,
    };
    Ok(GraphPoint { kind, value, point, solution, contraction })
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).cloned())
}

/// `h_s(ξ_cu, ξ_y)`: the center-unstable manifold of the cut system.
pub fn solve_cu_graph(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_cu: &[f64],
    xi_y: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<GraphPoint> {
    solve_graph(sys, split, ManifoldKind::CenterUnstable, xi_cu, xi_y, t0, eps, cfg, false)
}

/// `h_u(ξ_cs, ξ_y)`: the center-stable manifold of the cut system.
pub fn solve_cs_graph(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_cs: &[f64],
    xi_y: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<GraphPoint> {
    solve_graph(sys, split, ManifoldKind::CenterStable, xi_cs, xi_y, t0, eps, cfg, false)
}

/// `h_cu(ξ_s)`: the local stable manifold of the original system.
pub fn solve_s_graph(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_s: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<GraphPoint> {
    solve_graph(sys, split, ManifoldKind::Stable, xi_s, &[], t0, eps, cfg, false)
}

/// `h_cs(ξ_u)`: the local unstable manifold of the original system.
pub fn solve_u_graph(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_u: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<GraphPoint> {
    solve_graph(sys, split, ManifoldKind::Unstable, xi_u, &[], t0, eps, cfg, false)
}

/// `h_s*(ξ_cu)`: the center-unstable manifold of `ẋ = A_f x + F(x, 0, t, ε)`.
pub fn unperturbed_graph(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_cu: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<GraphPoint> {
    solve_graph(sys, split, ManifoldKind::CenterUnstable, xi_cu, &[], t0, eps, cfg, true)
}

#[derive(Debug, Clone, Serialize)]
pub struct CenterPoint {
    #[serde(serialize_with = "ser_vec")]
    pub psi_s: DVector<f64>,
    #[serde(serialize_with = "ser_vec")]
    pub psi_u: DVector<f64>,
    /// `ξ_c + Ψ_s + Ψ_u` and `ξ_y`.
    #[serde(serialize_with = "ser_vec")]
    pub point: DVector<f64>,
    pub alternations: usize,
    pub change: f64,
}

const CENTER_TOL: f64 = 1e-10;
const CENTER_MAX: usize = 100;

/// `Ψ = (Ψ_s, Ψ_u)(ξ_c, ξ_y)` as the intersection of the cu and cs graphs.
#[allow(clippy::too_many_arguments)]
pub fn solve_center_graph(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_c: &[f64],
    xi_y: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
    slow_only: bool,
) -> Result<CenterPoint> {
    let field = context(sys, cfg)?;
    center_with(&field, split, xi_c, xi_y, t0, eps, cfg, slow_only)
}

#[allow(clippy::too_many_arguments)]
fn center_with(
    field: &CutField,
    split: &DichotomySplit,
    xi_c: &[f64],
    xi_y: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
    slow_only: bool,
) -> Result<CenterPoint> {
    let sys = &field.sys;
    check_dims(sys, split, xi_c, xi_y)?;
    let c = DVector::from_column_slice(xi_c);
    check_in_range(&split.p_c, &c, "the center chart coordinate")?;
    let yv = if xi_y.is_empty() || slow_only { DVector::zeros(sys.n_y) } else { DVector::from_column_slice(xi_y) };
    let mut psi_s = DVector::zeros(sys.n_x);
    let mut psi_u = DVector::zeros(sys.n_x);
    let mut change = f64::INFINITY;
    let mut it = 0;
    while it < CENTER_MAX {
        it += 1;
        let cu = solve_with(
            field,
            split,
            ManifoldKind::CenterUnstable,
            (&c + &psi_u).as_slice(),
            yv.as_slice(),
            t0,
            eps,
            cfg,
            slow_only,
            None,
        )?;
        let cs = solve_with(
            field,
            split,
            ManifoldKind::CenterStable,
            (&c + &cu.value).as_slice(),
            yv.as_slice(),
            t0,
            eps,
            cfg,
            slow_only,
            None,
        )?;
        change = (&cu.value - &psi_s).norm() + (&cs.value - &psi_u).norm();
        psi_s = cu.value;
        psi_u = cs.value;
        if change < CENTER_TOL {
            break;
        }
    }
    if !(change < CENTER_TOL) {
        return Err(NespError::NoConvergence(format!("center graph alternation: change {change:.3e} after {it} rounds")));
    }
    let point = stack(&(&c + &psi_s + &psi_u), &yv);
    Ok(CenterPoint { psi_s, psi_u, point, alternations: it, change })
}

#[derive(Debug, Clone, Serialize)]
pub struct FiberPoint {
    /// Base point on the center manifold.
    #[serde(serialize_with = "ser_vec")]
    pub base: DVector<f64>,
    /// `σ_cu(ξ_s, ξ_cy) = base + (x̃(0), ỹ(0))`.
    #[serde(serialize_with = "ser_vec")]
    pub point: DVector<f64>,
    pub solution: LpSolution,
}

/// Stable fiber through `ξ_s` based at the center-manifold point over `(ξ_c, ξ_y)`.
#[allow(clippy::too_many_arguments)]
pub fn solve_fiber(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_s: &[f64],
    xi_c: &[f64],
    xi_y: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
    slow_only: bool,
) -> Result<FiberPoint> {
    let field = context(sys, cfg)?;
    check_dims(sys, split, xi_s, xi_y)?;
    let s = DVector::from_column_slice(xi_s);
    check_in_range(&split.p_s, &s, "the stable fiber coordinate")?;
    if eps < 0.0 || (eps == 0.0 && !slow_only) {
        return Err(NespError::Parameter("eps must be positive for the full operator".into()));
    }
    let center = center_with(&field, split, xi_c, xi_y, t0, eps, cfg, slow_only)?;
    let (nx, ny) = (sys.n_x, sys.n_y);
    let base_y_zero = center.point.rows(nx, ny).amax() == 0.0;
    let slow_only = slow_only || (base_y_zero && fast_dormant(sys, field.radius, eps)?);
    let prob = Problem { field: &field, split, kind: ManifoldKind::Fiber, t0, eps, cfg, slow_only };
    // The base orbit oscillates on the fast scale only if its y-part does.
    let res = prob.resolve(!base_y_zero)?;
    let n = prob.n_x() + prob.n_y();
    let base = if center.point.amax() == 0.0 {
        DMatrix::zeros(n, res.steps + 1)
    } else {
        let cx = center.point.rows(0, nx).into_owned();
        let cy = center.point.rows(nx, ny).into_owned();
        let orbit = solve_with(
            &field,
            split,
            ManifoldKind::CenterStable,
            (&split.p_cs() * &cx).as_slice(),
            cy.as_slice(),
            t0,
            eps,
            cfg,
            slow_only,
            Some((res.h, res.steps)),
        )?;
        orbit.solution.states.rows(0, n).into_owned()
    };
    let xi = if slow_only { s.clone() } else { stack(&s, &DVector::zeros(ny)) };
    let solution = prob.solve(&xi, &res, Some(&base))?;
    let mut point = center.point.clone();
    point += solution.state(0);
    Ok(FiberPoint { base: center.point, point, solution })
}

/// Distance to the graph after flowing a graph point by `delta` in the manifold's
/// natural time direction with the full system.
#[allow(clippy::too_many_arguments)]
pub fn invariance_residual(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    kind: ManifoldKind,
    xi_x: &[f64],
    xi_y: &[f64],
    t0: f64,
    delta: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<f64> {
    let gp = solve_graph(sys, split, kind, xi_x, xi_y, t0, eps, cfg, false)?;
    let (nx, ny) = (sys.n_x, sys.n_y);
    let t1 = t0 + kind.direction() * delta;
    let p = &gp.point;
    let traj = integrate_full(
        sys,
        p.rows(0, nx).as_slice(),
        p.rows(nx, ny).as_slice(),
        t0,
        t1,
        eps,
        &IntegratorOptions::tight(),
    )?;
    let q = DVector::from_vec(traj.final_state());
    let qx = q.rows(0, nx).into_owned();
    let qy = q.rows(nx, ny).into_owned();
    let (base, graph_part): (DVector<f64>, DVector<f64>) = match kind {
        ManifoldKind::Stable => (&split.p_s * &qx, stack(&(&qx - &split.p_s * &qx), &qy)),
        ManifoldKind::Unstable => (&split.p_u * &qx, stack(&(&qx - &split.p_u * &qx), &qy)),
        ManifoldKind::CenterStable => (split.p_cs() * &qx, &split.p_u * &qx),
        ManifoldKind::CenterUnstable => (split.p_cu() * &qx, &split.p_s * &qx),
        _ => return Err(NespError::Parameter(format!("no single graph for the {} manifold", kind.name()))),
    };
    let again = solve_graph(sys, split, kind, base.as_slice(), qy.as_slice(), t1, eps, cfg, false)?;
    Ok((again.value - graph_part).norm())
}

/// One axis of a tensor-product chart grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphAxis {
    pub label: String,
    /// Direction in `(x, y)` space.
    pub direction: Vec<f64>,
    pub nodes: Vec<f64>,
}

impl GraphAxis {
    pub fn uniform(label: &str, direction: Vec<f64>, half_width: f64, count: usize) -> Self {
        let count = count.max(2);
        let nodes = (0..count).map(|i| -half_width + 2.0 * half_width * i as f64 / (count - 1) as f64).collect();
        GraphAxis { label: label.to_string(), direction, nodes }
    }
}

/// Unit chart directions of a manifold kind: band eigenbasis columns, then fast unit vectors.
pub fn chart_directions(sys: &SlowFastSystem, split: &DichotomySplit, kind: ManifoldKind) -> Vec<(String, Vec<f64>)> {
    let (nx, ny) = (sys.n_x, sys.n_y);
    let mut out = Vec::new();
    let mut push = |tag: &str, v: &DMatrix<f64>| {
        for j in 0..v.ncols() {
            let c = v.column(j);
            let c = &c / c.norm();
            let mut d = vec![0.0; nx + ny];
            d[..nx].copy_from_slice(c.as_slice());
            out.push((format!("xi_{tag}{j}"), d));
        }
    };
    match kind {
        ManifoldKind::Stable | ManifoldKind::Fiber => push("s", &split.v_s),
        ManifoldKind::Unstable => push("u", &split.v_u),
        ManifoldKind::CenterStable => {
            push("c", &split.v_c);
            push("s", &split.v_s);
        }
        ManifoldKind::CenterUnstable => {
            push("c", &split.v_c);
            push("u", &split.v_u);
        }
        ManifoldKind::Center => push("c", &split.v_c),
    }
    if matches!(kind, ManifoldKind::CenterStable | ManifoldKind::CenterUnstable | ManifoldKind::Center) {
        for i in 0..ny {
            let mut d = vec![0.0; nx + ny];
            d[nx + i] = 1.0;
            out.push((format!("xi_y{i}"), d));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphReport {
    pub contraction: Option<ContractionReport>,
    pub t_trunc: f64,
    pub truncation_capped: bool,
    pub h: f64,
    pub max_iterations: usize,
    pub max_last_step: f64,
    pub nodes: usize,
}

/// Graph values on a tensor grid with local Lagrange interpolation.
#[derive(Debug, Clone, Serialize)]
pub struct ManifoldGraph {
    pub kind: ManifoldKind,
    pub t0: f64,
    pub eps: f64,
    pub axes: Vec<GraphAxis>,
    pub value_labels: Vec<String>,
    /// Row-major over the axes, last axis fastest.
    pub values: Vec<Vec<f64>>,
    pub order: usize,
    pub report: GraphReport,
}

fn value_labels(kind: ManifoldKind, nx: usize, ny: usize) -> Vec<String> {
    let mut v: Vec<String> = (0..nx).map(|i| format!("h_x{i}")).collect();
    if matches!(kind, ManifoldKind::Stable | ManifoldKind::Unstable) {
        v.extend((0..ny).map(|i| format!("h_y{i}")));
    }
    if kind == ManifoldKind::Center {
        v = (0..nx).map(|i| format!("psi_s{i}")).chain((0..nx).map(|i| format!("psi_u{i}"))).collect();
    }
    if kind == ManifoldKind::Fiber {
        v = (0..nx).map(|i| format!("x{i}")).chain((0..ny).map(|i| format!("y{i}"))).collect();
    }
    v
}

/// Solve every grid node (in parallel) and assemble the graph in node order.
/// Fibers are based at the origin's center-manifold point.
pub fn compute_graph(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    kind: ManifoldKind,
    axes: Vec<GraphAxis>,
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<ManifoldGraph> {
    let (nx, ny) = (sys.n_x, sys.n_y);
    if axes.is_empty() || axes.iter().any(|a| a.direction.len() != nx + ny || a.nodes.len() < 2) {
        return Err(NespError::Dimension("graph axes need (x, y) directions and at least two nodes".into()));
    }
    if !matches!(cfg.interp_order, 1 | 3) {
        return Err(NespError::Parameter("interpolation order must be 1 or 3".into()));
    }
    let shape: Vec<usize> = axes.iter().map(|a| a.nodes.len()).collect();
    let total: usize = shape.iter().product();
    let field = context(sys, cfg)?;
    let results: Vec<Result<(Vec<f64>, Option<ContractionReport>, Option<LpSolution>)>> = (0..total)
        .into_par_iter()
        .map(|flat| {
            let idx = unflatten(flat, &shape);
            let mut z = vec![0.0; nx + ny];
            for (a, &i) in axes.iter().zip(&idx) {
                z.iter_mut().zip(&a.direction).for_each(|(v, d)| *v += a.nodes[i] * d);
            }
            let (x, y) = z.split_at(nx);
            match kind {
                ManifoldKind::Center => {
                    let c = center_with(&field, split, x, y, t0, eps, cfg, false)?;
                    Ok((c.psi_s.iter().chain(c.psi_u.iter()).cloned().collect(), None, None))
                }
                ManifoldKind::Fiber => {
                    let f = solve_fiber(sys, split, x, &vec![0.0; nx], &[], t0, eps, cfg, false)?;
                    Ok((f.point.iter().cloned().collect(), None, Some(f.solution)))
                }
                _ => {
                    let g = solve_with(&field, split, kind, x, y, t0, eps, cfg, false, None)?;
                    Ok((g.value.iter().cloned().collect(), Some(g.contraction), Some(g.solution)))
                }
            }
        })
        .collect();
    let mut values = Vec::with_capacity(total);
    let mut report =
        GraphReport { contraction: None, t_trunc: 0.0, truncation_capped: false, h: 0.0, max_iterations: 0, max_last_step: 0.0, nodes: total };
    for r in results {
        let (v, c, s) = r?;
        values.push(v);
        if report.contraction.is_none() {
            report.contraction = c;
        }
        if let Some(s) = s {
            report.t_trunc = s.t_trunc;
            report.truncation_capped |= s.truncation_capped;
            report.h = report.h.max(s.h);
            report.max_iterations = report.max_iterations.max(s.iterations);
            report.max_last_step = report.max_last_step.max(s.last_step);
        }
    }
    Ok(ManifoldGraph {
        kind,
        t0,
        eps,
        axes,
        value_labels: value_labels(kind, nx, ny),
        values,
        order: cfg.interp_order,
        report,
    })
}

fn unflatten(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    idx
}

/// Stencil start and Lagrange weights for `c` on `nodes`.
fn stencil(nodes: &[f64], c: f64, order: usize) -> (usize, Vec<f64>) {
    let m = order + 1;
    let m = m.min(nodes.len());
    let j = nodes.partition_point(|v| *v <= c).saturating_sub(1).min(nodes.len() - 2);
    let start = (j + 1).saturating_sub(m / 2).min(nodes.len() - m);
    let pts = &nodes[start..start + m];
    let w = (0..m)
        .map(|i| (0..m).filter(|&k| k != i).map(|k| (c - pts[k]) / (pts[i] - pts[k])).product())
        .collect();
    (start, w)
}

impl ManifoldGraph {
    /// Interpolated graph value at chart coordinates (one per axis).
    pub fn eval(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.axes.len() {
            return Err(NespError::Dimension(format!("expected {} chart coordinates", self.axes.len())));
        }
        for (a, &c) in self.axes.iter().zip(coords) {
            let (lo, hi) = (a.nodes[0], *a.nodes.last().unwrap_or(&a.nodes[0]));
            if c < lo - 1e-12 || c > hi + 1e-12 {
                return Err(NespError::Parameter(format!("{} = {c} is outside [{lo}, {hi}]", a.label)));
            }
        }
        let shape: Vec<usize> = self.axes.iter().map(|a| a.nodes.len()).collect();
        let stencils: Vec<(usize, Vec<f64>)> =
            self.axes.iter().zip(coords).map(|(a, &c)| stencil(&a.nodes, c, self.order)).collect();
        let dims: Vec<usize> = stencils.iter().map(|s| s.1.len()).collect();
        let count: usize = dims.iter().product();
        let mut out = vec![0.0; self.value_labels.len()];
        for flat in 0..count {
            let local = unflatten(flat, &dims);
            let mut weight = 1.0;
            let mut global = 0;
            for d in 0..dims.len() {
                weight *= stencils[d].1[local[d]];
                global = global * shape[d] + stencils[d].0 + local[d];
            }
            out.iter_mut().zip(&self.values[global]).for_each(|(o, v)| *o += weight * v);
        }
        Ok(out)
    }

    /// Central-difference derivative along one axis at a grid-interior point.
    pub fn derivative(&self, coords: &[f64], axis: usize) -> Result<Vec<f64>> {
        let a = self.axes.get(axis).ok_or_else(|| NespError::Dimension(format!("no axis {axis}")))?;
        let h = 1e-3 * (a.nodes[a.nodes.len() - 1] - a.nodes[0]);
        let mut p = coords.to_vec();
        let mut m = coords.to_vec();
        p[axis] += h;
        m[axis] -= h;
        let (vp, vm) = (self.eval(&p)?, self.eval(&m)?);
        Ok(vp.iter().zip(&vm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    /// Header `xi_coords…, value_coords…`, one row per node.
    pub fn to_csv(&self) -> String {
        let mut s = self.axes.iter().map(|a| a.label.clone()).chain(self.value_labels.iter().cloned()).collect::<Vec<_>>().join(",");
        s.push('\n');
        let shape: Vec<usize> = self.axes.iter().map(|a| a.nodes.len()).collect();
        for (flat, v) in self.values.iter().enumerate() {
            let idx = unflatten(flat, &shape);
            let row: Vec<String> = idx
                .iter()
                .zip(&self.axes)
                .map(|(&i, a)| format!("{:e}", a.nodes[i]))
                .chain(v.iter().map(|x| format!("{x:e}")))
                .collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn report_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind.name(),
            "t0": self.t0,
            "eps": self.eps,
            "axes": self.axes.iter().map(|a| serde_json::json!({"label": a.label, "direction": a.direction, "nodes": a.nodes.len()})).collect::<Vec<_>>(),
            "order": self.order,
            "report": self.report,
        })
    }
}

fn sweep_eps(eps_list: &[f64]) -> Result<Vec<f64>> {
    let mut eps = eps_list.to_vec();
    if eps.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(NespError::Parameter("sweep eps values must be positive".into()));
    }
    eps.sort_by(|a, b| b.total_cmp(a));
    eps.dedup();
    Ok(eps)
}

fn point(eps: f64, r: Result<f64>, floor: f64) -> SweepPoint {
    match r {
        Ok(v) => SweepPoint { eps, error: Some(v), floor, floored: v < 10.0 * floor, failure: None },
        Err(e) => SweepPoint { eps, error: None, floor, floored: true, failure: Some(e.to_string()) },
    }
}

/// Gaps between the full cu graph at `ξ_y = 0` and the slow-only one.
#[derive(Debug, Clone, Serialize)]
pub struct GapStudy {
    /// `|h_s(ξ_cu, 0) − h_s*(ξ_cu)|`.
    pub value: SweepResult,
    /// `|D_{ξ_cu}h_s − D_{ξ_cu}h_s*|`.
    pub d_cu: SweepResult,
    /// `|D_{ξ_y}h_s|`.
    pub d_y: SweepResult,
}

/// Relative step of the central differences in the chart.
const CHART_FD: f64 = 1e-3;

/// Jacobian of a graph map by central differences along `dirs`.
fn graph_jacobian<F>(f: &F, at: &DVector<f64>, dirs: &[DVector<f64>], h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut cols = Vec::with_capacity(dirs.len());
    for d in dirs {
        let p = f(&(at + d * h))?;
        let m = f(&(at - d * h))?;
        cols.push((p - m) / (2.0 * h));
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(at.len(), 0));
    }
    Ok(DMatrix::from_columns(&cols))
}

fn gap_leg(
    field: &CutField,
    split: &DichotomySplit,
    xi_cu: &DVector<f64>,
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<(f64, f64, f64)> {
    let sys = &field.sys;
    let (nx, ny) = (sys.n_x, sys.n_y);
    let cu = ManifoldKind::CenterUnstable;
    let full = |x: &DVector<f64>, y: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(solve_with(field, split, cu, x.as_slice(), y.as_slice(), t0, eps, cfg, false, None)?.value)
    };
    let slow = |x: &DVector<f64>| -> Result<DVector<f64>> {
        Ok(solve_with(field, split, cu, x.as_slice(), &[], t0, eps, cfg, true, None)?.value)
    };
    let y0 = DVector::zeros(ny);
    let value = (full(xi_cu, &y0)? - slow(xi_cu)?).norm();
    let dirs: Vec<DVector<f64>> = chart_directions(sys, split, cu)
        .into_iter()
        .filter(|(l, _)| !l.starts_with("xi_y"))
        .map(|(_, d)| DVector::from_column_slice(&d[..nx]))
        .collect();
    let h = CHART_FD * xi_cu.norm().max(0.1);
    let jf = graph_jacobian(&|x: &DVector<f64>| full(x, &y0), xi_cu, &dirs, h)?;
    let js = graph_jacobian(&slow, xi_cu, &dirs, h)?;
    let d_cu = if dirs.is_empty() { 0.0 } else { op_norm(&(jf - js)) };
    let ydirs: Vec<DVector<f64>> = (0..ny).map(|i| DVector::from_fn(ny, |k, _| if k == i { 1.0 } else { 0.0 })).collect();
    let jy = graph_jacobian(&|y: &DVector<f64>| full(xi_cu, y), &y0, &ydirs, h * eps.max(1e-3))?;
    let d_y = if ny == 0 { 0.0 } else { op_norm(&jy) };
    Ok((value, d_cu, d_y))
}

/// `ε`-sweep of the distance between the full and slow-only cu graphs and their derivatives.
pub fn manifold_gap_study(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_cu: &[f64],
    t0: f64,
    eps_list: &[f64],
    cfg: &LpConfig,
) -> Result<GapStudy> {
    check_dims(sys, split, xi_cu, &[])?;
    let field = context(sys, cfg)?;
    let xi = DVector::from_column_slice(xi_cu);
    let eps = sweep_eps(eps_list)?;
    let legs: Vec<(f64, Result<(f64, f64, f64)>)> =
        eps.par_iter().map(|&e| (e, gap_leg(&field, split, &xi, t0, e, cfg))).collect();
    let h = CHART_FD * xi.norm().max(0.1);
    let mut pv = Vec::new();
    let mut pc = Vec::new();
    let mut py = Vec::new();
    for (e, r) in legs {
        let split3 = |i: usize| r.as_ref().map(|v| [v.0, v.1, v.2][i]).map_err(|e| e.clone());
        pv.push(point(e, split3(0), cfg.tol));
        pc.push(point(e, split3(1), cfg.tol / h));
        py.push(point(e, split3(2), cfg.tol / (h * e.max(1e-3))));
    }
    let w = (t0, t0);
    Ok(GapStudy {
        value: SweepResult::from_points("graph-gap", pv, "|h_s(xi,0) - h_s*(xi)|_2", w),
        d_cu: SweepResult::from_points("graph-gap-d-cu", pc, "|D_cu h_s - D_cu h_s*|_op", w),
        d_y: SweepResult::from_points("graph-d-y", py, "|D_y h_s|_op", w),
    })
}

/// Step of the `t0` central difference.
pub const T0_STEP: f64 = 1e-3;

/// `|∂_{t0} h_s(ξ_cu, ξ_y, t0)|` by a central difference; `eps = 0` uses the slow-only
/// operator, whose forcing is then autonomous.
pub fn t0_sensitivity(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_cu: &[f64],
    xi_y: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<f64> {
    let field = context(sys, cfg)?;
    t0_leg(&field, split, xi_cu, xi_y, t0, eps, cfg)
}

fn t0_leg(
    field: &CutField,
    split: &DichotomySplit,
    xi_cu: &[f64],
    xi_y: &[f64],
    t0: f64,
    eps: f64,
    cfg: &LpConfig,
) -> Result<f64> {
    let slow = eps == 0.0;
    let cu = ManifoldKind::CenterUnstable;
    let p = solve_with(field, split, cu, xi_cu, xi_y, t0 + T0_STEP, eps, cfg, slow, None)?.value;
    let m = solve_with(field, split, cu, xi_cu, xi_y, t0 - T0_STEP, eps, cfg, slow, None)?.value;
    Ok((p - m).norm() / (2.0 * T0_STEP))
}

/// `ε`-sweep of [`t0_sensitivity`] with `ξ_y = ε·y_over_eps`.
pub fn t0_sensitivity_sweep(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_cu: &[f64],
    y_over_eps: &[f64],
    t0: f64,
    eps_list: &[f64],
    cfg: &LpConfig,
) -> Result<SweepResult> {
    check_dims(sys, split, xi_cu, y_over_eps)?;
    let field = context(sys, cfg)?;
    let eps = sweep_eps(eps_list)?;
    let pts: Vec<SweepPoint> = eps
        .par_iter()
        .map(|&e| {
            let y: Vec<f64> = y_over_eps.iter().map(|v| v * e).collect();
            point(e, t0_leg(&field, split, xi_cu, &y, t0, e, cfg), cfg.tol / T0_STEP)
        })
        .collect();
    Ok(SweepResult::from_points("t0-sensitivity", pts, "|d/dt0 h_s|_2", (t0, t0)))
}

/// `ε`-sweep of `|σ_cu(ξ_s, ξ_c) − σ_cu*(ξ_s, ξ_c)|` at `ξ_y = 0`.
pub fn fiber_gap_study(
    sys: &SlowFastSystem,
    split: &DichotomySplit,
    xi_s: &[f64],
    xi_c: &[f64],
    t0: f64,
    eps_list: &[f64],
    cfg: &LpConfig,
) -> Result<SweepResult> {
    let eps = sweep_eps(eps_list)?;
    let nx = sys.n_x;
    let pts: Vec<SweepPoint> = eps
        .par_iter()
        .map(|&e| {
            let r = solve_fiber(sys, split, xi_s, xi_c, &[], t0, e, cfg, false).and_then(|full| {
                let slow = solve_fiber(sys, split, xi_s, xi_c, &[], t0, e, cfg, true)?;
                let dx = (full.point.rows(0, nx) - slow.point.rows(0, nx)).norm();
                Ok(dx + full.point.rows(nx, sys.n_y).norm())
            });
            point(e, r, cfg.tol)
        })
        .collect();
    Ok(SweepResult::from_points("fiber-gap", pts, "|x - x*|_2 + |y|_2", (t0, t0)))
}

/// `log10` helper used by reports.
pub fn decades(v: f64) -> f64 {
    v.ln() / LN_10
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{test_quadratic, QuadraticKind};

    fn quad(kind: QuadraticKind) -> (SlowFastSystem, DichotomySplit) {
        let (sys, _) = test_quadratic(kind).unwrap();
        let split = default_split(&sys).unwrap();
        (sys, split)
    }

    #[test]
    fn bump_shape() {
        assert_eq!(bump(0.2), 1.0);
        assert_eq!(bump(1.2), 0.0);
        let m = bump(2.0 / 3.0);
        assert!(m > 0.0 && m < 1.0);
        assert!(bump_derivative(2.0 / 3.0) < 0.0);
        assert!((bump_slope_bound() - 2.8125).abs() < 1e-6);
        for i in 0..1000 {
            let s = i as f64 / 500.0;
            assert!(bump(s + 1e-3) <= bump(s) + 1e-15);
        }
    }

    #[test]
    fn cut_field_inside_and_outside() {
        let (sys, _) = quad(QuadraticKind::StableGraph);
        let c = cutoff_modify(&sys, 0.3).unwrap();
        let (f, _) = c.eval(&[0.05, 0.0], &[0.0, 0.0], 0.0, 0.0).unwrap();
        let (f1, _) = c.remainder(&[0.05, 0.0], &[0.0, 0.0], 0.0, 0.0).unwrap();
        assert_eq!(f, f1);
        let (f, _) = c.eval(&[0.4, 0.0], &[0.0, 0.0], 0.0, 0.0).unwrap();
        assert_eq!(f.amax(), 0.0);
        assert!(cutoff_modify(&sys, 0.0).is_err());
    }

    #[test]
    fn lagrange_basis_reproduces_cubics() {
        let nodes = [-1.0, 0.0, 1.0, 2.0];
        let c = lagrange_monomials(&nodes);
        for (j, &nj) in nodes.iter().enumerate() {
            for (i, &ni) in nodes.iter().enumerate() {
                let v: f64 = (0..4).map(|m| c[j][m] * ni.powi(m as i32)).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14, "{nj} {ni}");
            }
        }
    }

    #[test]
    fn etd_step_is_exact_for_cubic_forcing() {
        // ∫_0^h e^{(h−σ)a} σ³ dσ against the weighted nodes.
        let a = -0.7;
        let h = 0.3;
        let m = DMatrix::from_element(1, 1, a);
        let phis = phi_matrices(&(&m * h), 4);
        let nodes = [-1.0, 0.0, 1.0, 2.0];
        let w = etd_weights(&phis, h, &nodes);
        let approx: f64 = (0..4).map(|j| w[j][(0, 0)] * (nodes[j] * h).powi(3)).sum();
        let exact = crate::quadrature::composite(|s: f64| Ok((a * (h - s)).exp() * s.powi(3)), 0.0, h, 64).unwrap().0;
        assert!((approx - exact).abs() < 1e-14, "{approx} vs {exact}");
    }

    #[test]
    fn zero_chart_point_gives_zero() {
        let (sys, split) = quad(QuadraticKind::UnstableGraph);
        let cfg = LpConfig::default();
        let g = solve_cu_graph(&sys, &split, &[0.0, 0.0], &[0.0, 0.0], 0.0, 0.01, &cfg).unwrap();
        assert_eq!(g.value.amax(), 0.0);
        assert_eq!(g.solution.states.amax(), 0.0);
    }

    fn unstable_dir(split: &DichotomySplit, s: f64) -> Vec<f64> {
        let v = split.v_u.column(0);
        let v = &v / v.norm();
        let v = if v[0] < 0.0 { -v } else { v };
        vec![s * v[0], s * v[1]]
    }

    #[test]
    fn quadratic_coefficients() {
        let cfg = LpConfig::default();
        let (sys, split) = quad(QuadraticKind::UnstableGraph);
        let xi = unstable_dir(&split, 0.05);
        let g = solve_cu_graph(&sys, &split, &xi, &[0.0, 0.0], 0.0, 0.01, &cfg).unwrap();
        assert!((g.value[1] / (xi[0] * xi[0]) - 1.0 / 3.0).abs() < 1e-6, "{}", g.value[1]);
        let u = solve_u_graph(&sys, &split, &xi, 0.0, 0.01, &cfg).unwrap();
        assert!((u.value - stack(&g.value, &DVector::zeros(2))).norm() < 1e-9);
        let star = unperturbed_graph(&sys, &split, &xi, 0.0, 0.0, &cfg).unwrap();
        assert!((star.value - g.value).norm() < 1e-12);

        let (sys, split) = quad(QuadraticKind::StableGraph);
        let v = split.v_s.column(0);
        let v = &v / v.norm() * 0.05;
        let s = solve_s_graph(&sys, &split, v.as_slice(), 0.0, 0.01, &cfg).unwrap();
        assert!((s.value[1] / (v[0] * v[0]) + 0.25).abs() < 1e-6, "{}", s.value[1]);
        let rate = s.solution.decay_rate().unwrap();
        assert!(rate <= s.solution.eta + 0.05, "rate {rate}");
    }

    #[test]
    fn linear_system_graph_is_flat() {
        let doc = "[system]\nname = lin\n\n[dims]\nn_x = 2\nn_y = 2\n\n[matrix A]\n1, 0\n0, -1\n\n\
                   [matrix J]\n0, 1; -1, 0\n\n[field f]\nf1 = 0\nf2 = 0\n\n[field g]\ng1 = 0\ng2 = 0\n";
        let sys = crate::sysdsl::parse_system(doc).unwrap();
        let split = default_split(&sys).unwrap();
        let cfg = LpConfig::default();
        let g = solve_cu_graph(&sys, &split, &[0.1, 0.0], &[0.0, 0.0], 0.0, 0.01, &cfg).unwrap();
        assert!(g.value.amax() <= 1e-10);
    }

    #[test]
    fn eta_independence_and_fixed_point_residual() {
        let (sys, split) = quad(QuadraticKind::UnstableGraph);
        let xi = unstable_dir(&split, 0.08);
        let mut cfg = LpConfig::default();
        let a = solve_cu_graph(&sys, &split, &xi, &[0.0, 0.0], 0.0, 0.01, &cfg).unwrap();
        cfg.eta = Some(-0.7);
        let b = solve_cu_graph(&sys, &split, &xi, &[0.0, 0.0], 0.0, 0.01, &cfg).unwrap();
        assert!((a.value - b.value).norm() < 10.0 * cfg.tol.max(1e-11));
        assert!(a.solution.last_step < cfg.tol);
        cfg.eta = Some(0.5);
        assert!(solve_cu_graph(&sys, &split, &xi, &[0.0, 0.0], 0.0, 0.01, &cfg).is_err());
    }

    #[test]
    fn center_plane_is_flat() {
        let (sys, split) = quad(QuadraticKind::CenterPlane);
        let cfg = LpConfig::default();
        let c = solve_center_graph(&sys, &split, &[0.0, 0.0], &[0.02, -0.01], 0.0, 0.05, &cfg, false).unwrap();
        assert!(c.psi_s.amax() < 1e-12 && c.psi_u.amax() < 1e-12);
    }

    #[test]
    fn fiber_at_origin_matches_stable_graph() {
        let (sys, split) = quad(QuadraticKind::StableGraph);
        let cfg = LpConfig::default();
        let v = split.v_s.column(0);
        let v = &v / v.norm() * 0.05;
        let f = solve_fiber(&sys, &split, v.as_slice(), &[0.0, 0.0], &[], 0.0, 0.01, &cfg, false).unwrap();
        let s = solve_s_graph(&sys, &split, v.as_slice(), 0.0, 0.01, &cfg).unwrap();
        assert!((f.point - s.point).norm() < 1e-8);
        let z = solve_fiber(&sys, &split, &[0.0, 0.0], &[0.0, 0.0], &[], 0.0, 0.01, &cfg, false).unwrap();
        assert_eq!(z.point, z.base);
    }

    #[test]
    fn stable_graph_radius_error() {
        let (sys, split) = quad(QuadraticKind::StableGraph);
        let cfg = LpConfig::default();
        let v = split.v_s.column(0);
        let v = &v / v.norm() * 2.0;
        assert!(matches!(solve_s_graph(&sys, &split, v.as_slice(), 0.0, 0.01, &cfg), Err(NespError::Radius(_))));
    }

    #[test]
    fn graph_grid_interpolates() {
        let (sys, split) = quad(QuadraticKind::StableGraph);
        let cfg = LpConfig::default();
        let dirs = chart_directions(&sys, &split, ManifoldKind::Stable);
        let axis = GraphAxis::uniform(&dirs[0].0, dirs[0].1.clone(), 0.06, 13);
        let g = compute_graph(&sys, &split, ManifoldKind::Stable, vec![axis], 0.0, 0.01, &cfg).unwrap();
        let v = g.eval(&[0.033]).unwrap();
        let x1 = 0.033 * dirs[0].1[0];
        assert!((v[1] + 0.25 * x1 * x1).abs() < 1e-7, "{v:?}");
        assert!(g.to_csv().starts_with("xi_s0,h_x0,h_x1,h_y0,h_y1\n"));
        assert_eq!(g.report_json()["kind"], "s");
    }

    #[test]
    fn invariance_of_unstable_graph() {
        let (sys, split) = quad(QuadraticKind::UnstableGraph);
        let cfg = LpConfig::default();
        let xi = unstable_dir(&split, 0.05);
        let r = invariance_residual(&sys, &split, ManifoldKind::CenterUnstable, &xi, &[0.0, 0.0], 0.0, 0.1, 0.01, &cfg)
            .unwrap();
        assert!(r < 1e-6, "{r}");
    }
}
