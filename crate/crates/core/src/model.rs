//! Fast–slow system data model: `ẋ = Ax + f(x,y,t,ε)`, `ẏ = (J/ε)y + g(x,y,t,ε)`.
//!
//! Field oracles write into caller-provided buffers so the hot loops of the
//! integrators and fixed-point solvers never allocate.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{NespError, Result};

/// Signature of a field oracle: `(x, y, t, eps, out)`.
pub type FieldFn = dyn Fn(&[f64], &[f64], f64, f64, &mut [f64]) -> Result<()> + Send + Sync;

/// A vector field component (`f` or `g`) of a [`SlowFastSystem`].
#[derive(Clone)]
pub struct Field(Arc<FieldFn>);

impl Field {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&[f64], &[f64], f64, f64, &mut [f64]) -> Result<()> + Send + Sync + 'static,
    {
        Field(Arc::new(f))
    }

    pub fn zero() -> Self {
        Field::new(|_, _, _, _, out| {
            out.fill(0.0);
            Ok(())
        })
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64], t: f64, eps: f64, out: &mut [f64]) -> Result<()> {
        (self.0)(x, y, t, eps, out)
    }
}

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Field(..)")
    }
}

/// All first-derivative blocks of `f` and `g` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlocks {
    pub fx: DMatrix<f64>,
    pub fy: DMatrix<f64>,
    pub gx: DMatrix<f64>,
    pub gy: DMatrix<f64>,
    pub fe: DVector<f64>,
    pub ge: DVector<f64>,
    pub ft: DVector<f64>,
    pub gt: DVector<f64>,
}

pub type JacobianFn = dyn Fn(&[f64], &[f64], f64, f64) -> Result<JacobianBlocks> + Send + Sync;
pub type ScalarFn = dyn Fn(&[f64], &[f64], f64) -> Result<f64> + Send + Sync;
pub type SlowScalarFn = dyn Fn(&[f64], f64) -> Result<f64> + Send + Sync;
pub type SlowVectorFn = dyn Fn(&[f64], f64) -> Result<DVector<f64>> + Send + Sync;
pub type SlowMatrixFn = dyn Fn(&[f64], f64) -> Result<DMatrix<f64>> + Send + Sync;

/// Taylor blocks of an invariant in the fast variable `u`:
/// `H(x,u,ε) = H0(x,ε) + H1(x,ε)·u + uᵀH2(x,ε)u + H3(x,u,ε)`.
///
/// `u` is the fast variable of the system as stored; systems whose fast block is
/// unscaled set `scaled_fast = false` and the caller divides by ε first.
#[derive(Clone)]
pub struct InvariantExpansion {
    pub h0: Arc<SlowScalarFn>,
    pub h1: Arc<SlowVectorFn>,
    /// Symmetric matrix of the quadratic form.
    pub h2: Arc<SlowMatrixFn>,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub scaled_fast: bool,
}

impl InvariantExpansion {
    /// `ā = c0·c2 − c1²`.
    pub fn a_bar(&self) -> f64 {
        self.c0 * self.c2 - self.c1 * self.c1
    }
}

/// Invariant (energy-like) oracle `H(x, y, ε)` with optional Taylor blocks.
#[derive(Clone)]
pub struct Invariant {
    pub h: Arc<ScalarFn>,
    pub expansion: Option<InvariantExpansion>,
}

impl Invariant {
    pub fn new<F>(h: F) -> Self
    where
        F: Fn(&[f64], &[f64], f64) -> Result<f64> + Send + Sync + 'static,
    {
        Invariant { h: Arc::new(h), expansion: None }
    }

    pub fn eval(&self, x: &[f64], y: &[f64], eps: f64) -> Result<f64> {
        let v = (self.h)(x, y, eps)?;
        if !v.is_finite() {
            return Err(NespError::Eval("invariant is not finite".into()));
        }
        Ok(v)
    }

    /// Central-difference gradient in `x` at fixed `y`.
    pub fn grad_x(&self, x: &[f64], y: &[f64], eps: f64) -> Result<DVector<f64>> {
        let mut xp = x.to_vec();
        let mut g = DVector::zeros(x.len());
        for i in 0..x.len() {
            let h = fd_step(x[i]);
            let c = xp[i];
            xp[i] = c + h;
            let fp = self.eval(&xp, y, eps)?;
            xp[i] = c - h;
            let fm = self.eval(&xp, y, eps)?;
            xp[i] = c;
            g[i] = (fp - fm) / (2.0 * h);
        }
        Ok(g)
    }

    /// `H3 = H − H0 − H1·u − uᵀH2u`; requires the expansion.
    pub fn h3(&self, x: &[f64], u: &[f64], eps: f64) -> Result<f64> {
        let e = self
            .expansion
            .as_ref()
            .ok_or_else(|| NespError::Model("invariant has no Taylor blocks".into()))?;
        let uv = DVector::from_column_slice(u);
        let h = self.eval(x, u, eps)?;
        let h0 = (e.h0)(x, eps)?;
        let h1 = (e.h1)(x, eps)?;
        let h2 = (e.h2)(x, eps)?;
        Ok(h - h0 - h1.dot(&uv) - (uv.transpose() * h2 * &uv)[0])
    }
}

impl fmt::Debug for Invariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Invariant").field("expansion", &self.expansion.is_some()).finish()
    }
}

/// Structural flags asserted by the system's author and checked by [`validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Flags {
    /// `f(0,0,t,ε) = g(0,0,t,ε) = 0`.
    pub origin_fixed_point: bool,
    /// `∂_t f = ∂_t g = 0` at `ε = 0`.
    pub autonomous_at_zero: bool,
    /// `∂_t f = ∂_t g = 0` for every `ε`.
    pub autonomous: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Flags { origin_fixed_point: true, autonomous_at_zero: true, autonomous: false }
    }
}

/// Hints used as defaults by solvers and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hints {
    /// Cut-off radius `r` for the Lyapunov–Perron solvers.
    pub cutoff_radius: f64,
    /// Dichotomy band edges `(a1, a2, a1', a2')`.
    pub gaps: Option<(f64, f64, f64, f64)>,
}

impl Default for Hints {
    fn default() -> Self {
        Hints { cutoff_radius: 0.5, gaps: None }
    }
}

/// The full model. Immutable after construction and cheap to clone.
#[derive(Clone, Debug)]
pub struct SlowFastSystem {
    pub name: String,
    pub n_x: usize,
    pub n_y: usize,
    pub a: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub f: Field,
    pub g: Field,
    pub jac: Option<Arc<JacobianFnBox>>,
    pub invariant: Option<Invariant>,
    pub flags: Flags,
    pub hints: Hints,
}

/// Newtype so the Jacobian oracle can implement `Debug`.
pub struct JacobianFnBox(pub Box<JacobianFn>);

impl fmt::Debug for JacobianFnBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("JacobianFn(..)")
    }
}

impl SlowFastSystem {
    pub fn new(
        name: impl Into<String>,
        a: DMatrix<f64>,
        j: DMatrix<f64>,
        f: Field,
        g: Field,
    ) -> Result<Self> {
        let n_x = a.nrows();
        let n_y = j.nrows();
        if a.ncols() != n_x || n_x == 0 {
            return Err(NespError::Dimension(format!("A must be square and non-empty, got {}x{}", a.nrows(), a.ncols())));
        }
        if j.ncols() != n_y {
            return Err(NespError::Dimension(format!("J must be square, got {}x{}", j.nrows(), j.ncols())));
        }
        if n_y % 2 != 0 {
            return Err(NespError::Dimension(format!("n_y must be even, got {n_y}")));
        }
        Ok(SlowFastSystem {
            name: name.into(),
            n_x,
            n_y,
            a,
            j,
            f,
            g,
            jac: None,
            invariant: None,
            flags: Flags::default(),
            hints: Hints::default(),
        })
    }

    pub fn with_flags(mut self, flags: Flags) -> Self {
        self.flags = flags;
        self
    }

    pub fn with_hints(mut self, hints: Hints) -> Self {
        self.hints = hints;
        self
    }

    pub fn with_invariant(mut self, inv: Invariant) -> Self {
        self.invariant = Some(inv);
        self
    }

    pub fn with_jacobian<F>(mut self, jac: F) -> Self
    where
        F: Fn(&[f64], &[f64], f64, f64) -> Result<JacobianBlocks> + Send + Sync + 'static,
    {
        self.jac = Some(Arc::new(JacobianFnBox(Box::new(jac))));
        self
    }

    pub fn n(&self) -> usize {
        self.n_x + self.n_y
    }

    /// Evaluates `f` into `out`, rejecting non-finite results.
    #[inline]
    pub fn eval_f(&self, x: &[f64], y: &[f64], t: f64, eps: f64, out: &mut [f64]) -> Result<()> {
        self.f.eval(x, y, t, eps, out)?;
        check_finite(out, "f")
    }

    #[inline]
    pub fn eval_g(&self, x: &[f64], y: &[f64], t: f64, eps: f64, out: &mut [f64]) -> Result<()> {
        if self.n_y == 0 {
            return Ok(());
        }
        self.g.eval(x, y, t, eps, out)?;
        check_finite(out, "g")
    }

    pub fn f_vec(&self, x: &[f64], y: &[f64], t: f64, eps: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n_x);
        self.eval_f(x, y, t, eps, out.as_mut_slice())?;
        Ok(out)
    }

    pub fn g_vec(&self, x: &[f64], y: &[f64], t: f64, eps: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.n_y);
        self.eval_g(x, y, t, eps, out.as_mut_slice())?;
        Ok(out)
    }

    /// `J⁻¹`.
    pub fn j_inv(&self) -> Result<DMatrix<f64>> {
        self.j
            .clone()
            .try_inverse()
            .ok_or_else(|| NespError::Model("J is singular".into()))
    }

    fn check_dims(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.n_x || y.len() != self.n_y {
            return Err(NespError::Dimension(format!(
                "expected x in R^{} and y in R^{}, got {} and {}",
                self.n_x,
                self.n_y,
                x.len(),
                y.len()
            )));
        }
        Ok(())
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(NespError::Eval(format!("{what} returned a non-finite value")))
    }
}

/// Central-difference step `ε_mach^{1/3}·max(1, |c|)`.
#[inline]
pub fn fd_step(c: f64) -> f64 {
    f64::EPSILON.cbrt() * c.abs().max(1.0)
}

/// Right-hand side of the full system.
pub fn eval_rhs(
    sys: &SlowFastSystem,
    x: &[f64],
    y: &[f64],
    t: f64,
    eps: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    sys.check_dims(x, y)?;
    if !(eps > 0.0) {
        return Err(NespError::Parameter(format!("eps must be positive, got {eps}")));
    }
    let xv = DVector::from_column_slice(x);
    let yv = DVector::from_column_slice(y);
    let dx = &sys.a * &xv + sys.f_vec(x, y, t, eps)?;
    let dy = (&sys.j * &yv) / eps + sys.g_vec(x, y, t, eps)?;
    Ok((dx, dy))
}

/// All derivative blocks; uses the supplied oracle if present, else central differences.
pub fn jacobian_blocks(
    sys: &SlowFastSystem,
    x: &[f64],
    y: &[f64],
    t: f64,
    eps: f64,
) -> Result<JacobianBlocks> {
    sys.check_dims(x, y)?;
    let jb = match &sys.jac {
        Some(jac) => (jac.0)(x, y, t, eps)?,
        None => fd_jacobian_blocks(sys, x, y, t, eps)?,
    };
    let all = jb
        .fx
        .iter()
        .chain(jb.fy.iter())
        .chain(jb.gx.iter())
        .chain(jb.gy.iter())
        .chain(jb.fe.iter())
        .chain(jb.ge.iter())
        .chain(jb.ft.iter())
        .chain(jb.gt.iter());
    for v in all {
        if !v.is_finite() {
            return Err(NespError::Eval("Jacobian block has a non-finite entry".into()));
        }
    }
    Ok(jb)
}

/// State derivatives `(f_x, f_y, g_x, g_y)` only; the hot path of variational flows.
pub fn state_jacobian(sys: &SlowFastSystem, x: &[f64], y: &[f64], t: f64, eps: f64) -> Result<StateJacobian> {
    sys.check_dims(x, y)?;
    let sj = match &sys.jac {
        Some(jac) => {
            let jb = (jac.0)(x, y, t, eps)?;
            StateJacobian { fx: jb.fx, fy: jb.fy, gx: jb.gx, gy: jb.gy }
        }
        None => fd_state_jacobian(sys, x, y, t, eps)?,
    };
    if sj.fx.iter().chain(sj.fy.iter()).chain(sj.gx.iter()).chain(sj.gy.iter()).any(|v| !v.is_finite()) {
        return Err(NespError::Eval("Jacobian block has a non-finite entry".into()));
    }
    Ok(sj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateJacobian {
    pub fx: DMatrix<f64>,
    pub fy: DMatrix<f64>,
    pub gx: DMatrix<f64>,
    pub gy: DMatrix<f64>,
}

/// Finite-difference Jacobian blocks regardless of any supplied oracle.
pub fn fd_jacobian_blocks(
    sys: &SlowFastSystem,
    x: &[f64],
    y: &[f64],
    t: f64,
    eps: f64,
) -> Result<JacobianBlocks> {
    let StateJacobian { fx, fy, gx, gy } = fd_state_jacobian(sys, x, y, t, eps)?;
    let (nx, ny) = (sys.n_x, sys.n_y);
    let mut fp = vec![0.0; nx];
    let mut fm = vec![0.0; nx];
    let mut gp = vec![0.0; ny];
    let mut gm = vec![0.0; ny];
    let param = |tt: f64, ee: f64, fo: &mut [f64], go: &mut [f64]| -> Result<()> {
        sys.eval_f(x, y, tt, ee, fo)?;
        sys.eval_g(x, y, tt, ee, go)
    };
    let he = fd_step(eps);
    param(t, eps + he, &mut fp, &mut gp)?;
    param(t, eps - he, &mut fm, &mut gm)?;
    let fe = DVector::from_iterator(nx, (0..nx).map(|r| (fp[r] - fm[r]) / (2.0 * he)));
    let ge = DVector::from_iterator(ny, (0..ny).map(|r| (gp[r] - gm[r]) / (2.0 * he)));
    let ht = fd_step(t);
    param(t + ht, eps, &mut fp, &mut gp)?;
    param(t - ht, eps, &mut fm, &mut gm)?;
    let ft = DVector::from_iterator(nx, (0..nx).map(|r| (fp[r] - fm[r]) / (2.0 * ht)));
    let gt = DVector::from_iterator(ny, (0..ny).map(|r| (gp[r] - gm[r]) / (2.0 * ht)));
    Ok(JacobianBlocks { fx, fy, gx, gy, fe, ge, ft, gt })
}

fn fd_state_jacobian(sys: &SlowFastSystem, x: &[f64], y: &[f64], t: f64, eps: f64) -> Result<StateJacobian> {
    let (nx, ny) = (sys.n_x, sys.n_y);
    let mut fx = DMatrix::zeros(nx, nx);
    let mut fy = DMatrix::zeros(nx, ny);
    let mut gx = DMatrix::zeros(ny, nx);
    let mut gy = DMatrix::zeros(ny, ny);
    let mut fp = vec![0.0; nx];
    let mut fm = vec![0.0; nx];
    let mut gp = vec![0.0; ny];
    let mut gm = vec![0.0; ny];
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    for i in 0..nx {
        let h = fd_step(x[i]);
        xs[i] = x[i] + h;
        sys.eval_f(&xs, y, t, eps, &mut fp)?;
        sys.eval_g(&xs, y, t, eps, &mut gp)?;
        xs[i] = x[i] - h;
        sys.eval_f(&xs, y, t, eps, &mut fm)?;
        sys.eval_g(&xs, y, t, eps, &mut gm)?;
        xs[i] = x[i];
        for r in 0..nx {
            fx[(r, i)] = (fp[r] - fm[r]) / (2.0 * h);
        }
        for r in 0..ny {
            gx[(r, i)] = (gp[r] - gm[r]) / (2.0 * h);
        }
    }
    for i in 0..ny {
        let h = fd_step(y[i]);
        ys[i] = y[i] + h;
        sys.eval_f(x, &ys, t, eps, &mut fp)?;
        sys.eval_g(x, &ys, t, eps, &mut gp)?;
        ys[i] = y[i] - h;
        sys.eval_f(x, &ys, t, eps, &mut fm)?;
        sys.eval_g(x, &ys, t, eps, &mut gm)?;
        ys[i] = y[i];
        for r in 0..nx {
            fy[(r, i)] = (fp[r] - fm[r]) / (2.0 * h);
        }
        for r in 0..ny {
            gy[(r, i)] = (gp[r] - gm[r]) / (2.0 * h);
        }
    }
    Ok(StateJacobian { fx, fy, gx, gy })
}

/// One line of a [`ValidationReport`].
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub defect: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub system: String,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, defect: f64, tolerance: f64) {
        self.checks.push(Check {
            name: name.into(),
            passed: defect.is_finite() && defect <= tolerance,
            defect,
            tolerance,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "validation of {}", self.system)?;
        for c in &self.checks {
            writeln!(
                f,
                "  [{}] {:<28} defect {:.3e} (tol {:.1e})",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.defect,
                c.tolerance
            )?;
        }
        Ok(())
    }
}

/// Deterministic probe points in the box `[-radius, radius]^n`.
pub fn probe_points(n: usize, count: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..n).map(|_| rng.gen_range(-radius..=radius)).collect())
        .collect()
}

const PROBE_T: [f64; 4] = [0.0, 0.7, 1.9, 4.3];
const PROBE_EPS: [f64; 4] = [0.0, 1e-3, 1e-2, 1e-1];

/// Numerical checks of the structural assumptions. Failures are reported, never raised.
pub fn validate(sys: &SlowFastSystem) -> ValidationReport {
    let mut rep = ValidationReport { system: sys.name.clone(), checks: Vec::new() };
    let jt = sys.j.transpose();
    let anti = (&sys.j + &jt).amax();
    rep.push("J antisymmetric", anti, 1e-12);
    let det = if sys.n_y == 0 { 1.0 } else { sys.j.determinant() };
    rep.push("J invertible", if det.abs() > 1e-12 { 0.0 } else { 1.0 }, 0.5);
    rep.push("n_y even", (sys.n_y % 2) as f64, 0.0);

    let zx = vec![0.0; sys.n_x];
    let zy = vec![0.0; sys.n_y];
    if sys.flags.origin_fixed_point {
        let mut worst: f64 = 0.0;
        for &t in &PROBE_T {
            for &e in &PROBE_EPS {
                let d = match (sys.f_vec(&zx, &zy, t, e), sys.g_vec(&zx, &zy, t, e)) {
                    (Ok(f), Ok(g)) => f.norm() + g.norm(),
                    _ => f64::INFINITY,
                };
                worst = worst.max(d);
            }
        }
        rep.push("origin fixed point", worst, 1e-12);
    }

    let probes = probe_points(sys.n(), 20, 0.3, 0x5eed);
    if sys.flags.autonomous_at_zero || sys.flags.autonomous {
        let eps_set: &[f64] = if sys.flags.autonomous { &PROBE_EPS } else { &[0.0] };
        let mut worst: f64 = 0.0;
        for p in &probes {
            let (x, y) = p.split_at(sys.n_x);
            for &e in eps_set {
                for &t in &PROBE_T[..2] {
                    worst = worst.max(match fd_jacobian_blocks(sys, x, y, t, e) {
                        Ok(jb) => jb.ft.amax().max(jb.gt.amax()),
                        Err(_) => f64::INFINITY,
                    });
                }
            }
        }
        let name = if sys.flags.autonomous { "autonomous" } else { "autonomous at eps = 0" };
        rep.push(name, worst, 1e-7);
    }

    if sys.jac.is_some() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1ac);
        let mut worst: f64 = 0.0;
        for p in &probes {
            let (x, y) = p.split_at(sys.n_x);
            let t = rng.gen_range(0.0..6.0);
            let e = rng.gen_range(0.0..0.1);
            let rel = match (jacobian_blocks(sys, x, y, t, e), fd_jacobian_blocks(sys, x, y, t, e)) {
                (Ok(a), Ok(b)) => jacobian_rel_diff(&a, &b),
                _ => f64::INFINITY,
            };
            worst = worst.max(rel);
        }
        rep.push("Jacobian consistency", worst, 1e-5);
    }

    if let Some(inv) = &sys.invariant {
        if let Some(exp) = &inv.expansion {
            expansion_checks(sys, inv, exp, &mut rep);
        }
    }
    rep
}

fn jacobian_rel_diff(a: &JacobianBlocks, b: &JacobianBlocks) -> f64 {
    let pairs: [(&[f64], &[f64]); 8] = [
        (a.fx.as_slice(), b.fx.as_slice()),
        (a.fy.as_slice(), b.fy.as_slice()),
        (a.gx.as_slice(), b.gx.as_slice()),
        (a.gy.as_slice(), b.gy.as_slice()),
        (a.fe.as_slice(), b.fe.as_slice()),
        (a.ge.as_slice(), b.ge.as_slice()),
        (a.ft.as_slice(), b.ft.as_slice()),
        (a.gt.as_slice(), b.gt.as_slice()),
    ];
    pairs
        .iter()
        .flat_map(|(p, q)| p.iter().zip(q.iter()).map(|(u, v)| (u - v).abs() / v.abs().max(1.0)))
        .fold(0.0, f64::max)
}

fn expansion_checks(sys: &SlowFastSystem, inv: &Invariant, exp: &InvariantExpansion, rep: &mut ValidationReport) {
    let zx = vec![0.0; sys.n_x];
    let mut d_h0: f64 = 0.0;
    let mut d_h1: f64 = 0.0;
    let mut d_dh0: f64 = 0.0;
    for &e in &[0.0, 1e-3, 1e-2] {
        d_h0 = d_h0.max((exp.h0)(&zx, e).map(|v| v.abs()).unwrap_or(f64::INFINITY));
        d_h1 = d_h1.max((exp.h1)(&zx, e).map(|v| v.amax()).unwrap_or(f64::INFINITY));
        let mut xs = zx.clone();
        for i in 0..sys.n_x {
            let h = 1e-5;
            xs[i] = h;
            let p = (exp.h0)(&xs, e).unwrap_or(f64::NAN);
            xs[i] = -h;
            let m = (exp.h0)(&xs, e).unwrap_or(f64::NAN);
            xs[i] = 0.0;
            d_dh0 = d_dh0.max(((p - m) / (2.0 * h)).abs());
        }
    }
    rep.push("H0(0) = 0", d_h0, 1e-10);
    rep.push("DH0(0) = 0", d_dh0, 1e-8);
    rep.push("H1(0) = 0", d_h1, 1e-10);

    // H3 vanishes to second order in u: |H3(x,u)| ≤ C|u|^3 along rays.
    let probes = probe_points(sys.n_x, 6, 0.2, 0xd8);
    let dirs = probe_points(sys.n_y, 6, 1.0, 0xd9);
    let mut worst: f64 = 0.0;
    for (x, d) in probes.iter().zip(dirs.iter()) {
        let s1 = 1e-2;
        let s2 = 5e-3;
        let u1: Vec<f64> = d.iter().map(|v| v * s1).collect();
        let u2: Vec<f64> = d.iter().map(|v| v * s2).collect();
        let r1 = inv.h3(x, &u1, 1e-2).unwrap_or(f64::NAN).abs();
        let r2 = inv.h3(x, &u2, 1e-2).unwrap_or(f64::NAN).abs();
        // Halving u must cut H3 by at least ~4x unless both are at round-off.
        let defect = if r1 < 1e-12 { 0.0 } else { r2 / r1 };
        worst = worst.max(defect);
    }
    rep.push("H3 = O(|u|^3)", worst, 0.3);
    rep.push("a_bar > 0", if exp.a_bar() > 0.0 { 0.0 } else { -exp.a_bar() + 1.0 }, 0.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn rot_j() -> DMatrix<f64> {
        dmatrix![0.0, 1.0; -1.0, 0.0]
    }

    fn linear_system() -> SlowFastSystem {
        SlowFastSystem::new("linear", DMatrix::identity(1, 1), rot_j(), Field::zero(), Field::zero()).unwrap()
    }

    #[test]
    fn rhs_at_origin_is_zero() {
        let (dx, dy) = eval_rhs(&linear_system(), &[0.0], &[0.0, 0.0], 1.3, 0.1).unwrap();
        assert_eq!(dx.norm() + dy.norm(), 0.0);
    }

    #[test]
    fn fast_rotation_term() {
        let (_, dy) = eval_rhs(&linear_system(), &[0.0], &[1.0, 0.0], 0.0, 0.5).unwrap();
        assert_eq!(dy.as_slice(), &[0.0, -2.0]);
    }

    #[test]
    fn rejects_bad_eps_and_dims() {
        let s = linear_system();
        assert!(matches!(eval_rhs(&s, &[0.0], &[0.0, 0.0], 0.0, 0.0), Err(NespError::Parameter(_))));
        assert!(matches!(eval_rhs(&s, &[0.0, 1.0], &[0.0, 0.0], 0.0, 0.1), Err(NespError::Dimension(_))));
    }

    #[test]
    fn odd_fast_dimension_rejected() {
        let r = SlowFastSystem::new("odd", DMatrix::identity(1, 1), DMatrix::zeros(3, 3), Field::zero(), Field::zero());
        assert!(r.is_err());
    }

    #[test]
    fn fd_derivative_of_sine() {
        let f = Field::new(|x, _, _, _, o| {
            o[0] = x[0].sin();
            Ok(())
        });
        let s = SlowFastSystem::new("sin", DMatrix::zeros(1, 1), rot_j(), f, Field::zero()).unwrap();
        let jb = jacobian_blocks(&s, &[0.0], &[0.0, 0.0], 0.0, 0.1).unwrap();
        assert!((jb.fx[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn validate_antisymmetry() {
        let good = validate(&linear_system());
        assert!(good.check("J antisymmetric").unwrap().passed);
        assert!(good.check("J invertible").unwrap().passed);
        let bad = SlowFastSystem::new(
            "bad",
            DMatrix::identity(1, 1),
            dmatrix![0.0, 1.0; -1.0, 1e-6],
            Field::zero(),
            Field::zero(),
        )
        .unwrap();
        let rep = validate(&bad);
        let c = rep.check("J antisymmetric").unwrap();
        assert!(!c.passed);
        assert!((c.defect - 2e-6).abs() < 1e-12);
    }

    #[test]
    fn supplied_jacobian_checked_against_fd() {
        let f = Field::new(|x, y, t, e, o| {
            o[0] = x[0] * x[0] + y[0] * t.sin() + e * x[0];
            Ok(())
        });
        let g = Field::new(|x, y, _, _, o| {
            o[0] = x[0] * y[1];
            o[1] = 0.0;
            Ok(())
        });
        let good = SlowFastSystem::new("j", DMatrix::zeros(1, 1), rot_j(), f.clone(), g.clone())
            .unwrap()
            .with_flags(Flags { origin_fixed_point: true, autonomous_at_zero: false, autonomous: false })
            .with_jacobian(|x, y, t, e| {
                Ok(JacobianBlocks {
                    fx: DMatrix::from_element(1, 1, 2.0 * x[0] + e),
                    fy: DMatrix::from_row_slice(1, 2, &[t.sin(), 0.0]),
                    gx: DMatrix::from_row_slice(2, 1, &[y[1], 0.0]),
                    gy: DMatrix::from_row_slice(2, 2, &[0.0, x[0], 0.0, 0.0]),
                    fe: DVector::from_element(1, x[0]),
                    ge: DVector::zeros(2),
                    ft: DVector::from_element(1, y[0] * t.cos()),
                    gt: DVector::zeros(2),
                })
            });
        assert!(validate(&good).all_passed(), "{}", validate(&good));
        let wrong = SlowFastSystem::new("j", DMatrix::zeros(1, 1), rot_j(), f, g)
            .unwrap()
            .with_jacobian(|_, _, _, _| {
                Ok(JacobianBlocks {
                    fx: DMatrix::from_element(1, 1, 7.0),
                    fy: DMatrix::zeros(1, 2),
                    gx: DMatrix::zeros(2, 1),
                    gy: DMatrix::zeros(2, 2),
                    fe: DVector::zeros(1),
                    ge: DVector::zeros(2),
                    ft: DVector::zeros(1),
                    gt: DVector::zeros(2),
                })
            });
        assert!(!validate(&wrong).check("Jacobian consistency").unwrap().passed);
    }
}
