//! Built-in systems with reference data: the elastic pendulum in its dissipative
//! and conservative forms, a rigidly forced pendulum, the rescaled 4-D degenerate
//! Hopf model, and quadratic test systems with known invariant graphs.
//!
//! Pendulum coordinates: slow `x = (x̃, x1)` with `x̃` the angle measured from the
//! upright equilibrium and `x1` the angular momentum; fast `y = (v, v1)` is the
//! elongation scaled by `1/ε` and its conjugate velocity, both shifted to the
//! equilibrium.

use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, Mutex};

use nalgebra::{dmatrix, DMatrix, DVector};
use serde::Serialize;

use crate::diagonalize::{solve_l_newton, transformed_system, LinearBlocks};
use crate::error::{NespError, Result};
use crate::model::{fd_step, validate, Field, Flags, Invariant, InvariantExpansion, SlowFastSystem};
use crate::sysdsl::{parse_expr_in, Env, Expr, Scope, Var};
use crate::sysdsl::parse_document;

type ScalarOracle = dyn Fn(f64, f64, f64, f64) -> Result<f64> + Send + Sync;

/// A scalar perturbation `F(x, r, t, ε)` of the pendulum, with `x` the original
/// angle and `r` the physical elongation. Expressions use `x1` for the angle and
/// `y1` for the elongation.
#[derive(Clone)]
pub struct Forcing {
    f: Arc<ScalarOracle>,
    expr: Option<Expr>,
    zero: bool,
}

impl Forcing {
    pub fn zero() -> Self {
        Forcing { f: Arc::new(|_, _, _, _| Ok(0.0)), expr: Some(Expr::Num(0.0)), zero: true }
    }

    pub fn native<F>(f: F) -> Self
    where
        F: Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    {
        Forcing { f: Arc::new(move |x, r, t, e| Ok(f(x, r, t, e))), expr: None, zero: false }
    }

    /// Parses `src` over `x1`, `y1`, `t`, `eps` and the named parameters, which are bound.
    pub fn expr(src: &str, params: &[(String, f64)]) -> Result<Self> {
        let names: Vec<String> = params.iter().map(|p| p.0.clone()).collect();
        let e = parse_expr_in(src, &Scope::field(1, 1, &names), 1, 1)?.bind(params);
        Ok(Forcing::from_expr(e))
    }

    pub fn from_expr(e: Expr) -> Self {
        let zero = e.is_zero();
        let ev = e.clone();
        Forcing {
            f: Arc::new(move |x, r, t, eps| ev.eval(&Env::new(&[x], &[r], t, eps))),
            expr: Some(e),
            zero,
        }
    }

    #[inline]
    pub fn eval(&self, x: f64, r: f64, t: f64, eps: f64) -> Result<f64> {
        if self.zero {
            return Ok(0.0);
        }
        (self.f)(x, r, t, eps)
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn expression(&self) -> Option<&Expr> {
        self.expr.as_ref()
    }

    fn uses(&self, pred: impl Fn(&Var) -> bool) -> Option<bool> {
        let e = self.expr.as_ref()?;
        let mut hit = false;
        e.for_each_var(&mut |v| hit |= pred(v));
        Some(hit)
    }

    /// `∂_x F` by central differences.
    fn dx(&self, x: f64, r: f64, t: f64, eps: f64) -> Result<f64> {
        let h = fd_step(x);
        Ok((self.eval(x + h, r, t, eps)? - self.eval(x - h, r, t, eps)?) / (2.0 * h))
    }

    fn dr(&self, x: f64, r: f64, t: f64, eps: f64) -> Result<f64> {
        let h = fd_step(r);
        Ok((self.eval(x, r + h, t, eps)? - self.eval(x, r - h, t, eps)?) / (2.0 * h))
    }
}

impl fmt::Debug for Forcing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.expr {
            Some(e) => write!(f, "Forcing({e})"),
            None => f.write_str("Forcing(native)"),
        }
    }
}

/// Memo of per-`ε` constants; oracles stay pure because entries are deterministic.
struct EpsCache<T> {
    entries: Mutex<Vec<(u64, T)>>,
}

impl<T: Clone> EpsCache<T> {
    fn new() -> Self {
        EpsCache { entries: Mutex::new(Vec::new()) }
    }

    fn get(&self, eps: f64, compute: impl FnOnce() -> Result<T>) -> Result<T> {
        let key = eps.to_bits();
        if let Some(e) = self.entries.lock().unwrap().iter().find(|e| e.0 == key) {
            return Ok(e.1.clone());
        }
        let v = compute()?;
        let mut entries = self.entries.lock().unwrap();
        if entries.len() >= 4096 {
            entries.clear();
        }
        entries.push((key, v.clone()));
        Ok(v)
    }
}

/// Homoclinic orbit of the limit system in closed form.
#[derive(Clone)]
pub struct ClosedFormOrbit {
    /// `t ↦ (x_h(t), ẋ_h(t))`.
    pub eval: Arc<dyn Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync>,
    /// `x_h(+∞) − x_h(−∞)`; nonzero when the orbit closes only modulo a period.
    pub exit_shift: DVector<f64>,
    /// Exponential rates of approach as `t → −∞` and `t → +∞`.
    pub rates: (f64, f64),
}

impl fmt::Debug for ClosedFormOrbit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosedFormOrbit").field("exit_shift", &self.exit_shift).field("rates", &self.rates).finish()
    }
}

/// Max of `|ẋ_h − (A x_h + f(x_h, 0, t, 0))|` over `[-t_max, t_max]`.
pub fn orbit_residual(sys: &SlowFastSystem, orbit: &ClosedFormOrbit, t_max: f64, n: usize) -> Result<f64> {
    let y0 = vec![0.0; sys.n_y];
    let mut worst: f64 = 0.0;
    for i in 0..=n {
        let t = -t_max + 2.0 * t_max * i as f64 / n as f64;
        let (x, dx) = (orbit.eval)(t);
        let rhs = &sys.a * &x + sys.f_vec(x.as_slice(), &y0, t, 0.0)?;
        worst = worst.max((rhs - dx).amax());
    }
    Ok(worst)
}

/// Separatrix of `ẍ = g·sin x̃` leaving `x̃ = 0` and arriving at `x̃ = 2π`.
pub fn pendulum_separatrix(g: f64) -> ClosedFormOrbit {
    let w = g.sqrt();
    ClosedFormOrbit {
        eval: Arc::new(move |t| {
            let s = w * t;
            let x = 4.0 * s.exp().atan();
            let p = 2.0 * w / s.cosh();
            (DVector::from_vec(vec![x, p]), DVector::from_vec(vec![p, g * x.sin()]))
        }),
        exit_shift: DVector::from_vec(vec![2.0 * PI, 0.0]),
        rates: (w, w),
    }
}

/// `H = ½x1² + g·cos x̃ − g`, the energy of the rigid limit; zero on the separatrix.
pub fn pendulum_energy(g: f64) -> Invariant {
    Invariant::new(move |x, _, _| Ok(0.5 * x[1] * x[1] + g * x[0].cos() - g))
}

fn rot_j() -> DMatrix<f64> {
    dmatrix![0.0, 1.0; -1.0, 0.0]
}

/// Damped, forced elastic pendulum about its upright equilibrium.
#[derive(Debug, Clone)]
pub struct DissipativePendulum {
    pub g: f64,
    pub gamma: f64,
    /// Tangential forcing `F1`.
    pub f1: Forcing,
    /// Radial forcing `F2`.
    pub f2: Forcing,
}

impl Default for DissipativePendulum {
    /// `F1 = a(1 + cos x) sin t` with `a = 0.5` vanishes at the upright position;
    /// `F2 = 0`.
    fn default() -> Self {
        DissipativePendulum {
            g: 1.0,
            gamma: 0.1,
            f1: Forcing::expr("0.5*(1 + cos(x1))*sin(t)", &[]).expect("valid default forcing"),
            f2: Forcing::zero(),
        }
    }
}

const PROBE_T: [f64; 4] = [0.0, 0.7, 1.9, 4.3];
const PROBE_EPS: [f64; 3] = [0.0, 1e-2, 1e-1];
const PROBE_R: [f64; 3] = [-0.1, 0.0, 0.1];

impl DissipativePendulum {
    fn check(&self) -> Result<()> {
        if !(self.g > 0.0) || !(self.gamma >= 0.0) {
            return Err(NespError::Parameter(format!("need g > 0 and gamma >= 0, got g = {}, gamma = {}", self.g, self.gamma)));
        }
        Ok(())
    }

    /// `F1(π,·,t,ε) ≡ 0` and `∂_t F2(π,·,t,ε) ≡ 0`, checked on probes.
    pub fn satisfies_p1(&self) -> bool {
        let mut ok = true;
        for &r in &PROBE_R {
            for &e in &PROBE_EPS {
                let base = self.f2.eval(PI, r, 0.0, e);
                for &t in &PROBE_T {
                    ok &= matches!(self.f1.eval(PI, r, t, e), Ok(v) if v.abs() <= 1e-12);
                    ok &= matches!((&base, self.f2.eval(PI, r, t, e)), (Ok(b), Ok(v)) if (v - b).abs() <= 1e-12);
                }
            }
        }
        ok
    }

    /// Equilibrium `(u^ε, u1^ε)` of the scaled elongation, from Newton on
    /// `u1 − ε²γu = 0`, `−u − ε²γu1 + ε⁴γ²u − εg + ε²F2(π, εu, 0, ε) = 0`.
    pub fn fixed_point(&self, eps: f64) -> Result<(f64, f64)> {
        if eps == 0.0 {
            return Ok((0.0, 0.0));
        }
        let (g, gm) = (self.g, self.gamma);
        let e2 = eps * eps;
        let mut u = -eps * g;
        let mut u1 = e2 * gm * u;
        for _ in 0..50 {
            let f2 = self.f2.eval(PI, eps * u, 0.0, eps)?;
            let r1 = u1 - e2 * gm * u;
            let r2 = -u - e2 * gm * u1 + e2 * e2 * gm * gm * u - eps * g + e2 * f2;
            let d = eps * e2 * self.f2.dr(PI, eps * u, 0.0, eps)?;
            // [[-ε²γ, 1], [-1 + ε⁴γ² + ε³∂_rF2, -ε²γ]]
            let (a, b, c, dd) = (-e2 * gm, 1.0, -1.0 + e2 * e2 * gm * gm + d, -e2 * gm);
            let det = a * dd - b * c;
            let du = (dd * r1 - b * r2) / det;
            let du1 = (a * r2 - c * r1) / det;
            u -= du;
            u1 -= du1;
            if du.abs().max(du1.abs()) <= 1e-15 * u.abs().max(1e-300) {
                return Ok((u, u1));
            }
        }
        let f2 = self.f2.eval(PI, eps * u, 0.0, eps)?;
        let res = (-u - e2 * gm * u1 + e2 * e2 * gm * gm * u - eps * g + e2 * f2).abs();
        if res <= 1e-14 * eps.max(1e-300) {
            Ok((u, u1))
        } else {
            Err(NespError::NoConvergence(format!("pendulum equilibrium Newton failed at eps = {eps} (residual {res:.3e})")))
        }
    }

    /// The shifted system without the linear decoupling.
    pub fn untransformed(&self) -> Result<SlowFastSystem> {
        self.check()?;
        let p1 = self.satisfies_p1();
        let cache = Arc::new(EpsCache::<(f64, f64)>::new());
        let this = self.clone();
        let fp = move |eps: f64| cache.get(eps, || this.fixed_point(eps));
        let fp = Arc::new(fp);
        let (g, gm) = (self.g, self.gamma);

        let f = {
            let fp = fp.clone();
            let f1 = self.f1.clone();
            Field::new(move |x, y, t, eps, out| {
                let (ue, _) = fp(eps)?;
                let s = 1.0 + eps * (ue + y[0]);
                out[0] = x[1] / (s * s) - x[1];
                out[1] = g * s * x[0].sin() - g * x[0] - 2.0 * eps * gm * x[1]
                    + eps * f1.eval(x[0] + PI, eps * (ue + y[0]), t, eps)?;
                Ok(())
            })
        };
        let gf = {
            let fp = fp.clone();
            let f2 = self.f2.clone();
            Field::new(move |x, y, t, eps, out| {
                let (ue, _) = fp(eps)?;
                let s = 1.0 + eps * (ue + y[0]);
                out[0] = -eps * gm * y[0];
                let mut v = -eps * gm * y[1] + eps.powi(3) * gm * gm * y[0] + x[1] * x[1] / (s * s * s)
                    + g * (1.0 - x[0].cos());
                if !f2.is_zero() {
                    v += eps
                        * (f2.eval(x[0] + PI, eps * (ue + y[0]), t, eps)? - f2.eval(PI, eps * ue, t, eps)?);
                }
                out[1] = v;
                Ok(())
            })
        };
        let autonomous = matches!(
            (self.f1.uses(|v| *v == Var::T), self.f2.uses(|v| *v == Var::T)),
            (Some(false), Some(false))
        );
        Ok(SlowFastSystem::new("elastic_pendulum_untransformed", dmatrix![0.0, 1.0; g, 0.0], rot_j(), f, gf)?
            .with_flags(Flags { origin_fixed_point: p1, autonomous_at_zero: true, autonomous })
            .with_invariant(pendulum_energy(g)))
    }

    /// Whether the decoupling is the identity: no `x̃`-coupling in the fast
    /// linearization, or (P1) fails and the origin is not an equilibrium.
    fn trivial_coupling(&self) -> bool {
        self.f2.is_zero() || !self.satisfies_p1()
    }

    /// Shifted system with the linear decoupling `ŷ = y − L1(ε)x` applied.
    pub fn build(&self) -> Result<SlowFastSystem> {
        let base = self.untransformed()?;
        if self.trivial_coupling() {
            let mut s = base;
            s.name = "elastic_pendulum".into();
            return Ok(s);
        }
        // The decoupling is constant in t only if the linear coupling is.
        let (ue, _) = self.fixed_point(0.05)?;
        let d0 = self.f2.dx(PI, 0.05 * ue, 0.0, 0.05)?;
        for &t in &PROBE_T[1..] {
            let d = self.f2.dx(PI, 0.05 * ue, t, 0.05)?;
            if (d - d0).abs() > 1e-7 * d0.abs().max(1.0) {
                return Err(NespError::Model("D_xF2 at the equilibrium depends on t; no constant decoupling exists".into()));
            }
        }
        let b2 = base.clone();
        let provider = move |eps: f64| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            // L1 = O(ε²), so the zero extension to ε ≤ 0 is C¹ for ε-differences.
            if eps <= 0.0 {
                return Ok((DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)));
            }
            let r = solve_l_newton(&LinearBlocks::at_origin(&b2, 0.0, eps)?, eps)?;
            // D_yf vanishes at the equilibrium under (P1), so L2 = 0 exactly.
            Ok((r.l1, DMatrix::zeros(2, 2)))
        };
        let mut s = transformed_system(&base, "elastic_pendulum", Arc::new(provider));
        s.invariant = Some(pendulum_energy(self.g));
        Ok(s)
    }

    /// Coupling map `L1(ε)` of the untransformed linearization.
    pub fn coupling(&self, eps: f64) -> Result<crate::diagonalize::BlockDiagResult> {
        solve_l_newton(&LinearBlocks::at_origin(&self.untransformed()?, 0.0, eps)?, eps)
    }

    /// Sysdsl text; requires expression forcings, `F2` independent of the
    /// elongation and a trivial decoupling.
    pub fn to_document(&self) -> Result<String> {
        let not = |why: &str| Err(NespError::Model(format!("elastic_pendulum is not expressible as a document: {why}")));
        let (Some(f1), Some(f2)) = (self.f1.expression(), self.f2.expression()) else {
            return not("native forcing");
        };
        if self.f2.uses(|v| matches!(v, Var::Y(_))) == Some(true) {
            return not("F2 depends on the elongation, so the equilibrium has no closed form");
        }
        if !self.trivial_coupling() {
            let r = self.coupling(0.05)?;
            if r.l1.amax() > 0.0 {
                return not("the linear decoupling is nontrivial");
            }
        }
        let pi = || Expr::Num(PI);
        let at_pi = |e: &Expr, t0: bool| {
            e.substitute(&|v| match v {
                Var::X(0) => Some(pi()),
                Var::T if t0 => Some(Expr::Num(0.0)),
                _ => None,
            })
        };
        let ue = format!("(-eps*g + eps^2*({}))", at_pi(f2, true));
        let u = format!("({ue} + y1)");
        let sub = |e: &Expr| -> Result<Expr> {
            let r = crate::sysdsl::parse_expr(&format!("eps*{u}"))?;
            let xs = crate::sysdsl::parse_expr("x1 + pi")?;
            Ok(e.substitute(&|v| match v {
                Var::X(0) => Some(xs.clone()),
                Var::Y(0) => Some(r.clone()),
                _ => None,
            }))
        };
        let f2_pi_t = f2.substitute(&|v| match v {
            Var::X(0) => Some(pi()),
            Var::Y(0) => crate::sysdsl::parse_expr(&format!("eps*{ue}")).ok(),
            _ => None,
        });
        let text = format!(
            "[system]\nname = elastic_pendulum\n\n[dims]\nn_x = 2\nn_y = 2\n\n[params]\ng = {g:?}\ngamma = {gm:?}\n\n\
             [matrix A]\n0, 1\ng, 0\n\n[matrix J]\n0, 1; -1, 0\n\n[field f]\n\
             f1 = x2/(1 + eps*{u})^2 - x2\n\
             f2 = g*(1 + eps*{u})*sin(x1) - g*x1 - 2*eps*gamma*x2 + eps*({f1s})\n\n[field g]\n\
             g1 = -eps*gamma*y1\n\
             g2 = -eps*gamma*y2 + eps^3*gamma^2*y1 + x2^2/(1 + eps*{u})^3 + g*(1 - cos(x1)) + eps*(({f2s}) - ({f2_pi_t}))\n\n\
             [invariant H]\nH = 0.5*x2^2 + g*cos(x1) - g\n\n[flags]\norigin_fixed_point = {p1}\n",
            g = self.g,
            gm = self.gamma,
            f1s = sub(f1)?,
            f2s = sub(f2)?,
            p1 = self.satisfies_p1(),
        );
        Ok(parse_document(&text)?.to_text())
    }
}

pub fn elastic_pendulum_dissipative(g: f64, gamma: f64, f1: Forcing, f2: Forcing) -> Result<SlowFastSystem> {
    DissipativePendulum { g, gamma, f1, f2 }.build()
}

/// Conservative elastic pendulum with potential perturbation `εG(x, r, ε)`.
#[derive(Debug, Clone)]
pub struct ConservativePendulum {
    pub g: f64,
    /// `G(x, r, ε)`, evaluated with `t = 0`.
    pub potential: Forcing,
}

impl Default for ConservativePendulum {
    fn default() -> Self {
        ConservativePendulum { g: 1.0, potential: Forcing::zero() }
    }
}

/// Equilibrium data of the conservative pendulum at one `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservativeEquilibrium {
    /// Angle `x^ε`.
    pub x: f64,
    /// Scaled elongation `U^ε = y^ε/ε`.
    pub u: f64,
    /// Energy at the equilibrium.
    pub energy: f64,
}

impl ConservativePendulum {
    fn gx(&self, x: f64, r: f64, eps: f64) -> Result<f64> {
        if self.potential.is_zero() {
            return Ok(0.0);
        }
        self.potential.dx(x, r, 0.0, eps)
    }

    fn gy(&self, x: f64, r: f64, eps: f64) -> Result<f64> {
        if self.potential.is_zero() {
            return Ok(0.0);
        }
        self.potential.dr(x, r, 0.0, eps)
    }

    fn gyy(&self, x: f64, r: f64, eps: f64) -> Result<f64> {
        if self.potential.is_zero() {
            return Ok(0.0);
        }
        let h = 1e-4 * r.abs().max(1.0);
        let p = &self.potential;
        Ok((p.eval(x, r + h, 0.0, eps)? - 2.0 * p.eval(x, r, 0.0, eps)? + p.eval(x, r - h, 0.0, eps)?) / (h * h))
    }

    /// Energy in the unshifted scaled variables `(x, x1, U, u1)`.
    pub fn energy_unshifted(&self, x: f64, x1: f64, u: f64, u1: f64, eps: f64) -> Result<f64> {
        let s = 1.0 + eps * u;
        Ok(x1 * x1 / (2.0 * s * s) + 0.5 * u1 * u1 + 0.5 * u * u - self.g * s * x.cos()
            + eps * self.potential.eval(x, eps * u, 0.0, eps)?)
    }

    /// Newton on `g(1+εU) sin x + εG_x = 0`, `U = ε(g cos x − εG_y)`.
    pub fn equilibrium(&self, eps: f64) -> Result<ConservativeEquilibrium> {
        let g = self.g;
        let res = |x: f64, u: f64| -> Result<(f64, f64)> {
            Ok((
                g * (1.0 + eps * u) * x.sin() + eps * self.gx(x, eps * u, eps)?,
                u - eps * (g * x.cos() - eps * self.gy(x, eps * u, eps)?),
            ))
        };
        let (mut x, mut u) = (PI, -eps * g);
        let mut ok = false;
        for _ in 0..60 {
            let (r1, r2) = res(x, u)?;
            if r1.abs().max(r2.abs()) <= 1e-15 {
                ok = true;
                break;
            }
            let hx = 1e-7;
            let hu = 1e-7;
            let (a1, a2) = res(x + hx, u)?;
            let (b1, b2) = res(x - hx, u)?;
            let (c1, c2) = res(x, u + hu)?;
            let (d1, d2) = res(x, u - hu)?;
            let (j11, j21) = ((a1 - b1) / (2.0 * hx), (a2 - b2) / (2.0 * hx));
            let (j12, j22) = ((c1 - d1) / (2.0 * hu), (c2 - d2) / (2.0 * hu));
            let det = j11 * j22 - j12 * j21;
            let dx = (j22 * r1 - j12 * r2) / det;
            let du = (j11 * r2 - j21 * r1) / det;
            x -= dx;
            u -= du;
            if dx.abs().max(du.abs()) <= 1e-16 {
                ok = true;
                break;
            }
        }
        let (r1, r2) = res(x, u)?;
        if !ok && r1.abs().max(r2.abs()) > 1e-12 {
            return Err(NespError::NoConvergence(format!("conservative equilibrium Newton failed at eps = {eps}")));
        }
        Ok(ConservativeEquilibrium { x, u, energy: self.energy_unshifted(x, 0.0, u, 0.0, eps)? })
    }

    pub fn build(&self) -> Result<SlowFastSystem> {
        if !(self.g > 0.0) {
            return Err(NespError::Parameter(format!("need g > 0, got {}", self.g)));
        }
        if self.potential.uses(|v| *v == Var::T) == Some(true) {
            return Err(NespError::Model("the potential must not depend on t".into()));
        }
        let this = Arc::new(self.clone());
        let cache = Arc::new(EpsCache::<ConservativeEquilibrium>::new());
        let eq = {
            let this = this.clone();
            Arc::new(move |eps: f64| cache.get(eps, || this.equilibrium(eps)))
        };
        let g = self.g;
        let f = {
            let (eq, this) = (eq.clone(), this.clone());
            Field::new(move |x, y, _, eps, out| {
                let e = eq(eps)?;
                let uu = e.u + y[0];
                let s = 1.0 + eps * uu;
                let xa = e.x + x[0];
                out[0] = x[1] / (s * s) - x[1];
                out[1] = -g * s * xa.sin() - eps * this.gx(xa, eps * uu, eps)? - g * x[0];
                Ok(())
            })
        };
        let gf = {
            let (eq, this) = (eq.clone(), this.clone());
            Field::new(move |x, y, _, eps, out| {
                let e = eq(eps)?;
                let uu = e.u + y[0];
                let s = 1.0 + eps * uu;
                let xa = e.x + x[0];
                out[0] = 0.0;
                out[1] = x[1] * x[1] / (s * s * s) + g * (xa.cos() - e.x.cos())
                    - eps * (this.gy(xa, eps * uu, eps)? - this.gy(e.x, eps * e.u, eps)?);
                Ok(())
            })
        };
        let h = {
            let (eq, this) = (eq.clone(), this.clone());
            move |x: &[f64], y: &[f64], eps: f64| -> Result<f64> {
                let e = eq(eps)?;
                Ok(this.energy_unshifted(e.x + x[0], x[1], e.u + y[0], y[1], eps)? - e.energy)
            }
        };
        let h = Arc::new(h);
        let h0 = {
            let h = h.clone();
            Arc::new(move |x: &[f64], eps: f64| h(x, &[0.0, 0.0], eps))
        };
        let h1 = {
            let (eq, this) = (eq.clone(), this.clone());
            Arc::new(move |x: &[f64], eps: f64| -> Result<DVector<f64>> {
                let e = eq(eps)?;
                let s = 1.0 + eps * e.u;
                let xa = e.x + x[0];
                let v = -eps * x[1] * x[1] / (s * s * s) + e.u - eps * g * xa.cos()
                    + eps * eps * this.gy(xa, eps * e.u, eps)?;
                Ok(DVector::from_vec(vec![v, 0.0]))
            })
        };
        let h2 = {
            let (eq, this) = (eq.clone(), this.clone());
            Arc::new(move |x: &[f64], eps: f64| -> Result<DMatrix<f64>> {
                let e = eq(eps)?;
                let s = 1.0 + eps * e.u;
                let xa = e.x + x[0];
                let a = 0.5 + 1.5 * eps * eps * x[1] * x[1] / s.powi(4)
                    + 0.5 * eps.powi(3) * this.gyy(xa, eps * e.u, eps)?;
                Ok(dmatrix![a, 0.0; 0.0, 0.5])
            })
        };
        // The slow block is hyperbolic, so the center space is trivial and c0 is free.
        let mut c1: f64 = 0.0;
        let mut c2 = f64::INFINITY;
        for &e in &[0.0, 1e-3, 1e-2, 1e-1] {
            let hx = 1e-6;
            for i in 0..2 {
                let mut xp = [0.0, 0.0];
                xp[i] = hx;
                let p = h1(&xp, e)?;
                xp[i] = -hx;
                let m = h1(&xp, e)?;
                c1 = c1.max(((p - m) / (2.0 * hx)).amax());
            }
            let m = h2(&[0.0, 0.0], e)?;
            c2 = c2.min(m.symmetric_eigenvalues().min());
        }
        let expansion = InvariantExpansion { h0, h1, h2, c0: 1.0, c1, c2, scaled_fast: true };
        let inv = Invariant { h: Arc::new(move |x: &[f64], y: &[f64], e: f64| h(x, y, e)), expansion: Some(expansion) };
        Ok(SlowFastSystem::new("elastic_pendulum_conservative", dmatrix![0.0, 1.0; g, 0.0], rot_j(), f, gf)?
            .with_flags(Flags { origin_fixed_point: true, autonomous_at_zero: true, autonomous: true })
            .with_invariant(inv))
    }

    pub fn to_document(&self) -> Result<String> {
        if !self.potential.is_zero() {
            return Err(NespError::Model(
                "elastic_pendulum_conservative is expressible as a document only with G = 0".into(),
            ));
        }
        let (c1, c2) = match self.build()?.invariant.and_then(|i| i.expansion) {
            Some(e) => (e.c1, e.c2),
            None => unreachable!("the conservative build always carries an expansion"),
        };
        let u = "(-eps*g + y1)";
        let text = format!(
            "[system]\nname = elastic_pendulum_conservative\n\n[dims]\nn_x = 2\nn_y = 2\n\n[params]\ng = {g:?}\n\n\
             [matrix A]\n0, 1\ng, 0\n\n[matrix J]\n0, 1; -1, 0\n\n[field f]\n\
             f1 = x2/(1 + eps*{u})^2 - x2\n\
             f2 = -g*(1 + eps*{u})*sin(pi + x1) - g*x1\n\n[field g]\ng1 = 0\n\
             g2 = x2^2/(1 + eps*{u})^3 + g*(cos(pi + x1) - cos(pi))\n\n\
             [invariant H]\n\
             H = x2^2/(2*(1 + eps*{u})^2) + 0.5*y2^2 + 0.5*{u}^2 - g*(1 + eps*{u})*cos(pi + x1) - 0.5*(eps*g)^2 - g*(1 - eps^2*g)\n\
             H0 = x2^2/(2*(1 - eps^2*g)^2) - g*(1 - eps^2*g)*(cos(pi + x1) + 1)\n\
             H1_1 = -eps*x2^2/(1 - eps^2*g)^3 - eps*g - eps*g*cos(pi + x1)\nH1_2 = 0\n\
             H2_1_1 = 0.5 + 1.5*eps^2*x2^2/(1 - eps^2*g)^4\nH2_1_2 = 0\nH2_2_1 = 0\nH2_2_2 = 0.5\n\
             c0 = 1\nc1 = {c1:?}\nc2 = {c2:?}\nscaled_fast = true\n\n[flags]\nautonomous = true\n",
            g = self.g,
        );
        Ok(parse_document(&text)?.to_text())
    }
}

pub fn elastic_pendulum_conservative(g: f64, potential: Forcing) -> Result<SlowFastSystem> {
    ConservativePendulum { g, potential }.build()
}

/// Rigid pendulum `ẍ̃ = g sin x̃ − 2εγẋ̃ + εF(x̃ + π, 0, t, ε)` with a dormant fast oscillator.
#[derive(Debug, Clone)]
pub struct ForcedPendulum {
    pub g: f64,
    pub gamma: f64,
    pub forcing: Forcing,
}

impl Default for ForcedPendulum {
    fn default() -> Self {
        ForcedPendulum { g: 1.0, gamma: 0.1, forcing: Forcing::expr("sin(t)", &[]).expect("valid default forcing") }
    }
}

impl ForcedPendulum {
    pub fn build(&self) -> Result<SlowFastSystem> {
        if !(self.g > 0.0) || !(self.gamma >= 0.0) {
            return Err(NespError::Parameter("need g > 0 and gamma >= 0".into()));
        }
        let (g, gm, fo) = (self.g, self.gamma, self.forcing.clone());
        let fixed = PROBE_T
            .iter()
            .all(|&t| PROBE_EPS.iter().all(|&e| matches!(fo.eval(PI, 0.0, t, e), Ok(v) if v.abs() <= 1e-12)));
        let f = Field::new(move |x, _, t, eps, out| {
            out[0] = 0.0;
            out[1] = g * x[0].sin() - g * x[0] - 2.0 * eps * gm * x[1] + eps * fo.eval(x[0] + PI, 0.0, t, eps)?;
            Ok(())
        });
        Ok(SlowFastSystem::new("forced_pendulum", dmatrix![0.0, 1.0; g, 0.0], rot_j(), f, Field::zero())?
            .with_flags(Flags { origin_fixed_point: fixed, autonomous_at_zero: true, autonomous: false })
            .with_invariant(pendulum_energy(g)))
    }

    pub fn to_document(&self) -> Result<String> {
        let Some(fe) = self.forcing.expression() else {
            return Err(NespError::Model("forced_pendulum with a native forcing is not expressible".into()));
        };
        let xs = crate::sysdsl::parse_expr("x1 + pi")?;
        let fs = fe.substitute(&|v| match v {
            Var::X(0) => Some(xs.clone()),
            Var::Y(0) => Some(Expr::Num(0.0)),
            _ => None,
        });
        let fixed = self.build()?.flags.origin_fixed_point;
        let text = format!(
            "[system]\nname = forced_pendulum\n\n[dims]\nn_x = 2\nn_y = 2\n\n[params]\ng = {:?}\ngamma = {:?}\n\n\
             [matrix A]\n0, 1\ng, 0\n\n[matrix J]\n0, 1; -1, 0\n\n[field f]\nf1 = 0\n\
             f2 = g*sin(x1) - g*x1 - 2*eps*gamma*x2 + eps*({fs})\n\n[field g]\ng1 = 0\ng2 = 0\n\n\
             [invariant H]\nH = 0.5*x2^2 + g*cos(x1) - g\n\n[flags]\norigin_fixed_point = {fixed}\n",
            self.g, self.gamma
        );
        Ok(parse_document(&text)?.to_text())
    }
}

/// Degenerate-Hopf model `ẋ = [[a11, 1+a12],[a21, a22]]x + Q_x(z)`,
/// `ẏ = [[b, 1],[−1, b]]y + Q_y(z)`, `z = (x1, x2, y1, y2)`, with coefficient
/// polynomials in `ε` vanishing at `ε = 0` and quadratic forms `Q`.
///
/// The returned system uses `x1 = ε x̃1`, `x2 = ε^{3/2} x̃2`, `y = ε ỹ`,
/// `t = ε^{−1/2} τ` and takes `μ = √ε` as its small parameter.
#[derive(Debug, Clone)]
pub struct Hopf4d {
    /// Coefficient lists `c_k` of `Σ c_k ε^k`.
    pub a11: Vec<f64>,
    pub a12: Vec<f64>,
    pub a21: Vec<f64>,
    pub a22: Vec<f64>,
    pub b: Vec<f64>,
    /// `quad[i]` is the symmetric 4×4 matrix of component `i`.
    pub quad: Vec<DMatrix<f64>>,
}

impl Default for Hopf4d {
    /// `a21 = ε`, `b = ε/2`, `Q_x2 = −(3/2)x1²`, `Q_x1 = x1 y1/2`, `Q_y1 = x1²`.
    fn default() -> Self {
        let mut quad = vec![DMatrix::zeros(4, 4); 4];
        quad[0][(0, 2)] = 0.25;
        quad[0][(2, 0)] = 0.25;
        quad[1][(0, 0)] = -1.5;
        quad[2][(0, 0)] = 1.0;
        Hopf4d { a11: vec![0.0], a12: vec![0.0], a21: vec![0.0, 1.0], a22: vec![0.0], b: vec![0.0, 0.5], quad }
    }
}

/// Scaling exponents of `(x1, x2, y1, y2)` in powers of `μ`.
const HOPF_P: [i32; 4] = [2, 3, 2, 2];

/// `Σ_k c_k μ^{2k + shift}`, skipping terms with negative powers (zero by construction).
fn mu_poly(c: &[f64], mu: f64, shift: i32) -> f64 {
    c.iter()
        .enumerate()
        .filter(|(k, _)| 2 * *k as i32 + shift >= 0)
        .map(|(k, v)| v * mu.powi(2 * k as i32 + shift))
        .sum()
}

impl Hopf4d {
    /// `α = a21'(0)`.
    pub fn alpha(&self) -> f64 {
        self.a21.get(1).copied().unwrap_or(0.0)
    }

    /// Coefficient of `x̃1²` in the limit equation for `x̃2`.
    pub fn q(&self) -> f64 {
        self.quad[1][(0, 0)]
    }

    fn check(&self) -> Result<()> {
        for (name, c) in [("a11", &self.a11), ("a12", &self.a12), ("a21", &self.a21), ("a22", &self.a22), ("b", &self.b)] {
            if c.first().copied().unwrap_or(0.0) != 0.0 {
                return Err(NespError::Parameter(format!("{name}(0) must vanish")));
            }
        }
        if !(self.alpha() > 0.0) {
            return Err(NespError::Model(format!(
                "hyperbolicity requires d a21/d eps (0) > 0, got {}",
                self.alpha()
            )));
        }
        if self.quad.len() != 4 || self.quad.iter().any(|q| q.shape() != (4, 4)) {
            return Err(NespError::Dimension("hopf4d needs four 4x4 quadratic forms".into()));
        }
        Ok(())
    }

    /// Rescaled right-hand side components `(x̃', ỹ' − Jỹ/μ)` minus `A x̃`.
    fn fields(&self, z: &[f64; 4], mu: f64, out: &mut [f64; 4]) {
        let alpha = self.alpha();
        // Linear part.
        out[0] = mu_poly(&self.a11, mu, -1) * z[0] + mu_poly(&self.a12, mu, 0) * z[1];
        out[1] = mu_poly(&self.a21, mu, -2) * z[0] - alpha * z[0] + mu_poly(&self.a22, mu, -1) * z[1];
        let b = mu_poly(&self.b, mu, -1);
        out[2] = b * z[2];
        out[3] = b * z[3];
        for (i, q) in self.quad.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..4 {
                for k in 0..4 {
                    let c = q[(j, k)];
                    if c != 0.0 {
                        s += c * mu.powi(HOPF_P[j] + HOPF_P[k] - HOPF_P[i] - 1) * z[j] * z[k];
                    }
                }
            }
            out[i] += s;
        }
    }

    pub fn build(&self) -> Result<SlowFastSystem> {
        self.check()?;
        let a = dmatrix![0.0, 1.0; self.alpha(), 0.0];
        let this = Arc::new(self.clone());
        let f = {
            let this = this.clone();
            Field::new(move |x, y, _, mu, out| {
                let mut o = [0.0; 4];
                this.fields(&[x[0], x[1], y[0], y[1]], mu, &mut o);
                out.copy_from_slice(&o[..2]);
                Ok(())
            })
        };
        let g = Field::new(move |x, y, _, mu, out| {
            let mut o = [0.0; 4];
            this.fields(&[x[0], x[1], y[0], y[1]], mu, &mut o);
            out.copy_from_slice(&o[2..]);
            Ok(())
        });
        Ok(SlowFastSystem::new("hopf4d", a, rot_j(), f, g)?
            .with_flags(Flags { origin_fixed_point: true, autonomous_at_zero: true, autonomous: true }))
    }

    /// `x̃1 = −(3α/2q) sech²(√α τ/2)` solving `x̃1'' = αx̃1 + qx̃1²`.
    pub fn homoclinic(&self) -> Option<ClosedFormOrbit> {
        let (alpha, q) = (self.alpha(), self.q());
        if !(alpha > 0.0) || q == 0.0 {
            return None;
        }
        let amp = -1.5 * alpha / q;
        let k = 0.5 * alpha.sqrt();
        Some(ClosedFormOrbit {
            eval: Arc::new(move |t| {
                let s = 1.0 / (k * t).cosh();
                let th = (k * t).tanh();
                let x = amp * s * s;
                let p = -2.0 * amp * k * s * s * th;
                (DVector::from_vec(vec![x, p]), DVector::from_vec(vec![p, alpha * x + q * x * x]))
            }),
            exit_shift: DVector::zeros(2),
            rates: (alpha.sqrt(), alpha.sqrt()),
        })
    }

    pub fn to_document(&self) -> Result<String> {
        self.check()?;
        let vars = ["x1", "x2", "y1", "y2"];
        let term = |coef: f64, pow: i32, rest: &str| -> Option<String> {
            (coef != 0.0).then(|| {
                let c = format!("{coef:?}");
                let e = if pow == 0 { String::new() } else { format!("*eps^{pow}") };
                format!("({c}){e}{rest}")
            })
        };
        let poly_terms = |c: &[f64], shift: i32, rest: &str, skip_first: usize| -> Vec<String> {
            c.iter()
                .enumerate()
                .filter(|(k, _)| *k >= skip_first && 2 * *k as i32 + shift >= 0)
                .filter_map(|(k, v)| term(*v, 2 * k as i32 + shift, rest))
                .collect()
        };
        let mut comps: Vec<Vec<String>> = vec![Vec::new(); 4];
        comps[0].extend(poly_terms(&self.a11, -1, "*x1", 0));
        comps[0].extend(poly_terms(&self.a12, 0, "*x2", 0));
        comps[1].extend(poly_terms(&self.a21, -2, "*x1", 2));
        comps[1].extend(poly_terms(&self.a22, -1, "*x2", 0));
        comps[2].extend(poly_terms(&self.b, -1, "*y1", 0));
        comps[3].extend(poly_terms(&self.b, -1, "*y2", 0));
        for (i, q) in self.quad.iter().enumerate() {
            for j in 0..4 {
                for k in 0..4 {
                    let p = HOPF_P[j] + HOPF_P[k] - HOPF_P[i] - 1;
                    if let Some(t) = term(q[(j, k)], p, &format!("*{}*{}", vars[j], vars[k])) {
                        comps[i].push(t);
                    }
                }
            }
        }
        let join = |c: &Vec<String>| if c.is_empty() { "0".to_string() } else { c.join(" + ") };
        let text = format!(
            "[system]\nname = hopf4d\n\n[dims]\nn_x = 2\nn_y = 2\n\n[matrix A]\n0, 1\n{:?}, 0\n\n\
             [matrix J]\n0, 1; -1, 0\n\n[field f]\nf1 = {}\nf2 = {}\n\n[field g]\ng1 = {}\ng2 = {}\n\n\
             [flags]\nautonomous = true\n",
            self.alpha(),
            join(&comps[0]),
            join(&comps[1]),
            join(&comps[2]),
            join(&comps[3]),
        );
        Ok(parse_document(&text)?.to_text())
    }
}

pub fn hopf4d(params: &Hopf4d) -> Result<SlowFastSystem> {
    params.build()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QuadraticKind {
    /// `ẋ1 = −x1`, `ẋ2 = 2x2 + x1²`: stable graph `x2 = −x1²/4`.
    StableGraph,
    /// `ẋ1 = x1`, `ẋ2 = −x2 + x1²`: unstable graph `x2 = x1²/3`.
    UnstableGraph,
    /// `ẋ = diag(−1, 1)x + (x1y1, x1² + x2y2)`, `ẏ = Jy/ε + (x1x2, x2²)`:
    /// the plane `x = 0` is invariant, so the center graph vanishes.
    CenterPlane,
}

/// Known graph of a quadratic test system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KnownGraph {
    pub kind: QuadraticKind,
    /// `c` in `x2 = c·x1²` (zero for the center plane).
    pub coefficient: f64,
}

impl QuadraticKind {
    pub fn name(self) -> &'static str {
        match self {
            QuadraticKind::StableGraph => "test_quadratic_stable",
            QuadraticKind::UnstableGraph => "test_quadratic_unstable",
            QuadraticKind::CenterPlane => "test_quadratic_center",
        }
    }

    /// `(λ1, λ2)` of the slow diagonal.
    fn rates(self) -> (f64, f64) {
        match self {
            QuadraticKind::StableGraph => (-1.0, 2.0),
            QuadraticKind::UnstableGraph => (1.0, -1.0),
            QuadraticKind::CenterPlane => (-1.0, 1.0),
        }
    }

    /// Graph coefficient from substituting `x2 = c x1²`: `2cλ1 = cλ2 + 1`.
    pub fn coefficient(self) -> f64 {
        match self {
            QuadraticKind::CenterPlane => 0.0,
            k => {
                let (l1, l2) = k.rates();
                1.0 / (2.0 * l1 - l2)
            }
        }
    }

    fn fields(self) -> (&'static str, &'static str, &'static str, &'static str) {
        match self {
            QuadraticKind::CenterPlane => ("x1*y1", "x1^2 + x2*y2", "x1*x2", "x2^2"),
            _ => ("0", "x1^2", "0", "0"),
        }
    }
}

pub fn test_quadratic(kind: QuadraticKind) -> Result<(SlowFastSystem, KnownGraph)> {
    let doc = parse_document(&quadratic_document(kind))?;
    Ok((doc.build()?, KnownGraph { kind, coefficient: kind.coefficient() }))
}

fn quadratic_document(kind: QuadraticKind) -> String {
    let (l1, l2) = kind.rates();
    let (f1, f2, g1, g2) = kind.fields();
    format!(
        "[system]\nname = {}\n\n[dims]\nn_x = 2\nn_y = 2\n\n[matrix A]\n{l1:?}, 0\n0, {l2:?}\n\n\
         [matrix J]\n0, 1; -1, 0\n\n[field f]\nf1 = {f1}\nf2 = {f2}\n\n[field g]\ng1 = {g1}\ng2 = {g2}\n\n\
         [flags]\nautonomous = true\n",
        kind.name()
    )
}

/// Reference data attached to a catalog entry.
#[derive(Debug, Clone, Default)]
pub struct Reference {
    /// Equilibrium in the system's original (unshifted) variables at `eps_ref`.
    pub fixed_point: Option<Vec<f64>>,
    pub eps_ref: f64,
    pub homoclinic: Option<ClosedFormOrbit>,
    pub graph: Option<KnownGraph>,
    /// Recommended range of the small parameter.
    pub eps_range: (f64, f64),
    /// Resolved parameters.
    pub params: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct Builtin {
    pub system: SlowFastSystem,
    pub reference: Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CatalogEntry {
    pub name: &'static str,
    pub summary: &'static str,
    /// Parameter names with defaults.
    pub params: &'static [(&'static str, f64)],
    /// Whether the entry accepts expression overrides `forcing`, `forcing2`, `potential`.
    pub expressions: &'static [&'static str],
}

const CATALOG: &[CatalogEntry] = &[
    CatalogEntry {
        name: "elastic_pendulum",
        summary: "damped, forced elastic pendulum about the upright equilibrium, linearly decoupled",
        params: &[("g", 1.0), ("gamma", 0.1), ("a", 0.5), ("b", 0.0)],
        expressions: &["forcing", "forcing2"],
    },
    CatalogEntry {
        name: "elastic_pendulum_untransformed",
        summary: "the same pendulum without the linear decoupling",
        params: &[("g", 1.0), ("gamma", 0.1), ("a", 0.5), ("b", 0.0)],
        expressions: &["forcing", "forcing2"],
    },
    CatalogEntry {
        name: "elastic_pendulum_conservative",
        summary: "conservative elastic pendulum with energy and its Taylor blocks",
        params: &[("g", 1.0)],
        expressions: &["potential"],
    },
    CatalogEntry {
        name: "forced_pendulum",
        summary: "rigid damped pendulum with forcing, fast oscillator dormant",
        params: &[("g", 1.0), ("gamma", 0.1)],
        expressions: &["forcing"],
    },
    CatalogEntry {
        name: "hopf4d",
        summary: "rescaled 4-D degenerate Hopf model in (x, y, tau, mu = sqrt(eps))",
        params: &[("alpha", 1.0), ("q", -1.5), ("beta", 0.5), ("a11", 0.0), ("a22", 0.0)],
        expressions: &[],
    },
    CatalogEntry {
        name: "test_quadratic_stable",
        summary: "x1' = -x1, x2' = 2 x2 + x1^2; stable graph x2 = -x1^2/4",
        params: &[],
        expressions: &[],
    },
    CatalogEntry {
        name: "test_quadratic_unstable",
        summary: "x1' = x1, x2' = -x2 + x1^2; unstable graph x2 = x1^2/3",
        params: &[],
        expressions: &[],
    },
    CatalogEntry {
        name: "test_quadratic_center",
        summary: "invariant plane x = 0 carrying the center graph",
        params: &[],
        expressions: &[],
    },
];

pub fn catalog() -> &'static [CatalogEntry] {
    CATALOG
}

/// Overrides for [`builtin`]: numeric parameters and expression strings.
#[derive(Debug, Clone, Default)]
pub struct BuiltinOptions {
    pub params: Vec<(String, f64)>,
    pub expressions: Vec<(String, String)>,
}

impl BuiltinOptions {
    pub fn param(mut self, name: &str, v: f64) -> Self {
        self.params.push((name.into(), v));
        self
    }

    pub fn expression(mut self, name: &str, src: &str) -> Self {
        self.expressions.push((name.into(), src.into()));
        self
    }
}

fn resolve(entry: &CatalogEntry, opts: &BuiltinOptions) -> Result<Vec<(String, f64)>> {
    let mut out: Vec<(String, f64)> = entry.params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in &opts.params {
        match out.iter_mut().find(|p| &p.0 == k) {
            Some(p) => p.1 = *v,
            None => return Err(NespError::Parameter(format!("{} has no parameter '{k}'", entry.name))),
        }
    }
    for (k, _) in &opts.expressions {
        if !entry.expressions.contains(&k.as_str()) {
            return Err(NespError::Parameter(format!("{} accepts no expression '{k}'", entry.name)));
        }
    }
    Ok(out)
}

fn entry(name: &str) -> Result<&'static CatalogEntry> {
    CATALOG
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| NespError::Model(format!("unknown builtin system '{name}'")))
}

fn param(p: &[(String, f64)], k: &str) -> f64 {
    p.iter().find(|e| e.0 == k).map(|e| e.1).unwrap_or(0.0)
}

fn expr_or(opts: &BuiltinOptions, key: &str, default: &str, params: &[(String, f64)]) -> Result<Forcing> {
    let src = opts.expressions.iter().find(|e| e.0 == key).map(|e| e.1.as_str()).unwrap_or(default);
    Forcing::expr(src, params)
}

enum Spec {
    Dissipative(DissipativePendulum, bool),
    Conservative(ConservativePendulum),
    Forced(ForcedPendulum),
    Hopf(Hopf4d),
    Quadratic(QuadraticKind),
}

fn spec(name: &str, opts: &BuiltinOptions) -> Result<(Spec, Vec<(String, f64)>)> {
    let e = entry(name)?;
    let p = resolve(e, opts)?;
    let s = match name {
        "elastic_pendulum" | "elastic_pendulum_untransformed" => Spec::Dissipative(
            DissipativePendulum {
                g: param(&p, "g"),
                gamma: param(&p, "gamma"),
                f1: expr_or(opts, "forcing", "a*(1 + cos(x1))*sin(t)", &p)?,
                f2: expr_or(opts, "forcing2", "b*sin(x1)", &p)?,
            },
            name == "elastic_pendulum",
        ),
        "elastic_pendulum_conservative" => Spec::Conservative(ConservativePendulum {
            g: param(&p, "g"),
            potential: expr_or(opts, "potential", "0", &p)?,
        }),
        "forced_pendulum" => Spec::Forced(ForcedPendulum {
            g: param(&p, "g"),
            gamma: param(&p, "gamma"),
            forcing: expr_or(opts, "forcing", "sin(t)", &p)?,
        }),
        "hopf4d" => {
            let mut h = Hopf4d::default();
            h.a21 = vec![0.0, param(&p, "alpha")];
            h.quad[1][(0, 0)] = param(&p, "q");
            h.b = vec![0.0, param(&p, "beta")];
            h.a11 = vec![0.0, param(&p, "a11")];
            h.a22 = vec![0.0, param(&p, "a22")];
            Spec::Hopf(h)
        }
        "test_quadratic_stable" => Spec::Quadratic(QuadraticKind::StableGraph),
        "test_quadratic_unstable" => Spec::Quadratic(QuadraticKind::UnstableGraph),
        "test_quadratic_center" => Spec::Quadratic(QuadraticKind::CenterPlane),
        _ => unreachable!("catalog and constructors cover the same names"),
    };
    // A zero expression simplifies `b*sin(x1)` at b = 0 to a true zero forcing.
    let s = match s {
        Spec::Dissipative(mut d, t) => {
            if param(&p, "b") == 0.0 && !opts.expressions.iter().any(|e| e.0 == "forcing2") {
                d.f2 = Forcing::zero();
            }
            Spec::Dissipative(d, t)
        }
        other => other,
    };
    Ok((s, p))
}

/// Builds a catalog entry, validates it and checks its reference data.
pub fn builtin(name: &str, opts: &BuiltinOptions) -> Result<Builtin> {
    let (s, params) = spec(name, opts)?;
    let eps_ref = 1e-2;
    let (system, reference) = match s {
        Spec::Dissipative(d, transformed) => {
            let sys = if transformed { d.build()? } else { d.untransformed()? };
            let (u, u1) = d.fixed_point(eps_ref)?;
            let reference = Reference {
                fixed_point: Some(vec![PI, 0.0, u, u1]),
                eps_ref,
                homoclinic: Some(pendulum_separatrix(d.g)),
                eps_range: (1e-4, 1e-1),
                ..Default::default()
            };
            (sys, reference)
        }
        Spec::Conservative(c) => {
            let e = c.equilibrium(eps_ref)?;
            let reference = Reference {
                fixed_point: Some(vec![e.x, 0.0, e.u, 0.0]),
                eps_ref,
                homoclinic: Some(pendulum_separatrix(c.g)),
                eps_range: (1e-4, 1e-1),
                ..Default::default()
            };
            (c.build()?, reference)
        }
        Spec::Forced(f) => {
            let reference = Reference {
                fixed_point: Some(vec![PI, 0.0]),
                eps_ref,
                homoclinic: Some(pendulum_separatrix(f.g)),
                eps_range: (1e-4, 1e-1),
                ..Default::default()
            };
            (f.build()?, reference)
        }
        Spec::Hopf(h) => {
            let reference = Reference {
                fixed_point: Some(vec![0.0; 4]),
                eps_ref,
                homoclinic: h.homoclinic(),
                eps_range: (1e-3, 0.3),
                ..Default::default()
            };
            (h.build()?, reference)
        }
        Spec::Quadratic(k) => {
            let (sys, graph) = test_quadratic(k)?;
            let reference = Reference {
                fixed_point: Some(vec![0.0; 4]),
                eps_ref,
                graph: Some(graph),
                eps_range: (1e-4, 1e-1),
                ..Default::default()
            };
            (sys, reference)
        }
    };
    let report = validate(&system);
    if !report.all_passed() {
        return Err(NespError::Model(format!("builtin failed validation:\n{report}")));
    }
    if let Some(orbit) = &reference.homoclinic {
        let r = orbit_residual(&system, orbit, 10.0, 200)?;
        if r > 1e-9 {
            return Err(NespError::Model(format!("closed-form homoclinic residual {r:.3e} exceeds 1e-9")));
        }
    }
    Ok(Builtin { system, reference: Reference { params, ..reference } })
}

/// Sysdsl document of a catalog entry, when its fields are expressible.
pub fn export_document(name: &str, opts: &BuiltinOptions) -> Result<String> {
    match spec(name, opts)?.0 {
        Spec::Dissipative(d, transformed) => {
            let text = d.to_document()?;
            Ok(if transformed { text } else { text.replacen("name = elastic_pendulum", "name = elastic_pendulum_untransformed", 1) })
        }
        Spec::Conservative(c) => c.to_document(),
        Spec::Forced(f) => f.to_document(),
        Spec::Hopf(h) => h.to_document(),
        Spec::Quadratic(k) => Ok(parse_document(&quadratic_document(k))?.to_text()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate_full, IntegratorOptions};
    use crate::model::{eval_rhs, probe_points};

    fn max_field_diff(a: &SlowFastSystem, b: &SlowFastSystem, eps: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for p in probe_points(4, 15, 0.4, 17) {
            for &t in &[0.0, 1.1] {
                let fa = a.f_vec(&p[..2], &p[2..], t, eps).unwrap();
                let fb = b.f_vec(&p[..2], &p[2..], t, eps).unwrap();
                let ga = a.g_vec(&p[..2], &p[2..], t, eps).unwrap();
                let gb = b.g_vec(&p[..2], &p[2..], t, eps).unwrap();
                worst = worst.max((fa - fb).amax()).max((ga - gb).amax());
            }
        }
        worst
    }

    /// Right-hand side of the unshifted scaled pendulum `(x, x1, u, u1)`.
    fn unshifted_rhs(p: &DissipativePendulum, z: [f64; 4], t: f64, e: f64) -> [f64; 4] {
        let (x, x1, u, u1) = (z[0], z[1], z[2], z[3]);
        let s = 1.0 + e * u;
        [
            x1 / (s * s),
            -p.g * s * x.sin() - 2.0 * e * p.gamma * x1 + e * p.f1.eval(x, e * u, t, e).unwrap(),
            u1 / e - e * p.gamma * u,
            -u / e - e * p.gamma * u1 + x1 * x1 / (s * s * s) + e.powi(3) * p.gamma.powi(2) * u + p.g * x.cos()
                + e * p.f2.eval(x, e * u, t, e).unwrap(),
        ]
    }

    #[test]
    fn dissipative_equilibrium_from_newton() {
        let p = DissipativePendulum::default();
        // F2 = 0 gives u = -εg exactly.
        for &e in &[1e-1, 1e-2, 1e-3] {
            let (u, u1) = p.fixed_point(e).unwrap();
            assert!((u + e * p.g).abs() < 1e-15, "{u}");
            assert!((u1 - e * e * p.gamma * u).abs() < 1e-18);
            let r = unshifted_rhs(&p, [PI, 0.0, u, u1], 0.3, e);
            assert!(r.iter().all(|v| v.abs() < 1e-10), "{r:?}");
        }
        let q = DissipativePendulum { f2: Forcing::expr("2 + y1^2", &[]).unwrap(), ..Default::default() };
        let (u, u1) = q.fixed_point(0.05).unwrap();
        let r = unshifted_rhs(&q, [PI, 0.0, u, u1], 0.0, 0.05);
        assert!(r.iter().all(|v| v.abs() < 1e-10), "{r:?}");
        assert_eq!(p.fixed_point(0.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn shifted_fields_match_unshifted_equations() {
        let p = DissipativePendulum { f2: Forcing::expr("0.3*sin(x1) + y1", &[]).unwrap(), ..Default::default() };
        let sys = p.untransformed().unwrap();
        let e = 0.05;
        let (ue, u1e) = p.fixed_point(e).unwrap();
        for z in probe_points(4, 10, 0.5, 3) {
            let (dx, dy) = eval_rhs(&sys, &z[..2], &z[2..], 0.7, e).unwrap();
            let r = unshifted_rhs(&p, [z[0] + PI, z[1], z[2] + ue, z[3] + u1e], 0.7, e);
            let got = [dx[0], dx[1], dy[0], dy[1]];
            for k in 0..4 {
                assert!((got[k] - r[k]).abs() < 1e-9 * r[k].abs().max(1.0), "{k}: {} vs {}", got[k], r[k]);
            }
        }
    }

    #[test]
    fn default_pendulum_validates_and_has_no_decoupling() {
        let sys = DissipativePendulum::default().build().unwrap();
        assert!(validate(&sys).all_passed(), "{}", validate(&sys));
        assert_eq!(sys.j, rot_j());
        let un = DissipativePendulum::default().untransformed().unwrap();
        assert_eq!(max_field_diff(&sys, &un, 0.03), 0.0);
    }

    #[test]
    fn decoupled_pendulum_removes_linear_coupling() {
        let p = DissipativePendulum { f2: Forcing::expr("0.8*sin(x1)", &[]).unwrap(), ..Default::default() };
        let un = p.untransformed().unwrap();
        let tr = p.build().unwrap();
        assert!(validate(&tr).all_passed(), "{}", validate(&tr));
        let mut norms = Vec::new();
        for &e in &[1e-1, 1e-2] {
            let before = LinearBlocks::at_origin(&un, 0.0, e).unwrap();
            assert!(before.gx.amax() > 0.5 * e * 0.8);
            let after = LinearBlocks::at_origin(&tr, 0.0, e).unwrap();
            assert!(after.gx.amax() < 1e-8 && after.fy.amax() < 1e-8, "{}", after.gx);
            norms.push(p.coupling(e).unwrap().l1.norm());
        }
        // |L1| = O(ε²).
        let slope = (norms[0] / norms[1]).log10();
        assert!(slope > 1.8, "slope {slope}");
    }

    #[test]
    fn p1_detection() {
        assert!(DissipativePendulum::default().satisfies_p1());
        let bad = DissipativePendulum { f1: Forcing::expr("sin(t)", &[]).unwrap(), ..Default::default() };
        assert!(!bad.satisfies_p1());
        let sys = bad.build().unwrap();
        assert!(!sys.flags.origin_fixed_point);
        let bad2 = DissipativePendulum { f2: Forcing::expr("cos(t)", &[]).unwrap(), ..Default::default() };
        assert!(!bad2.satisfies_p1());
    }

    #[test]
    fn conservative_energy_conserved_and_blocks_consistent() {
        let c = ConservativePendulum { g: 1.0, potential: Forcing::expr("0.2*cos(x1)*y1 + 0.1*y1^2", &[]).unwrap() };
        let sys = c.build().unwrap();
        let rep = validate(&sys);
        assert!(rep.all_passed(), "{rep}");
        let eps = 1e-2;
        let inv = sys.invariant.clone().unwrap();
        let x0 = [0.3, -0.2];
        let y0 = [0.5, -0.4];
        let h0 = inv.eval(&x0, &y0, eps).unwrap();
        let tr = integrate_full(&sys, &x0, &y0, 0.0, 10.0, eps, &IntegratorOptions::tight()).unwrap();
        let z = tr.final_state();
        let h1 = inv.eval(&z[..2], &z[2..], eps).unwrap();
        assert!((h1 - h0).abs() < 1e-8, "{h0} -> {h1}");
        // H1(0) = 0 expresses the equilibrium condition; H(0) = 0 by the offset.
        let e = inv.expansion.as_ref().unwrap();
        assert!((e.h1)(&[0.0, 0.0], eps).unwrap().amax() < 1e-10);
        assert!(inv.eval(&[0.0, 0.0], &[0.0, 0.0], eps).unwrap().abs() < 1e-12);
    }

    #[test]
    fn conservative_equilibrium_sign() {
        let c = ConservativePendulum::default();
        let e = c.equilibrium(0.1).unwrap();
        assert_eq!(e.x, PI);
        // The physical elongation is y = εU = −gε².
        assert!((0.1 * e.u + 0.01).abs() < 1e-15);
    }

    #[test]
    fn conservative_rigid_limit_energy() {
        let sys = ConservativePendulum::default().build().unwrap();
        let h = sys.invariant.unwrap();
        for p in probe_points(2, 10, 1.0, 9) {
            let v = h.eval(&p, &[0.0, 0.0], 0.0).unwrap();
            let rigid = 0.5 * p[1] * p[1] - (PI + p[0]).cos() - 1.0;
            assert!((v - rigid).abs() < 1e-14);
        }
    }

    #[test]
    fn hopf_linear_part_and_limit() {
        let h = Hopf4d::default();
        let sys = h.build().unwrap();
        for &mu in &[0.3, 0.1, 0.01] {
            let lb = LinearBlocks::at_origin(&sys, 0.0, mu).unwrap();
            let ev = lb.a_f().complex_eigenvalues();
            let mut re: Vec<f64> = ev.iter().map(|z| z.re).collect();
            re.sort_by(f64::total_cmp);
            assert!((re[0] + 1.0).abs() < 2.0 * mu && (re[1] - 1.0).abs() < 2.0 * mu, "{re:?}");
        }
        // μ = 0: g vanishes, so the fast block is a pure rotation.
        for p in probe_points(4, 10, 1.0, 5) {
            assert_eq!(sys.g_vec(&p[..2], &p[2..], 0.0, 0.0).unwrap().amax(), 0.0);
        }
        let orbit = h.homoclinic().unwrap();
        assert!(orbit_residual(&sys, &orbit, 20.0, 400).unwrap() < 1e-12);
        let bad = Hopf4d { a21: vec![0.0, -1.0], ..Hopf4d::default() };
        assert!(matches!(bad.build(), Err(NespError::Model(_))));
    }

    #[test]
    fn hopf_rescaling_matches_original_equations() {
        // Compare against the unscaled vector field at ε = μ².
        let h = Hopf4d { a11: vec![0.0, 0.3], a12: vec![0.0, -0.2, 0.1], a22: vec![0.0, 0.7], ..Hopf4d::default() };
        let sys = h.build().unwrap();
        let mu: f64 = 0.2;
        let e = mu * mu;
        let poly = |c: &[f64]| c.iter().enumerate().map(|(k, v)| v * e.powi(k as i32)).sum::<f64>();
        for p in probe_points(4, 5, 1.0, 2) {
            let z = [e * p[0], e.powf(1.5) * p[1], e * p[2], e * p[3]];
            let quad = |i: usize| {
                let mut s = 0.0;
                for j in 0..4 {
                    for k in 0..4 {
                        s += h.quad[i][(j, k)] * z[j] * z[k];
                    }
                }
                s
            };
            let b = poly(&h.b);
            let orig = [
                poly(&h.a11) * z[0] + (1.0 + poly(&h.a12)) * z[1] + quad(0),
                poly(&h.a21) * z[0] + poly(&h.a22) * z[1] + quad(1),
                b * z[2] + z[3] + quad(2),
                -z[2] + b * z[3] + quad(3),
            ];
            let scale = [e, e.powf(1.5), e, e];
            let (dx, dy) = eval_rhs(&sys, &p[..2], &p[2..], 0.0, mu).unwrap();
            let got = [dx[0], dx[1], dy[0], dy[1]];
            for i in 0..4 {
                // d/dτ = μ⁻¹ d/dt on the scaled variable.
                let want = orig[i] / scale[i] / mu;
                assert!((got[i] - want).abs() < 1e-10 * want.abs().max(1.0), "{i}: {} vs {want}", got[i]);
            }
        }
    }

    #[test]
    fn quadratic_coefficients_rederived() {
        for kind in [QuadraticKind::StableGraph, QuadraticKind::UnstableGraph] {
            let (sys, graph) = test_quadratic(kind).unwrap();
            let c = graph.coefficient;
            // Invariance of x2 = c x1²: d/dt(x2 − c x1²) = 0 on the graph.
            for &x1 in &[0.1, -0.3, 0.7] {
                let x = [x1, c * x1 * x1];
                let (dx, _) = eval_rhs(&sys, &x, &[0.0, 0.0], 0.0, 0.1).unwrap();
                assert!((dx[1] - 2.0 * c * x1 * dx[0]).abs() < 1e-15);
            }
        }
        assert_eq!(QuadraticKind::StableGraph.coefficient(), -0.25);
        assert!((QuadraticKind::UnstableGraph.coefficient() - 1.0 / 3.0).abs() < 1e-16);
        let (sys, g) = test_quadratic(QuadraticKind::CenterPlane).unwrap();
        assert_eq!(g.coefficient, 0.0);
        let (dx, _) = eval_rhs(&sys, &[0.0, 0.0], &[0.4, -0.2], 0.0, 0.1).unwrap();
        assert_eq!(dx.amax(), 0.0);
    }

    #[test]
    fn catalog_entries_build_and_validate() {
        for e in catalog() {
            let b = builtin(e.name, &BuiltinOptions::default()).unwrap_or_else(|err| panic!("{}: {err}", e.name));
            assert!(validate(&b.system).all_passed());
            assert!((&b.system.j + b.system.j.transpose()).amax() <= 1e-12);
        }
        assert!(builtin("nope", &BuiltinOptions::default()).is_err());
        assert!(builtin("hopf4d", &BuiltinOptions::default().param("zzz", 1.0)).is_err());
        assert!(builtin("hopf4d", &BuiltinOptions::default().param("alpha", -1.0)).is_err());
    }

    #[test]
    fn exported_documents_reproduce_fields() {
        for e in catalog() {
            let opts = BuiltinOptions::default();
            let text = export_document(e.name, &opts).unwrap_or_else(|err| panic!("{}: {err}", e.name));
            let doc_sys = crate::sysdsl::parse_system(&text).unwrap();
            let native = builtin(e.name, &opts).unwrap().system;
            assert_eq!(doc_sys.name, native.name);
            let d = max_field_diff(&doc_sys, &native, 0.02);
            assert!(d < 1e-12, "{}: {d}", e.name);
            if let (Some(a), Some(b)) = (&doc_sys.invariant, &native.invariant) {
                for p in probe_points(4, 10, 0.3, 4) {
                    let (ha, hb) = (a.eval(&p[..2], &p[2..], 0.02).unwrap(), b.eval(&p[..2], &p[2..], 0.02).unwrap());
                    assert!((ha - hb).abs() < 1e-12, "{}: {ha} vs {hb}", e.name);
                }
            }
        }
        let with_coupling = BuiltinOptions::default().param("b", 0.5);
        assert!(matches!(export_document("elastic_pendulum", &with_coupling), Err(NespError::Model(_))));
        let radial = BuiltinOptions::default().expression("potential", "x1*y1");
        assert!(export_document("elastic_pendulum_conservative", &radial).is_err());
    }

    #[test]
    fn separatrix_energy_is_zero() {
        let orbit = pendulum_separatrix(1.0);
        let h = pendulum_energy(1.0);
        for i in 0..=40 {
            let t = -10.0 + 0.5 * i as f64;
            let (x, _) = (orbit.eval)(t);
            assert!(h.eval(x.as_slice(), &[], 0.0).unwrap().abs() < 1e-14);
        }
    }
}
