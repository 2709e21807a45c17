//! Time integration with the fast rotation removed exactly.
//!
//! States are split into a slow part and `blocks` fast blocks of size `n_y`.
//! Every fast block is stored in Lawson variables `ỹ = e^{-(t-t_ref)J/ε}y`, so
//! the Dormand–Prince 5(4) pair only sees the non-rotational part of the field.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{NespError, Result};
use crate::linalg::RotationFactor;
use crate::model::{state_jacobian, SlowFastSystem};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h0: Option<f64>,
    pub h_max: f64,
    pub max_steps: usize,
    /// Times the integrator must step onto exactly.
    pub tstops: Vec<f64>,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions { rtol: 1e-9, atol: 1e-11, h0: None, h_max: f64::INFINITY, max_steps: 5_000_000, tstops: Vec::new() }
    }
}

impl IntegratorOptions {
    pub fn tight() -> Self {
        IntegratorOptions { rtol: 1e-12, atol: 1e-14, ..Default::default() }
    }

    pub fn with_tol(rtol: f64, atol: f64) -> Self {
        IntegratorOptions { rtol, atol, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FlowKind {
    Full,
    Limit,
    Principal,
    VariationalFull,
    VariationalLimit,
    FastEvolution,
    Custom,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Right-hand side minus the `(J/ε)` rotation of each fast block.
pub trait LawsonRhs {
    fn slow_dim(&self) -> usize;
    fn fast_blocks(&self) -> usize;
    fn eval(&self, t: f64, slow: &[f64], fast: &[f64], ds: &mut [f64], df: &mut [f64]) -> Result<()>;
}

/// Fast rotation `e^{sJ/ε}` shared by all blocks.
#[derive(Debug, Clone)]
pub struct FastRotation {
    pub factor: RotationFactor,
    pub eps: f64,
    pub t_ref: f64,
}

impl FastRotation {
    pub fn new(j: &DMatrix<f64>, eps: f64, t_ref: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(NespError::Parameter(format!("eps must be positive, got {eps}")));
        }
        Ok(FastRotation { factor: RotationFactor::new(j)?, eps, t_ref })
    }

    /// Physical ← Lawson (`sign = 1`) or Lawson ← physical (`sign = -1`) for all blocks.
    fn rotate(&self, t: f64, sign: f64, src: &[f64], dst: &mut [f64], scratch: &mut [f64]) {
        let ny = self.factor.dim();
        let s = sign * (t - self.t_ref) / self.eps;
        for (a, b) in src.chunks(ny).zip(dst.chunks_mut(ny)) {
            self.factor.apply(s, a, b, scratch);
        }
    }
}

struct LawsonEval<'a> {
    rhs: &'a dyn LawsonRhs,
    rot: Option<&'a FastRotation>,
    ns: usize,
    phys: Vec<f64>,
    dphys: Vec<f64>,
    scratch: Vec<f64>,
    evals: usize,
}

impl<'a> LawsonEval<'a> {
    fn new(rhs: &'a dyn LawsonRhs, rot: Option<&'a FastRotation>) -> Self {
        let ns = rhs.slow_dim();
        let nf = rot.map(|r| r.factor.dim()).unwrap_or(0) * rhs.fast_blocks();
        LawsonEval {
            rhs,
            rot,
            ns,
            phys: vec![0.0; nf],
            dphys: vec![0.0; nf],
            scratch: vec![0.0; rot.map(|r| r.factor.dim()).unwrap_or(0)],
            evals: 0,
        }
    }

    fn deriv(&mut self, t: f64, w: &[f64], dw: &mut [f64]) -> Result<()> {
        self.evals += 1;
        let (ws, wf) = w.split_at(self.ns);
        let (ds, df) = dw.split_at_mut(self.ns);
        match self.rot {
            Some(rot) if !wf.is_empty() => {
                rot.rotate(t, 1.0, wf, &mut self.phys, &mut self.scratch);
                self.rhs.eval(t, ws, &self.phys, ds, &mut self.dphys)?;
                rot.rotate(t, -1.0, &self.dphys, df, &mut self.scratch);
            }
            _ => self.rhs.eval(t, ws, wf, ds, df)?,
        }
        if dw.iter().any(|v| !v.is_finite()) {
            return Err(NespError::Integration { t, msg: "non-finite derivative".into() });
        }
        Ok(())
    }

    fn to_physical(&mut self, t: f64, w: &[f64]) -> Vec<f64> {
        let mut out = w.to_vec();
        if let Some(rot) = self.rot {
            let (_, wf) = w.split_at(self.ns);
            rot.rotate(t, 1.0, wf, &mut out[self.ns..], &mut self.scratch);
        }
        out
    }

    fn to_lawson(&mut self, t: f64, z: &[f64]) -> Vec<f64> {
        let mut out = z.to_vec();
        if let Some(rot) = self.rot {
            let (_, zf) = z.split_at(self.ns);
            rot.rotate(t, -1.0, zf, &mut out[self.ns..], &mut self.scratch);
        }
        out
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Dopri<'a> {
    ev: LawsonEval<'a>,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl<'a> Dopri<'a> {
    fn new(ev: LawsonEval<'a>, n: usize) -> Self {
        Dopri { ev, k: std::array::from_fn(|_| vec![0.0; n]), tmp: vec![0.0; n] }
    }

    /// One step from `(t, w)` with `k[0] = f(t, w)` preset. Writes the 5th-order
    /// solution to `out`, its derivative to `k[6]`, and the error estimate to `err`.
    fn step(&mut self, t: f64, w: &[f64], h: f64, out: &mut [f64], err: &mut [f64]) -> Result<()> {
        let n = w.len();
        macro_rules! stage {
            ($dst:expr, $c:expr, [$(($a:expr, $i:expr)),*]) => {{
                for m in 0..n {
                    self.tmp[m] = w[m] + h * (0.0 $(+ $a * self.k[$i][m])*);
                }
                let (tmp, k) = (&self.tmp, &mut self.k);
                self.ev.deriv(t + $c * h, tmp, &mut k[$dst])?;
            }};
        }
        stage!(1, C2, [(A21, 0)]);
        stage!(2, C3, [(A31, 0), (A32, 1)]);
        stage!(3, C4, [(A41, 0), (A42, 1), (A43, 2)]);
        stage!(4, C5, [(A51, 0), (A52, 1), (A53, 2), (A54, 3)]);
        stage!(5, 1.0, [(A61, 0), (A62, 1), (A63, 2), (A64, 3), (A65, 4)]);
        for m in 0..n {
            out[m] = w[m]
                + h * (B1 * self.k[0][m] + B3 * self.k[2][m] + B4 * self.k[3][m] + B5 * self.k[4][m] + B6 * self.k[5][m]);
        }
        let k = &mut self.k;
        self.ev.deriv(t + h, out, &mut k[6])?;
        for m in 0..n {
            err[m] = h
                * (E1 * self.k[0][m] + E3 * self.k[2][m] + E4 * self.k[3][m] + E5 * self.k[4][m] + E6 * self.k[5][m]
                    + E7 * self.k[6][m]);
        }
        Ok(())
    }
}

fn err_norm(err: &[f64], w0: &[f64], w1: &[f64], opts: &IntegratorOptions) -> f64 {
    let n = err.len().max(1);
    let s: f64 = err
        .iter()
        .zip(w0.iter().zip(w1))
        .map(|(e, (a, b))| {
            let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n as f64).sqrt()
}

/// One orbit of some flow with a cubic Hermite dense interpolant.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub kind: FlowKind,
    pub eps: f64,
    pub n_slow: usize,
    pub n_fast: usize,
    pub t: Vec<f64>,
    w: Vec<Vec<f64>>,
    dw: Vec<Vec<f64>>,
    rot: Option<FastRotation>,
    pub stats: StepStats,
    pub options: IntegratorOptions,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t0(&self) -> f64 {
        self.t[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.t.last().unwrap()
    }

    fn physical(&self, t: f64, w: &[f64]) -> Vec<f64> {
        let mut out = w.to_vec();
        if let Some(rot) = &self.rot {
            let mut scratch = vec![0.0; rot.factor.dim()];
            rot.rotate(t, 1.0, &w[self.n_slow..], &mut out[self.n_slow..], &mut scratch);
        }
        out
    }

    /// Stored state at node `k` in physical variables.
    pub fn node(&self, k: usize) -> Vec<f64> {
        self.physical(self.t[k], &self.w[k])
    }

    pub fn final_state(&self) -> Vec<f64> {
        self.node(self.len() - 1)
    }

    /// Dense output; `t` must lie within the integrated range.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>> {
        let (lo, hi) = (self.t0().min(self.t_end()), self.t0().max(self.t_end()));
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if t < lo - slack || t > hi + slack {
            return Err(NespError::Parameter(format!("t = {t} outside trajectory range [{lo}, {hi}]")));
        }
        let fwd = self.t_end() >= self.t0();
        // Index of the segment [t_k, t_{k+1}] containing t.
        let k = if fwd {
            self.t.partition_point(|&s| s <= t).saturating_sub(1)
        } else {
            self.t.partition_point(|&s| s >= t).saturating_sub(1)
        };
        let k = k.min(self.len().saturating_sub(2));
        if self.len() == 1 {
            return Ok(self.node(0));
        }
        let (t0, t1) = (self.t[k], self.t[k + 1]);
        let h = t1 - t0;
        let th = (t - t0) / h;
        let (th2, th3) = (th * th, th * th * th);
        let h00 = 2.0 * th3 - 3.0 * th2 + 1.0;
        let h10 = th3 - 2.0 * th2 + th;
        let h01 = -2.0 * th3 + 3.0 * th2;
        let h11 = th3 - th2;
        let w: Vec<f64> = (0..self.w[k].len())
            .map(|m| {
                h00 * self.w[k][m] + h10 * h * self.dw[k][m] + h01 * self.w[k + 1][m] + h11 * h * self.dw[k + 1][m]
            })
            .collect();
        Ok(self.physical(t, &w))
    }

    pub fn slow_at(&self, t: f64) -> Result<Vec<f64>> {
        let mut s = self.state_at(t)?;
        s.truncate(self.n_slow);
        Ok(s)
    }

    /// CSV with header `t, x1..xn, y1..ym` (slow then fast components).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t");
        for i in 1..=self.n_slow {
            s.push_str(&format!(",x{i}"));
        }
        for i in 1..=self.n_fast {
            s.push_str(&format!(",y{i}"));
        }
        s.push('\n');
        for k in 0..self.len() {
            s.push_str(&format!("{:.17e}", self.t[k]));
            for v in self.node(k) {
                s.push_str(&format!(",{v:.17e}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Event function `g(t, z)` on physical states; the integration stops at its first sign change.
pub type EventFn<'a> = dyn Fn(f64, &[f64]) -> f64 + 'a;

/// A located event.
#[derive(Debug, Clone)]
pub struct EventHit {
    pub t: f64,
    pub state: Vec<f64>,
}

/// General Lawson–DOPRI driver. `z0` is physical.
pub fn solve_lawson(
    rhs: &dyn LawsonRhs,
    rot: Option<FastRotation>,
    kind: FlowKind,
    z0: &[f64],
    t0: f64,
    t1: f64,
    opts: &IntegratorOptions,
    event: Option<(&EventFn, f64)>,
) -> Result<(Trajectory, Option<EventHit>)> {
    let ns = rhs.slow_dim();
    let ny = rot.as_ref().map(|r| r.factor.dim()).unwrap_or(0);
    let n = ns + ny * rhs.fast_blocks();
    if z0.len() != n {
        return Err(NespError::Dimension(format!("initial state has length {}, expected {n}", z0.len())));
    }
    if z0.iter().any(|v| !v.is_finite()) {
        return Err(NespError::Integration { t: t0, msg: "non-finite initial state".into() });
    }
    let eps = rot.as_ref().map(|r| r.eps).unwrap_or(0.0);
    let mut ev = LawsonEval::new(rhs, rot.as_ref());
    let w0 = ev.to_lawson(t0, z0);
    let mut dp = Dopri::new(ev, n);
    let mut traj = Trajectory {
        kind,
        eps,
        n_slow: ns,
        n_fast: n - ns,
        t: vec![t0],
        w: vec![w0.clone()],
        dw: Vec::new(),
        rot: None,
        stats: StepStats::default(),
        options: opts.clone(),
    };
    let mut f0 = vec![0.0; n];
    dp.ev.deriv(t0, &w0, &mut f0)?;
    traj.dw.push(f0.clone());
    let span = t1 - t0;
    if span == 0.0 {
        traj.rot = rot.clone();
        traj.stats.evaluations = dp.ev.evals;
        return Ok((traj, None));
    }
    let dir = span.signum();
    let mut stops: Vec<f64> = opts.tstops.iter().cloned().filter(|&s| (s - t0) * dir > 0.0 && (t1 - s) * dir > 0.0).collect();
    stops.sort_by(|a, b| (a * dir).total_cmp(&(b * dir)));
    stops.push(t1);
    let mut stop_idx = 0;

    let mut h = match opts.h0 {
        Some(h) => h.abs(),
        None => initial_step(&mut dp, t0, &w0, &f0, opts, span.abs())?,
    }
    .min(opts.h_max)
    .min(span.abs());
    let mut t = t0;
    let mut w = w0;
    let mut w_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut g_prev = event.map(|(g, _)| g(t0, z0));
    let mut reject_streak = 0usize;
    loop {
        if traj.stats.accepted + traj.stats.rejected >= opts.max_steps {
            return Err(NespError::Integration { t, msg: "maximum number of steps exceeded".into() });
        }
        let target = stops[stop_idx];
        let mut hh = h;
        let mut hits_stop = false;
        if (t + dir * hh - target) * dir >= -1e-14 * target.abs().max(1.0) {
            hh = (target - t).abs();
            hits_stop = true;
        }
        if hh < 1e-14 * t.abs().max(1.0) && !hits_stop {
            return Err(NespError::Integration { t, msg: "step size underflow".into() });
        }
        dp.k[0].copy_from_slice(&f0);
        dp.step(t, &w, dir * hh, &mut w_new, &mut err)?;
        let e = err_norm(&err, &w, &w_new, opts);
        if e <= 1.0 {
            let t_new = if hits_stop { target } else { t + dir * hh };
            traj.stats.accepted += 1;
            let f_new = dp.k[6].clone();
            traj.t.push(t_new);
            traj.w.push(w_new.clone());
            traj.dw.push(f_new.clone());
            if let Some((g, t_min)) = event {
                let z_new = dp.ev.to_physical(t_new, &w_new);
                let g_new = g(t_new, &z_new);
                let gp = g_prev.unwrap();
                let armed = (t_new - t0) * dir >= t_min;
                if armed && (g_new == 0.0 || (gp != 0.0 && gp.signum() != g_new.signum())) {
                    let hit = locate_event(&mut dp, g, t, &w, &f0, t_new, gp, g_new)?;
                    // Truncate the trajectory at the event.
                    traj.t.pop();
                    traj.w.pop();
                    traj.dw.pop();
                    let wl = dp.ev.to_lawson(hit.t, &hit.state);
                    let mut dl = vec![0.0; n];
                    dp.ev.deriv(hit.t, &wl, &mut dl)?;
                    if (hit.t - t).abs() > 0.0 {
                        traj.t.push(hit.t);
                        traj.w.push(wl);
                        traj.dw.push(dl);
                    }
                    traj.rot = rot.clone();
                    traj.stats.evaluations = dp.ev.evals;
                    return Ok((traj, Some(hit)));
                }
                g_prev = Some(g_new);
            }
            t = t_new;
            w.copy_from_slice(&w_new);
            f0.copy_from_slice(&dp.k[6]);
            let fac = if reject_streak > 0 { 1.0 } else { 5.0 };
            reject_streak = 0;
            if !hits_stop || e > 0.0 {
                h = (hh * (0.9 * e.max(1e-10).powf(-0.2)).clamp(0.2, fac)).min(opts.h_max);
            }
            if hits_stop {
                stop_idx += 1;
                if stop_idx == stops.len() {
                    break;
                }
            }
        } else {
            traj.stats.rejected += 1;
            reject_streak += 1;
            h = hh * (0.9 * e.powf(-0.2)).clamp(0.1, 1.0);
        }
    }
    traj.stats.evaluations = dp.ev.evals;
    drop(dp);
    traj.rot = rot;
    Ok((traj, None))
}

fn initial_step(dp: &mut Dopri, t0: f64, w0: &[f64], f0: &[f64], opts: &IntegratorOptions, span: f64) -> Result<f64> {
    let sc: Vec<f64> = w0.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let rms = |v: &[f64]| -> f64 {
        (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
    };
    let d0 = rms(w0);
    let d1 = rms(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let w1: Vec<f64> = w0.iter().zip(f0).map(|(w, f)| w + h0 * f).collect();
    let mut f1 = vec![0.0; w0.len()];
    dp.ev.deriv(t0 + h0, &w1, &mut f1)?;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(span))
}

#[allow(clippy::too_many_arguments)]
fn locate_event(
    dp: &mut Dopri,
    g: &EventFn,
    ta: f64,
    wa: &[f64],
    fa: &[f64],
    tb: f64,
    ga: f64,
    gb: f64,
) -> Result<EventHit> {
    let n = wa.len();
    let mut out = vec![0.0; n];
    let mut err = vec![0.0; n];
    // Exact (integrator-accurate) state at an interior time: one RK step from the left node.
    let mut eval_at = |dp: &mut Dopri, s: f64| -> Result<(f64, Vec<f64>)> {
        if s == ta {
            let z = dp.ev.to_physical(ta, wa);
            return Ok((g(ta, &z), z));
        }
        dp.k[0].copy_from_slice(fa);
        dp.step(ta, wa, s - ta, &mut out, &mut err)?;
        let z = dp.ev.to_physical(s, &out);
        Ok((g(s, &z), z))
    };
    if gb == 0.0 {
        let (_, z) = eval_at(dp, tb)?;
        return Ok(EventHit { t: tb, state: z });
    }
    // Illinois false position on the exact-step event function.
    let (mut a, mut b, mut fa_, mut fb_) = (ta, tb, ga, gb);
    let mut side = 0i32;
    let tol = 1e-13 * tb.abs().max(1.0);
    let mut best = (tb, gb);
    for _ in 0..200 {
        let c = if fb_ != fa_ { (a * fb_ - b * fa_) / (fb_ - fa_) } else { 0.5 * (a + b) };
        let c = if (c - a) * (c - b) < 0.0 { c } else { 0.5 * (a + b) };
        let (fc, _) = eval_at(dp, c)?;
        if fc.abs() < best.1.abs() {
            best = (c, fc);
        }
        if fc == 0.0 || (b - a).abs() < tol {
            best = (c, fc);
            break;
        }
        if fc.signum() == fb_.signum() {
            b = c;
            fb_ = fc;
            if side == -1 {
                fa_ *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa_ = fc;
            if side == 1 {
                fb_ *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() < tol {
            break;
        }
    }
    let (_, z) = eval_at(dp, best.0)?;
    Ok(EventHit { t: best.0, state: z })
}

/// Full system: slow `x`, one fast block `y`.
pub struct FullRhs<'a> {
    pub sys: &'a SlowFastSystem,
    pub eps: f64,
}

impl LawsonRhs for FullRhs<'_> {
    fn slow_dim(&self) -> usize {
        self.sys.n_x
    }
    fn fast_blocks(&self) -> usize {
        1
    }
    fn eval(&self, t: f64, x: &[f64], y: &[f64], dx: &mut [f64], dy: &mut [f64]) -> Result<()> {
        self.sys.eval_f(x, y, t, self.eps, dx)?;
        let a = &self.sys.a;
        for (i, d) in dx.iter_mut().enumerate() {
            *d += (0..x.len()).map(|j| a[(i, j)] * x[j]).sum::<f64>();
        }
        self.sys.eval_g(x, y, t, self.eps, dy)
    }
}

/// Slow equation with `y` frozen at 0 and the given `ε` inside `f`.
pub struct LimitRhs<'a> {
    pub sys: &'a SlowFastSystem,
    pub eps: f64,
    zero_y: Vec<f64>,
}

impl<'a> LimitRhs<'a> {
    pub fn new(sys: &'a SlowFastSystem, eps: f64) -> Self {
        LimitRhs { sys, eps, zero_y: vec![0.0; sys.n_y] }
    }
}

impl LawsonRhs for LimitRhs<'_> {
    fn slow_dim(&self) -> usize {
        self.sys.n_x
    }
    fn fast_blocks(&self) -> usize {
        0
    }
    fn eval(&self, t: f64, x: &[f64], _: &[f64], dx: &mut [f64], _: &mut [f64]) -> Result<()> {
        self.sys.eval_f(x, &self.zero_y, t, self.eps, dx)?;
        let a = &self.sys.a;
        for (i, d) in dx.iter_mut().enumerate() {
            *d += (0..x.len()).map(|j| a[(i, j)] * x[j]).sum::<f64>();
        }
        Ok(())
    }
}

/// Full flow; `t1 < t0` integrates backward.
pub fn integrate_full(
    sys: &SlowFastSystem,
    x0: &[f64],
    y0: &[f64],
    t0: f64,
    t1: f64,
    eps: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let rot = FastRotation::new(&sys.j, eps, t0)?;
    let z0: Vec<f64> = x0.iter().chain(y0.iter()).cloned().collect();
    Ok(solve_lawson(&FullRhs { sys, eps }, Some(rot), FlowKind::Full, &z0, t0, t1, opts, None)?.0)
}

/// Full flow stopped at the first sign change of `event` after time `t_min` has elapsed.
#[allow(clippy::too_many_arguments)]
pub fn integrate_full_to_event(
    sys: &SlowFastSystem,
    z0: &[f64],
    t0: f64,
    t_max: f64,
    eps: f64,
    opts: &IntegratorOptions,
    event: &EventFn,
    t_min: f64,
) -> Result<(Trajectory, Option<EventHit>)> {
    let rot = FastRotation::new(&sys.j, eps, t0)?;
    solve_lawson(&FullRhs { sys, eps }, Some(rot), FlowKind::Full, z0, t0, t_max, opts, Some((event, t_min)))
}

/// `eps = 0`: the singular limit `ẋ₀ = Ax₀ + f(x₀,0,t,0)`; `eps > 0`: the principal
/// approximation `ẋ_* = Ax_* + f(x_*,0,t,ε)`.
pub fn integrate_limit(
    sys: &SlowFastSystem,
    x0: &[f64],
    t0: f64,
    t1: f64,
    eps: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let kind = if eps == 0.0 { FlowKind::Limit } else { FlowKind::Principal };
    Ok(solve_lawson(&LimitRhs::new(sys, eps), None, kind, x0, t0, t1, opts, None)?.0)
}

/// Linearization of the full flow, integrated jointly with a re-integration of the
/// base orbit from its initial node so the Jacobians are evaluated on an exact base.
pub fn variational_full(
    sys: &SlowFastSystem,
    base: &Trajectory,
    dx0: &[f64],
    dy0: &[f64],
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    if base.n_slow != sys.n_x || base.n_fast != sys.n_y {
        return Err(NespError::Dimension("base is not a full-system trajectory".into()));
    }
    let eps = base.eps;
    let rhs = VarFullRhs { sys, eps };
    let z_base = base.node(0);
    let (bx, by) = z_base.split_at(sys.n_x);
    let z0: Vec<f64> = bx.iter().chain(dx0).chain(by).chain(dy0).cloned().collect();
    let rot = FastRotation::new(&sys.j, eps, base.t0())?;
    Ok(solve_lawson(&rhs, Some(rot), FlowKind::VariationalFull, &z0, base.t0(), base.t_end(), opts, None)?.0)
}

struct VarFullRhs<'a> {
    sys: &'a SlowFastSystem,
    eps: f64,
}

impl LawsonRhs for VarFullRhs<'_> {
    fn slow_dim(&self) -> usize {
        2 * self.sys.n_x
    }
    fn fast_blocks(&self) -> usize {
        2
    }
    fn eval(&self, t: f64, s: &[f64], f: &[f64], ds: &mut [f64], df: &mut [f64]) -> Result<()> {
        let (nx, ny) = (self.sys.n_x, self.sys.n_y);
        let (x, dx) = s.split_at(nx);
        let (y, dy) = f.split_at(ny);
        let (dsx, dsd) = ds.split_at_mut(nx);
        let (dfy, dfd) = df.split_at_mut(ny);
        FullRhs { sys: self.sys, eps: self.eps }.eval(t, x, y, dsx, dfy)?;
        let jb = state_jacobian(self.sys, x, y, t, self.eps)?;
        let dxv = DVector::from_column_slice(dx);
        let dyv = DVector::from_column_slice(dy);
        let vx = (&self.sys.a + &jb.fx) * &dxv + &jb.fy * &dyv;
        let vy = &jb.gx * &dxv + &jb.gy * &dyv;
        dsd.copy_from_slice(vx.as_slice());
        dfd.copy_from_slice(vy.as_slice());
        Ok(())
    }
}

/// Linearized limit system: `δẋ₀ = (A + D_xf(x₀,0,t,0))δx₀`,
/// `δẏ₀ = (J/ε)δy₀ + D_yg(x₀,0,t,0)δy₀`. The base `x₀` is re-integrated from `base0`'s first node.
pub fn variational_limit(
    sys: &SlowFastSystem,
    base0: &Trajectory,
    dx0: &[f64],
    dy0: &[f64],
    eps: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    if base0.n_slow != sys.n_x {
        return Err(NespError::Dimension("base is not a slow trajectory".into()));
    }
    let x0 = base0.slow_at(base0.t0())?;
    let z0: Vec<f64> = x0.iter().chain(dx0).chain(dy0).cloned().collect();
    let rot = FastRotation::new(&sys.j, eps, base0.t0())?;
    let rhs = VarLimitRhs { sys, zero_y: vec![0.0; sys.n_y] };
    Ok(solve_lawson(&rhs, Some(rot), FlowKind::VariationalLimit, &z0, base0.t0(), base0.t_end(), opts, None)?.0)
}

struct VarLimitRhs<'a> {
    sys: &'a SlowFastSystem,
    zero_y: Vec<f64>,
}

impl LawsonRhs for VarLimitRhs<'_> {
    fn slow_dim(&self) -> usize {
        2 * self.sys.n_x
    }
    fn fast_blocks(&self) -> usize {
        1
    }
    fn eval(&self, t: f64, s: &[f64], f: &[f64], ds: &mut [f64], df: &mut [f64]) -> Result<()> {
        let nx = self.sys.n_x;
        let (x, dx) = s.split_at(nx);
        let (dsx, dsd) = ds.split_at_mut(nx);
        LimitRhs::new(self.sys, 0.0).eval(t, x, &[], dsx, &mut [])?;
        let jb = state_jacobian(self.sys, x, &self.zero_y, t, 0.0)?;
        let vx = (&self.sys.a + &jb.fx) * DVector::from_column_slice(dx);
        dsd.copy_from_slice(vx.as_slice());
        let vy = &jb.gy * DVector::from_column_slice(f);
        df.copy_from_slice(vy.as_slice());
        Ok(())
    }
}

/// Evolution operator of `δẏ = (J/ε + D_yg(x(t),0,t,ε))δy` from `t0` to `t1`.
pub fn fast_evolution(
    sys: &SlowFastSystem,
    x_traj: &Trajectory,
    t0: f64,
    t1: f64,
    eps: f64,
    opts: &IntegratorOptions,
) -> Result<DMatrix<f64>> {
    let ny = sys.n_y;
    let rhs = FastEvoRhs { sys, x_traj, eps, zero_y: vec![0.0; ny] };
    let mut z0 = vec![0.0; ny * ny];
    for c in 0..ny {
        z0[c * ny + c] = 1.0;
    }
    let rot = FastRotation::new(&sys.j, eps, t0)?;
    let traj = solve_lawson(&rhs, Some(rot), FlowKind::FastEvolution, &z0, t0, t1, opts, None)?.0;
    Ok(DMatrix::from_column_slice(ny, ny, &traj.final_state()))
}

struct FastEvoRhs<'a> {
    sys: &'a SlowFastSystem,
    x_traj: &'a Trajectory,
    eps: f64,
    zero_y: Vec<f64>,
}

impl LawsonRhs for FastEvoRhs<'_> {
    fn slow_dim(&self) -> usize {
        0
    }
    fn fast_blocks(&self) -> usize {
        self.sys.n_y
    }
    fn eval(&self, t: f64, _: &[f64], f: &[f64], _: &mut [f64], df: &mut [f64]) -> Result<()> {
        let ny = self.sys.n_y;
        let x = self.x_traj.slow_at(t)?;
        let gy = state_jacobian(self.sys, &x[..self.sys.n_x], &self.zero_y, t, self.eps)?.gy;
        for (col, dcol) in f.chunks(ny).zip(df.chunks_mut(ny)) {
            let v = &gy * DVector::from_column_slice(col);
            dcol.copy_from_slice(v.as_slice());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Field;
    use nalgebra::dmatrix;
    use std::f64::consts::PI;

    fn rot_j() -> DMatrix<f64> {
        dmatrix![0.0, 1.0; -1.0, 0.0]
    }

    fn free_rotation() -> SlowFastSystem {
        SlowFastSystem::new("free", DMatrix::zeros(1, 1), rot_j(), Field::zero(), Field::zero()).unwrap()
    }

    fn pendulum() -> SlowFastSystem {
        let f = Field::new(|x, _, _, _, o| {
            o[0] = 0.0;
            o[1] = x[0].sin();
            Ok(())
        });
        // Shifted rigid pendulum about the upright state: ẋ = x1, ẋ1 = sin x.
        SlowFastSystem::new("pend", dmatrix![0.0, 1.0; 0.0, 0.0], rot_j(), f, Field::zero()).unwrap()
    }

    #[test]
    fn exact_clockwise_quarter_turn() {
        let eps = 0.01;
        let tr = integrate_full(&free_rotation(), &[0.0], &[1.0, 0.0], 0.0, PI * eps / 2.0, eps, &Default::default())
            .unwrap();
        let z = tr.final_state();
        assert!((z[1] - 0.0).abs() < 1e-9 && (z[2] + 1.0).abs() < 1e-9, "{z:?}");
    }

    #[test]
    fn lawson_exactness_independent_of_eps() {
        let mut counts = Vec::new();
        for eps in [1e-1, 1e-3, 1e-5] {
            let tr = integrate_full(&free_rotation(), &[0.3], &[0.6, 0.8], 0.0, 3.0, eps, &Default::default()).unwrap();
            for k in 0..tr.len() {
                let z = tr.node(k);
                assert!(((z[1] * z[1] + z[2] * z[2]).sqrt() - 1.0).abs() < 1e-12);
            }
            let mid = tr.state_at(1.2345).unwrap();
            let want = crate::linalg::expm(&rot_j(), 1.2345 / eps).unwrap() * DVector::from_column_slice(&[0.6, 0.8]);
            assert!((mid[1] - want[0]).abs() < 1e-12 && (mid[2] - want[1]).abs() < 1e-12);
            counts.push(tr.stats.accepted);
        }
        assert!(counts.iter().all(|&c| c == counts[0] && c < 20), "{counts:?}");
    }

    #[test]
    fn interpolant_matches_nodes() {
        let sys = pendulum();
        let tr = integrate_full(&sys, &[0.5, 0.1], &[0.01, 0.0], 0.0, 2.0, 0.05, &Default::default()).unwrap();
        for k in 0..tr.len() {
            let a = tr.node(k);
            let b = tr.state_at(tr.t[k]).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn limit_energy_conserved_and_separatrix_tracked() {
        let sys = pendulum();
        let h = |x: &[f64]| 0.5 * x[1] * x[1] + x[0].cos();
        let tr = integrate_limit(&sys, &[1.0, 0.2], 0.0, 10.0, 0.0, &Default::default()).unwrap();
        let h0 = h(&tr.node(0));
        for k in 0..tr.len() {
            assert!((h(&tr.node(k)) - h0).abs() < 1e-8);
        }
        // Separatrix of ẍ = sin x: x(t) = 4 atan(e^t) − π, shifted so x = 0 is the saddle.
        let xh = |t: f64| 4.0 * t.exp().atan() - PI;
        let vh = |t: f64| 2.0 / t.cosh();
        let opts = IntegratorOptions::tight();
        let fwd = integrate_limit(&sys, &[xh(0.0) + PI, vh(0.0)], 0.0, 5.0, 0.0, &opts).unwrap();
        let bwd = integrate_limit(&sys, &[xh(0.0) + PI, vh(0.0)], 0.0, -5.0, 0.0, &opts).unwrap();
        for i in 0..=50 {
            let t = -5.0 + 0.2 * i as f64;
            let tr = if t >= 0.0 { &fwd } else { &bwd };
            let x = tr.state_at(t).unwrap();
            assert!((x[0] - (xh(t) + PI)).abs() < 1e-7, "t = {t}");
        }
    }

    #[test]
    fn backward_then_forward_returns() {
        let sys = pendulum();
        let eps = 0.02;
        let a = integrate_full(&sys, &[0.3, 0.2], &[0.1, -0.1], 1.0, -1.0, eps, &IntegratorOptions::tight()).unwrap();
        let z = a.final_state();
        let b = integrate_full(&sys, &z[..2], &z[2..], -1.0, 1.0, eps, &IntegratorOptions::tight()).unwrap();
        let w = b.final_state();
        for (u, v) in w.iter().zip([0.3, 0.2, 0.1, -0.1]) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn variational_zero_and_linear_exactness() {
        let sys = pendulum();
        let eps = 0.05;
        let base = integrate_full(&sys, &[0.4, 0.0], &[0.0, 0.1], 0.0, 2.0, eps, &Default::default()).unwrap();
        let v = variational_full(&sys, &base, &[0.0, 0.0], &[0.0, 0.0], &Default::default()).unwrap();
        for k in 0..v.len() {
            let z = v.node(k);
            assert_eq!(z[2].abs() + z[3].abs() + z[6].abs() + z[7].abs(), 0.0);
        }
        // Linear field: variation equals the difference of two full solutions.
        let lin = SlowFastSystem::new(
            "lin",
            dmatrix![0.0, 1.0; -1.0, -0.1],
            rot_j(),
            Field::new(|_, y, _, _, o| {
                o[0] = 0.3 * y[0];
                o[1] = 0.0;
                Ok(())
            }),
            Field::new(|x, _, _, _, o| {
                o[0] = x[0];
                o[1] = -x[1];
                Ok(())
            }),
        )
        .unwrap();
        let opts = IntegratorOptions::tight();
        let b = integrate_full(&lin, &[1.0, 0.0], &[0.0, 0.0], 0.0, 3.0, eps, &opts).unwrap();
        let c = integrate_full(&lin, &[1.2, -0.1], &[0.05, 0.0], 0.0, 3.0, eps, &opts).unwrap();
        let v = variational_full(&lin, &b, &[0.2, -0.1], &[0.05, 0.0], &opts).unwrap();
        let (zb, zc, zv) = (b.final_state(), c.final_state(), v.final_state());
        let diff = [zc[0] - zb[0], zc[1] - zb[1], zc[2] - zb[2], zc[3] - zb[3]];
        let var = [zv[2], zv[3], zv[6], zv[7]];
        for (a, b) in diff.iter().zip(var) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn variational_matches_directional_differences() {
        let sys = pendulum();
        let eps = 0.05;
        let opts = IntegratorOptions::tight();
        let z0 = [0.4, 0.1, 0.02, 0.0];
        let base = integrate_full(&sys, &z0[..2], &z0[2..], 0.0, 2.0, eps, &opts).unwrap();
        let dir = [1.0, 0.0, 0.0, 0.5];
        let v = variational_full(&sys, &base, &dir[..2], &dir[2..], &opts).unwrap().final_state();
        let var = [v[2], v[3], v[6], v[7]];
        let mut errs = Vec::new();
        for h in [1e-4, 1e-5] {
            let zp: Vec<f64> = z0.iter().zip(&dir).map(|(a, d)| a + h * d).collect();
            let p = integrate_full(&sys, &zp[..2], &zp[2..], 0.0, 2.0, eps, &opts).unwrap().final_state();
            let b = base.final_state();
            let e = (0..4).map(|i| ((p[i] - b[i]) / h - var[i]).abs()).fold(0.0, f64::max);
            errs.push(e);
        }
        assert!(errs[0] < 1e-2 && errs[1] < 0.2 * errs[0], "{errs:?}");
    }

    #[test]
    fn fast_evolution_rotation_identity_and_group() {
        let sys = free_rotation();
        let eps = 0.01;
        let xt = integrate_limit(&sys, &[0.0], 0.0, 2.0, 0.0, &Default::default()).unwrap();
        let opts = IntegratorOptions::tight();
        let e = fast_evolution(&sys, &xt, 0.0, 1.3, eps, &opts).unwrap();
        let want = crate::linalg::expm(&rot_j(), 1.3 / eps).unwrap();
        assert!((&e - want).amax() < 1e-10);
        assert!((fast_evolution(&sys, &xt, 0.7, 0.7, eps, &opts).unwrap() - DMatrix::identity(2, 2)).amax() == 0.0);

        let g = Field::new(|x, y, _, _, o| {
            o[0] = 0.3 * x[0] * y[1];
            o[1] = -0.2 * y[0];
            Ok(())
        });
        let sys = SlowFastSystem::new("ev", DMatrix::from_element(1, 1, 0.1), rot_j(), Field::zero(), g).unwrap();
        let xt = integrate_limit(&sys, &[1.0], 0.0, 2.0, 0.0, &opts).unwrap();
        let e10 = fast_evolution(&sys, &xt, 0.0, 0.8, eps, &opts).unwrap();
        let e21 = fast_evolution(&sys, &xt, 0.8, 1.9, eps, &opts).unwrap();
        let e20 = fast_evolution(&sys, &xt, 0.0, 1.9, eps, &opts).unwrap();
        assert!((e21 * e10 - e20).amax() < 1e-8);
    }

    #[test]
    fn variational_limit_unitary_when_gy_vanishes() {
        let sys = pendulum();
        let eps = 0.01;
        let base = integrate_limit(&sys, &[0.5, 0.0], 0.0, 3.0, 0.0, &Default::default()).unwrap();
        let v = variational_limit(&sys, &base, &[1.0, 0.0], &[0.0, 0.0], eps, &Default::default()).unwrap();
        assert!(v.final_state()[4..].iter().all(|c| *c == 0.0));
        let v = variational_limit(&sys, &base, &[1.0, 0.0], &[0.6, 0.8], eps, &Default::default()).unwrap();
        for k in 0..v.len() {
            let z = v.node(k);
            assert!(((z[4] * z[4] + z[5] * z[5]).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn event_located_on_section() {
        let sys = pendulum();
        let ev = |_: f64, z: &[f64]| z[0] - 1.0;
        let rot = FastRotation::new(&sys.j, 0.01, 0.0).unwrap();
        let (_, hit) = solve_lawson(
            &FullRhs { sys: &sys, eps: 0.01 },
            Some(rot),
            FlowKind::Full,
            &[0.5, 0.5, 0.0, 0.0],
            0.0,
            10.0,
            &IntegratorOptions::tight(),
            Some((&ev, 0.0)),
        )
        .unwrap();
        let hit = hit.unwrap();
        assert!((hit.state[0] - 1.0).abs() < 1e-11);
    }
}
