//! Near-identity transformations that push the slow manifold's invariance defect
//! to higher order, and convergence sweeps comparing the full flow with its
//! singular limit.
//!
//! One push replaces `y` by `y' = y + εJ⁻¹g(x, 0, t, ε)`. Substituting into the
//! fast equation gives
//!
//! ```text
//! ẏ' = (J/ε)y' + g(x, y) − g(x, 0) + ε(Dφ·(Ax + f(x, y)) + ∂_tφ),   φ = J⁻¹g(·, 0, ·, ε),
//! ```
//!
//! with `y = y' − εφ`. The wrappers compose the oracles exactly; only `Dφ` and
//! `∂_tφ` are finite differences.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{NespError, Result};
use crate::integrate::{
    integrate_full, integrate_limit, variational_full, variational_limit, IntegratorOptions, Trajectory,
};
use crate::model::{probe_points, Field, SlowFastSystem};

/// Pushes beyond this depth rely on finite differences of finite differences.
const SMOOTHNESS_BUDGET: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualRecord {
    pub order: usize,
    pub eps: f64,
    pub value: f64,
}

/// Systems `S_0, …, S_k` related by successive pushes, with the maps between
/// their fast variables.
#[derive(Debug, Clone)]
pub struct TransformChain {
    levels: Vec<SlowFastSystem>,
    j_inv: DMatrix<f64>,
    pub records: Vec<ResidualRecord>,
    pub warnings: Vec<String>,
}

impl TransformChain {
    pub fn new(sys: &SlowFastSystem) -> Result<Self> {
        Ok(TransformChain { levels: vec![sys.clone()], j_inv: sys.j_inv()?, records: Vec::new(), warnings: Vec::new() })
    }

    /// Number of pushes applied.
    pub fn order(&self) -> usize {
        self.levels.len() - 1
    }

    /// The most transformed system.
    pub fn system(&self) -> &SlowFastSystem {
        self.levels.last().unwrap()
    }

    pub fn level(&self, j: usize) -> &SlowFastSystem {
        &self.levels[j]
    }

    /// `φ_j(x, t, ε) = J⁻¹g_j(x, 0, t, ε)`.
    fn phi(&self, j: usize, x: &[f64], t: f64, eps: f64) -> Result<DVector<f64>> {
        phi(&self.levels[j], &self.j_inv, x, t, eps)
    }

    /// `y ↦ y_k`.
    pub fn forward(&self, x: &[f64], y: &[f64], t: f64, eps: f64) -> Result<Vec<f64>> {
        let mut v = DVector::from_column_slice(y);
        for j in 0..self.order() {
            v += eps * self.phi(j, x, t, eps)?;
        }
        Ok(v.as_slice().to_vec())
    }

    /// `y_k ↦ y`; exact inverse of [`forward`](Self::forward) since each step
    /// depends on `x` and `t` only.
    pub fn inverse(&self, x: &[f64], yk: &[f64], t: f64, eps: f64) -> Result<Vec<f64>> {
        let mut v = DVector::from_column_slice(yk);
        for j in (0..self.order()).rev() {
            v -= eps * self.phi(j, x, t, eps)?;
        }
        Ok(v.as_slice().to_vec())
    }

    /// Stores `residual_norm` of the top level.
    pub fn record_residual(&mut self, probes: &[Vec<f64>], t_grid: &[f64], eps: f64) -> Result<f64> {
        let value = residual_norm(self.system(), probes, t_grid, eps)?;
        self.records.push(ResidualRecord { order: self.order(), eps, value });
        Ok(value)
    }
}

fn phi(sys: &SlowFastSystem, j_inv: &DMatrix<f64>, x: &[f64], t: f64, eps: f64) -> Result<DVector<f64>> {
    let zero = vec![0.0; sys.n_y];
    Ok(j_inv * sys.g_vec(x, &zero, t, eps)?)
}

/// Five-point derivative `d/ds F(s)` at `s = 0`.
fn d5(h: f64, mut f: impl FnMut(f64) -> Result<DVector<f64>>) -> Result<DVector<f64>> {
    let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Appends one transformation step to the chain.
pub fn push_transform(mut chain: TransformChain) -> TransformChain {
    let k = chain.order();
    if k + 1 > SMOOTHNESS_BUDGET {
        chain.warnings.push(format!(
            "push {} exceeds the smoothness budget of {SMOOTHNESS_BUDGET}; nested finite differences lose accuracy",
            k + 1
        ));
    }
    let prev = chain.system().clone();
    let j_inv = chain.j_inv.clone();
    // Deeper levels carry noisier oracles, so their differences use wider steps.
    let h = 1e-3 * 3f64.powi(k as i32);
    let (nx, ny) = (prev.n_x, prev.n_y);

    let f = {
        let (prev, j_inv) = (prev.clone(), j_inv.clone());
        Field::new(move |x, yk, t, eps, out| {
            let y = DVector::from_column_slice(yk) - eps * phi(&prev, &j_inv, x, t, eps)?;
            prev.eval_f(x, y.as_slice(), t, eps, out)
        })
    };
    let g = {
        let prev = prev.clone();
        Field::new(move |x, yk, t, eps, out| {
            let zero = vec![0.0; ny];
            let g0 = prev.g_vec(x, &zero, t, eps)?;
            let y = DVector::from_column_slice(yk) - eps * (&j_inv * &g0);
            let gy = prev.g_vec(x, y.as_slice(), t, eps)?;
            let mut r = gy - g0;
            if eps != 0.0 {
                let v = &prev.a * DVector::from_column_slice(x) + prev.f_vec(x, y.as_slice(), t, eps)?;
                let vn = v.amax();
                if vn > 0.0 {
                    let mut xs = vec![0.0; nx];
                    let dphi = d5(h, |s| {
                        for i in 0..nx {
                            xs[i] = x[i] + s * v[i] / vn;
                        }
                        phi(&prev, &j_inv, &xs, t, eps)
                    })?;
                    r += eps * vn * dphi;
                }
                if !prev.flags.autonomous {
                    r += eps * d5(h, |s| phi(&prev, &j_inv, x, t + s, eps))?;
                }
            }
            out.copy_from_slice(r.as_slice());
            Ok(())
        })
    };
    let base = &chain.levels[0].name;
    let name = format!("{base}+push{}", k + 1);
    let next = SlowFastSystem {
        name,
        f,
        g,
        jac: None,
        invariant: None,
        ..prev
    };
    chain.levels.push(next);
    chain
}

/// `sup |g(x, 0, t, ε)|` over the probe points and time grid.
pub fn residual_norm(sys: &SlowFastSystem, probes: &[Vec<f64>], t_grid: &[f64], eps: f64) -> Result<f64> {
    let zero = vec![0.0; sys.n_y];
    let mut worst: f64 = 0.0;
    for x in probes {
        for &t in t_grid {
            worst = worst.max(sys.g_vec(x, &zero, t, eps)?.norm());
        }
    }
    Ok(worst)
}

/// Slow probe points in `[-r/3, r/3]^{n_x}`, `r` the system's cut-off radius:
/// the region where the cut-off leaves the field unchanged.
pub fn default_probes(sys: &SlowFastSystem, count: usize) -> Vec<Vec<f64>> {
    probe_points(sys.n_x, count, sys.hints.cutoff_radius / 3.0, 0x5107)
}

pub const DEFAULT_T_GRID: [f64; 4] = [0.0, 0.7, 1.9, 4.3];

/// State-space invariance defect of `{y_k = 0}`: the largest `|y_k(t)|` over
/// `t ∈ [t0, t0 + horizon]` along full orbits started on `{y_k = 0}` at the
/// probe points.
pub fn invariance_defect(
    chain: &TransformChain,
    probes: &[Vec<f64>],
    t0: f64,
    horizon: f64,
    eps: f64,
    opts: &IntegratorOptions,
) -> Result<f64> {
    let base = chain.level(0);
    let nx = base.n_x;
    let samples = 400;
    let mut worst: f64 = 0.0;
    for x0 in probes {
        let y0 = chain.inverse(x0, &vec![0.0; base.n_y], t0, eps)?;
        let tr = integrate_full(base, x0, &y0, t0, t0 + horizon, eps, opts)?;
        for i in 0..=samples {
            let t = t0 + horizon * i as f64 / samples as f64;
            let z = tr.state_at(t)?;
            let yk = chain.forward(&z[..nx], &z[nx..], t, eps)?;
            worst = worst.max(yk.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok(worst)
}

/// Least-squares fit of `log10 v = slope·log10 ε + intercept`.
pub fn fit_loglog(eps: &[f64], v: &[f64]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> =
        eps.iter().zip(v).filter(|(e, v)| **e > 0.0 && **v > 0.0).map(|(e, v)| (e.log10(), v.log10())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Which comparison a sweep measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    /// Full orbit from `(x0, εy0)` against the singular limit from `x0`:
    /// `sup |x − x₀| + |y|`.
    SlowLimit,
    /// Linearizations along those two orbits from `(δx0, δy0)`:
    /// `sup |δx − δx₀| + |δy − δy₀|`.
    Linearized,
    /// Full orbit from `(x0, 0)` against the principal flow
    /// `ẋ = Ax + f(x, 0, t, ε)` from `x0`: `sup |x − x_*| + |y|`.
    Principal,
}

impl Comparison {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "3.1" | "slow-limit" => Some(Comparison::SlowLimit),
            "3.2" | "linearized" => Some(Comparison::Linearized),
            "principal" | "ft" => Some(Comparison::Principal),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Comparison::SlowLimit => "slow-limit",
            Comparison::Linearized => "linearized",
            Comparison::Principal => "principal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub t0: f64,
    pub horizon: f64,
    pub eps: Vec<f64>,
    pub x0: Vec<f64>,
    /// Initial fast state divided by `ε`; ignored by [`Comparison::Principal`].
    pub y0_over_eps: Vec<f64>,
    /// Tangent initial data for [`Comparison::Linearized`].
    pub dx0: Vec<f64>,
    pub dy0: Vec<f64>,
    pub opts: IntegratorOptions,
    /// Uniform sampling of the window for the sup norm.
    pub samples: usize,
}

impl StudyConfig {
    pub fn new(sys: &SlowFastSystem, x0: Vec<f64>, eps: Vec<f64>) -> Self {
        let mut dx0 = vec![0.0; sys.n_x];
        dx0[0] = 1.0;
        let mut dy0 = vec![0.0; sys.n_y];
        dy0[0] = 1.0;
        StudyConfig {
            t0: 0.0,
            horizon: 1.0,
            eps,
            x0,
            y0_over_eps: vec![0.0; sys.n_y],
            dx0,
            dy0,
            opts: IntegratorOptions::tight(),
            samples: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub eps: f64,
    /// `None` when the integration failed at this `ε`.
    pub error: Option<f64>,
    /// Change of the error under halved tolerances.
    pub floor: f64,
    /// Within 10× of the floor and excluded from the fit.
    pub floored: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    /// What was measured, e.g. `"slow-limit"` or `"graph-gap"`.
    pub quantity: String,
    pub points: Vec<SweepPoint>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub norm: String,
    pub window: (f64, f64),
    /// `"floor"` when fewer than two points survive, `"gap"` on failed legs.
    pub flags: Vec<String>,
}

impl SweepResult {
    /// Flags and the log-log fit over the points that are neither failed nor floored.
    pub fn from_points(quantity: &str, points: Vec<SweepPoint>, norm: &str, window: (f64, f64)) -> Self {
        let mut flags = Vec::new();
        if points.iter().any(|p| p.failure.is_some()) {
            flags.push("gap".to_string());
        }
        let (fe, fv): (Vec<f64>, Vec<f64>) =
            points.iter().filter(|p| !p.floored).filter_map(|p| p.error.map(|v| (p.eps, v))).unzip();
        let fit = if fe.len() >= 2 { fit_loglog(&fe, &fv) } else { None };
        if fit.is_none() {
            flags.push("floor".to_string());
        }
        SweepResult {
            quantity: quantity.to_string(),
            points,
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            norm: norm.to_string(),
            window,
            flags,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,error\n");
        for p in &self.points {
            match p.error {
                Some(e) => s.push_str(&format!("{:e},{:e}\n", p.eps, e)),
                None => s.push_str(&format!("{:e},nan\n", p.eps)),
            }
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "quantity": self.quantity,
            "slope": self.slope,
            "intercept": self.intercept,
            "norm": self.norm,
            "window": [self.window.0, self.window.1],
            "flags": self.flags,
            "points": self.points,
        })
    }

    /// Errors decrease with `ε` among the fitted points.
    pub fn is_monotone(&self) -> bool {
        let e: Vec<f64> = self.points.iter().filter(|p| !p.floored).filter_map(|p| p.error).collect();
        e.windows(2).all(|w| w[1] <= w[0])
    }

    /// Constant `C` in `error ≈ C ε^slope`.
    pub fn constant(&self) -> Option<f64> {
        self.intercept.map(|b| 10f64.powf(b))
    }
}

fn sup_diff(
    a: &Trajectory,
    b: &Trajectory,
    window: (f64, f64),
    samples: usize,
    pair: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..=samples {
        let t = window.0 + (window.1 - window.0) * i as f64 / samples as f64;
        worst = worst.max(pair(&a.state_at(t)?, &b.state_at(t)?));
    }
    Ok(worst)
}

fn norm2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Error measure of one sweep leg.
fn leg_error(sys: &SlowFastSystem, which: Comparison, cfg: &StudyConfig, eps: f64, opts: &IntegratorOptions) -> Result<f64> {
    let (nx, ny) = (sys.n_x, sys.n_y);
    let w = (cfg.t0, cfg.t0 + cfg.horizon);
    match which {
        Comparison::SlowLimit | Comparison::Principal => {
            let y0: Vec<f64> = match which {
                Comparison::SlowLimit => cfg.y0_over_eps.iter().map(|v| eps * v).collect(),
                _ => vec![0.0; ny],
            };
            let full = integrate_full(sys, &cfg.x0, &y0, w.0, w.1, eps, opts)?;
            let limit_eps = if which == Comparison::Principal { eps } else { 0.0 };
            let lim = integrate_limit(sys, &cfg.x0, w.0, w.1, limit_eps, opts)?;
            sup_diff(&full, &lim, w, cfg.samples, |z, x| {
                norm2((0..nx).map(|i| z[i] - x[i])) + norm2(z[nx..].iter().copied())
            })
        }
        Comparison::Linearized => {
            let y0: Vec<f64> = cfg.y0_over_eps.iter().map(|v| eps * v).collect();
            let base = integrate_full(sys, &cfg.x0, &y0, w.0, w.1, eps, opts)?;
            let base0 = integrate_limit(sys, &cfg.x0, w.0, w.1, 0.0, opts)?;
            let vf = variational_full(sys, &base, &cfg.dx0, &cfg.dy0, opts)?;
            let vl = variational_limit(sys, &base0, &cfg.dx0, &cfg.dy0, eps, opts)?;
            // Layouts: full (x, δx, y, δy); limit (x, δx, δy).
            sup_diff(&vf, &vl, w, cfg.samples, |a, b| {
                norm2((0..nx).map(|i| a[nx + i] - b[nx + i]))
                    + norm2((0..ny).map(|i| a[2 * nx + ny + i] - b[2 * nx + i]))
            })
        }
    }
}

/// Paired integrations per `ε`, legs in parallel, merged in `ε` order.
pub fn convergence_study(sys: &SlowFastSystem, which: Comparison, cfg: &StudyConfig) -> Result<SweepResult> {
    if cfg.x0.len() != sys.n_x || cfg.y0_over_eps.len() != sys.n_y {
        return Err(NespError::Dimension("initial data does not match the system".into()));
    }
    if which == Comparison::Linearized && (cfg.dx0.len() != sys.n_x || cfg.dy0.len() != sys.n_y) {
        return Err(NespError::Dimension("tangent data does not match the system".into()));
    }
    if !(cfg.horizon > 0.0) {
        return Err(NespError::Parameter("the window length must be positive".into()));
    }
    let mut eps = cfg.eps.clone();
    if eps.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(NespError::Parameter("sweep eps values must be positive".into()));
    }
    eps.sort_by(|a, b| b.total_cmp(a));
    if eps.windows(2).any(|w| w[0] == w[1]) {
        return Err(NespError::Parameter("sweep eps values must be distinct".into()));
    }
    let halved = IntegratorOptions { rtol: cfg.opts.rtol / 2.0, atol: cfg.opts.atol / 2.0, ..cfg.opts.clone() };
    let points: Vec<SweepPoint> = eps
        .par_iter()
        .map(|&e| {
            let run = leg_error(sys, which, cfg, e, &cfg.opts)
                .and_then(|a| leg_error(sys, which, cfg, e, &halved).map(|b| (a, b)));
            match run {
                Ok((a, b)) => {
                    let floor = (a - b).abs().max(cfg.opts.atol);
                    SweepPoint { eps: e, error: Some(a), floor, floored: a < 10.0 * floor, failure: None }
                }
                Err(err) => SweepPoint { eps: e, error: None, floor: f64::NAN, floored: true, failure: Some(err.to_string()) },
            }
        })
        .collect();
    let norm = match which {
        Comparison::Linearized => "sup_t |dx - dx0|_2 + |dy - dy0|_2",
        _ => "sup_t |x - x_ref|_2 + |y|_2",
    };
    Ok(SweepResult::from_points(which.label(), points, norm, (cfg.t0, cfg.t0 + cfg.horizon)))
}

/// Per-order residual and invariance-defect sweep of a chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSweep {
    pub eps: Vec<f64>,
    /// `residual[k][i]`: `sup|g_k(x, 0, t, ε_i)|`.
    pub residual: Vec<Vec<f64>>,
    /// `defect[k][i]`: state-space invariance defect of `{y_k = 0}`.
    pub defect: Vec<Vec<f64>>,
    pub residual_slopes: Vec<Option<f64>>,
    pub defect_slopes: Vec<Option<f64>>,
}

impl ChainSweep {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("order,eps,residual,defect\n");
        for k in 0..self.residual.len() {
            for (i, e) in self.eps.iter().enumerate() {
                s.push_str(&format!("{k},{e:e},{:e},{:e}\n", self.residual[k][i], self.defect[k][i]));
            }
        }
        s
    }
}

/// Builds the chain to `max_order` and measures both quantities for every order.
pub fn chain_sweep(
    sys: &SlowFastSystem,
    max_order: usize,
    eps: &[f64],
    probes: &[Vec<f64>],
    horizon: f64,
    opts: &IntegratorOptions,
) -> Result<ChainSweep> {
    let mut chains = vec![TransformChain::new(sys)?];
    for _ in 0..max_order {
        chains.push(push_transform(chains.last().unwrap().clone()));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = chains
        .par_iter()
        .map(|c| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut r = Vec::new();
            let mut d = Vec::new();
            for &e in eps {
                r.push(residual_norm(c.system(), probes, &DEFAULT_T_GRID, e)?);
                d.push(invariance_defect(c, probes, 0.0, horizon, e, opts)?);
            }
            Ok((r, d))
        })
        .collect::<Result<_>>()?;
    let (residual, defect): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    Ok(ChainSweep {
        eps: eps.to_vec(),
        residual_slopes: residual.iter().map(|r| fit_loglog(eps, r).map(|f| f.0)).collect(),
        defect_slopes: defect.iter().map(|d| fit_loglog(eps, d).map(|f| f.0)).collect(),
        residual,
        defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysdsl::parse_system;
    use crate::systems::DissipativePendulum;
    use nalgebra::dmatrix;

    fn linear_in_y(c: [f64; 2], b: [[f64; 2]; 2]) -> SlowFastSystem {
        let g = Field::new(move |_, y, _, _, out| {
            out[0] = c[0] + b[0][0] * y[0] + b[0][1] * y[1];
            out[1] = c[1] + b[1][0] * y[0] + b[1][1] * y[1];
            Ok(())
        });
        let f = Field::new(|x, y, _, _, out| {
            out[0] = x[0] * y[1];
            Ok(())
        });
        SlowFastSystem::new("lin", dmatrix![-1.0], dmatrix![0.0, 2.0; -2.0, 0.0], f, g).unwrap()
    }

    #[test]
    fn zero_driving_gives_identity_push() {
        let sys = parse_system(
            "[dims]\nn_x = 1\nn_y = 2\n[matrix A]\n-1\n[matrix J]\n0, 1; -1, 0\n[field f]\nf1 = x1*y1\n[field g]\ng1 = x1*y2\ng2 = y1^2\n",
        )
        .unwrap();
        let chain = push_transform(TransformChain::new(&sys).unwrap());
        let probes = probe_points(1, 5, 0.3, 1);
        assert_eq!(residual_norm(chain.system(), &probes, &DEFAULT_T_GRID, 0.1).unwrap(), 0.0);
        let (x, y) = ([0.2], [0.1, -0.3]);
        assert_eq!(chain.forward(&x, &y, 0.5, 0.1).unwrap(), y.to_vec());
        let a = chain.system().g_vec(&x, &y, 0.5, 0.1).unwrap();
        let b = sys.g_vec(&x, &y, 0.5, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_in_y_push_matches_hand_formula() {
        let (c, b) = ([0.7, -0.4], [[0.3, -1.1], [0.5, 0.2]]);
        let sys = linear_in_y(c, b);
        let chain = push_transform(TransformChain::new(&sys).unwrap());
        let eps = 0.05;
        // g₁(x, 0) = g(x, −εJ⁻¹c) − c = −εBJ⁻¹c.
        let jinv = sys.j_inv().unwrap();
        let want = -eps * dmatrix![b[0][0], b[0][1]; b[1][0], b[1][1]] * (&jinv * DVector::from_vec(c.to_vec()));
        for x in [[0.0], [0.3], [-0.2]] {
            let got = chain.system().g_vec(&x, &[0.0, 0.0], 1.0, eps).unwrap();
            assert!((&got - &want).amax() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn forward_inverse_roundtrip() {
        let sys = DissipativePendulum::default().build().unwrap();
        let chain = push_transform(push_transform(TransformChain::new(&sys).unwrap()));
        for p in probe_points(4, 20, 0.2, 7) {
            let yk = chain.forward(&p[..2], &p[2..], 0.4, 0.03).unwrap();
            let y = chain.inverse(&p[..2], &yk, 0.4, 0.03).unwrap();
            for i in 0..2 {
                assert!((y[i] - p[2 + i]).abs() < 1e-10);
            }
            // Identity at ε = 0.
            assert_eq!(chain.forward(&p[..2], &p[2..], 0.4, 0.0).unwrap(), p[2..].to_vec());
        }
    }

    #[test]
    fn residual_of_g0_refines_to_the_sup() {
        // g(x,0) = (0, x1² + 1 − cos x̃) at ε = 0: sup over the box corner.
        let sys = DissipativePendulum::default().build().unwrap();
        let coarse = residual_norm(&sys, &probe_points(2, 50, 0.2, 3), &[0.0], 0.0).unwrap();
        let fine = residual_norm(&sys, &probe_points(2, 5000, 0.2, 3), &[0.0], 0.0).unwrap();
        let exact = 0.04 + 1.0 - 0.2f64.cos();
        assert!(coarse <= fine && fine <= exact + 1e-15);
        assert!(exact - fine < 1e-2 * exact, "{fine} vs {exact}");
    }

    #[test]
    fn pendulum_residual_slopes_by_order() {
        let sys = DissipativePendulum::default().build().unwrap();
        let probes = default_probes(&sys, 6);
        let eps = [4e-2, 2e-2, 1e-2, 5e-3];
        let mut chain = TransformChain::new(&sys).unwrap();
        for k in 0..3 {
            if k > 0 {
                chain = push_transform(chain);
            }
            let r: Vec<f64> =
                eps.iter().map(|&e| residual_norm(chain.system(), &probes, &DEFAULT_T_GRID, e).unwrap()).collect();
            let (slope, _) = fit_loglog(&eps, &r).unwrap();
            assert!((slope - k as f64).abs() < 0.25, "order {k}: slope {slope} from {r:?}");
        }
        assert!(chain.warnings.is_empty());
        let deep = push_transform(push_transform(chain));
        assert_eq!(deep.order(), 4);
        assert_eq!(deep.warnings.len(), 1);
    }

    #[test]
    fn sweep_on_exact_limit_hits_the_floor() {
        // Decoupled linear system: x is exactly the limit and y stays 0.
        let sys = parse_system(
            "[dims]\nn_x = 1\nn_y = 2\n[matrix A]\n-0.5\n[matrix J]\n0, 1; -1, 0\n[field f]\nf1 = 0\n[field g]\ng1 = 0\ng2 = 0\n",
        )
        .unwrap();
        let cfg = StudyConfig::new(&sys, vec![0.3], vec![1e-1, 1e-2, 1e-3]);
        let r = convergence_study(&sys, Comparison::Principal, &cfg).unwrap();
        assert!(r.points.iter().all(|p| p.floored));
        assert_eq!(r.slope, None);
        assert!(r.flags.contains(&"floor".to_string()));
    }

    #[test]
    fn sweep_rejects_bad_eps_lists() {
        let sys = DissipativePendulum::default().build().unwrap();
        let mut cfg = StudyConfig::new(&sys, vec![0.1, 0.0], vec![1e-2, 1e-2]);
        assert!(convergence_study(&sys, Comparison::SlowLimit, &cfg).is_err());
        cfg.eps = vec![1e-2, -1e-3];
        assert!(convergence_study(&sys, Comparison::SlowLimit, &cfg).is_err());
    }

    #[test]
    fn sweep_csv_and_json() {
        let r = SweepResult {
            quantity: "slow-limit".into(),
            points: vec![SweepPoint { eps: 0.1, error: Some(0.02), floor: 1e-12, floored: false, failure: None }],
            slope: None,
            intercept: None,
            norm: "n".into(),
            window: (0.0, 1.0),
            flags: vec!["floor".into()],
        };
        assert_eq!(r.to_csv(), "eps,error\n1e-1,2e-2\n");
        assert_eq!(r.summary_json()["window"][1], 1.0);
    }

    #[test]
    fn loglog_fit_recovers_power_law() {
        let e = [1e-1, 1e-2, 1e-3];
        let v: Vec<f64> = e.iter().map(|x| 3.0 * x * x).collect();
        let (s, b) = fit_loglog(&e, &v).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (10f64.powf(b) - 3.0).abs() < 1e-10);
        assert!(fit_loglog(&[1e-1], &[1.0]).is_none());
    }
}
