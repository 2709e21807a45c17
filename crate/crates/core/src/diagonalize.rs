//! Block diagonalization of the linearization at the origin,
//!
//! `𝒜_ε = [[A + D_xf, D_yf], [D_xg, J/ε + D_yg]]`,
//!
//! by coupling maps `L1: X → Y` and `L2: Y → X` whose graphs are invariant:
//!
//! `(J + εD_yg)L1 − εL1(A + D_xf + D_yf L1) + εD_xg = 0`,
//! `L2(εD_xg L2 + J + εD_yg) − ε(A + D_xf)L2 − εD_yf = 0`.
//!
//! Two routes are provided: Newton on the quadratic matrix equations (each step a
//! Sylvester solve) and a Picard iteration of the band-wise maps, whose improper
//! oscillatory integrals are replaced by the equivalent Sylvester solves.

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{NespError, Result};
use crate::linalg::{op_norm, solve_sylvester, Band, DichotomySplit};
use crate::model::{jacobian_blocks, Field, Invariant, SlowFastSystem};

/// Linear data at the origin for one `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBlocks {
    pub a: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub fx: DMatrix<f64>,
    pub fy: DMatrix<f64>,
    pub gx: DMatrix<f64>,
    pub gy: DMatrix<f64>,
}

impl LinearBlocks {
    /// Jacobian blocks of `sys` at the origin.
    pub fn at_origin(sys: &SlowFastSystem, t: f64, eps: f64) -> Result<Self> {
        let jb = jacobian_blocks(sys, &vec![0.0; sys.n_x], &vec![0.0; sys.n_y], t, eps)?;
        Ok(LinearBlocks { a: sys.a.clone(), j: sys.j.clone(), fx: jb.fx, fy: jb.fy, gx: jb.gx, gy: jb.gy })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.j.nrows()
    }

    /// `A_f = A + D_xf`.
    pub fn a_f(&self) -> DMatrix<f64> {
        &self.a + &self.fx
    }

    /// The full matrix `𝒜_ε`.
    pub fn full_matrix(&self, eps: f64) -> DMatrix<f64> {
        let (nx, ny) = (self.n_x(), self.n_y());
        let mut m = DMatrix::zeros(nx + ny, nx + ny);
        m.view_mut((0, 0), (nx, nx)).copy_from(&self.a_f());
        m.view_mut((0, nx), (nx, ny)).copy_from(&self.fy);
        m.view_mut((nx, 0), (ny, nx)).copy_from(&self.gx);
        m.view_mut((nx, nx), (ny, ny)).copy_from(&(&self.j / eps + &self.gy));
        m
    }

    /// Residual of the `L1` equation.
    pub fn residual_l1(&self, l1: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
        (&self.j + &self.gy * eps) * l1 - l1 * (self.a_f() + &self.fy * l1) * eps + &self.gx * eps
    }

    /// Residual of the `L2` equation.
    pub fn residual_l2(&self, l2: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
        l2 * (&self.gx * l2 * eps + &self.j + &self.gy * eps) - self.a_f() * l2 * eps - &self.fy * eps
    }

    fn scale(&self, eps: f64) -> f64 {
        let blocks = op_norm(&self.a_f()) + op_norm(&self.fy) + op_norm(&self.gx) + op_norm(&self.gy);
        (op_norm(&self.j) + eps * blocks).max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockDiagMethod {
    Newton,
    Dichotomy,
}

/// Quantities of the sufficient contraction condition
/// `1/|ω_s| + 1/|ω_u| + 2ε|J⁻¹| < 1/(5·K·C0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionMargin {
    pub omega_s: f64,
    pub omega_u: f64,
    pub k: f64,
    pub c0: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`; positive when the condition holds.
    pub margin: f64,
}

/// Whether a failed sufficient condition aborts the solve or is only reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum CertificateMode {
    #[default]
    Report,
    Enforce,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockDiagResult {
    #[serde(serialize_with = "ser_matrix")]
    pub l1: DMatrix<f64>,
    #[serde(serialize_with = "ser_matrix")]
    pub l2: DMatrix<f64>,
    pub residual_l1: f64,
    pub residual_l2: f64,
    /// Norm of the off-diagonal blocks of the conjugated `𝒜_ε`.
    pub off_diagonal: f64,
    pub iterations: usize,
    /// Residual history of the Newton route (max over both equations).
    pub residual_history: Vec<f64>,
    /// Observed order `log(r_{k+1}/r_k) / log(r_k/r_{k−1})` of the last three
    /// residuals above round-off, when available.
    pub convergence_order: Option<f64>,
    /// `‖L1‖ = |L1 P_u| + |L1 P_c| + |L1 P_s|` (dichotomy route).
    pub l1_band_norm: Option<f64>,
    pub margin: Option<ContractionMargin>,
    pub method: BlockDiagMethod,
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        let row: Vec<f64> = m.row(r).iter().cloned().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(NespError::Parameter(format!("eps must be non-negative, got {eps}")));
    }
    Ok(())
}

fn observed_order(hist: &[f64], floor: f64) -> Option<f64> {
    let h: Vec<f64> = hist.iter().cloned().filter(|r| *r > floor).collect();
    if h.len() < 3 {
        return None;
    }
    let n = h.len();
    let (a, b, c) = (h[n - 3], h[n - 2], h[n - 1]);
    Some((c / b).ln() / (b / a).ln())
}

/// Newton iteration seeded at `(0, 0)`; each step solves
/// `(J + εD_yg − εL1 D_yf)δ − δ·ε(A_f + D_yf L1) = −R1` and the mirror equation for `L2`.
pub fn solve_l_newton(b: &LinearBlocks, eps: f64) -> Result<BlockDiagResult> {
    check_eps(eps)?;
    let (nx, ny) = (b.n_x(), b.n_y());
    let mut l1 = DMatrix::zeros(ny, nx);
    let mut l2 = DMatrix::zeros(nx, ny);
    let scale = b.scale(eps);
    let tol = 1e-14 * scale;
    let a_f = b.a_f();
    let mut hist = Vec::new();
    let mut iterations = 0;
    for it in 0..50 {
        let r1 = b.residual_l1(&l1, eps);
        let r2 = b.residual_l2(&l2, eps);
        let r = r1.amax().max(r2.amax());
        hist.push(r);
        if !r.is_finite() || r > 1e8 * scale {
            return Err(NespError::NoConvergence(format!(
                "Newton diverged for eps = {eps} (residual {r:.3e}); try the dichotomy method or a smaller eps"
            )));
        }
        if r <= tol || (it > 3 && r >= 0.5 * hist[it - 1]) {
            break;
        }
        let p1 = &b.j + &b.gy * eps - &l1 * &b.fy * eps;
        let q1 = (&a_f + &b.fy * &l1) * eps;
        l1 -= solve_sylvester(&p1, &q1, &r1)?;
        let p2 = (&a_f - &l2 * &b.gx) * eps;
        let q2 = &b.j + &b.gy * eps + &b.gx * &l2 * eps;
        l2 += solve_sylvester(&p2, &q2, &r2)?;
        iterations = it + 1;
    }
    let last = *hist.last().unwrap();
    if last > 1e-10 * scale {
        return Err(NespError::NoConvergence(format!(
            "Newton stalled at residual {last:.3e} for eps = {eps}; try the dichotomy method or a smaller eps"
        )));
    }
    Ok(BlockDiagResult {
        residual_l1: b.residual_l1(&l1, eps).amax(),
        residual_l2: b.residual_l2(&l2, eps).amax(),
        off_diagonal: off_diagonal(b, &l1, &l2, eps)?,
        iterations,
        convergence_order: observed_order(&hist, 1e3 * tol),
        residual_history: hist,
        l1_band_norm: None,
        margin: None,
        method: BlockDiagMethod::Newton,
        l1,
        l2,
    })
}

/// Contraction quantities for the band-wise fixed-point maps.
pub fn contraction_margin(split: &DichotomySplit, b: &LinearBlocks, eps: f64) -> Result<ContractionMargin> {
    let (v_c, w_c) = split.parts(Band::C);
    let a_c = if v_c.ncols() > 0 { op_norm(&(w_c * &split.a_f * v_c)) } else { 0.0 };
    let c0 = a_c.max(op_norm(&b.fy)).max(op_norm(&b.gx)).max(op_norm(&b.gy));
    let j_inv = b.j.clone().try_inverse().ok_or_else(|| NespError::Model("J is singular".into()))?;
    let omega_s = split.gaps.a1;
    let omega_u = split.gaps.a2p;
    let mut lhs = 2.0 * eps * op_norm(&j_inv);
    if split.dim_s() > 0 {
        lhs += 1.0 / omega_s.abs();
    }
    if split.dim_u() > 0 {
        lhs += 1.0 / omega_u.abs();
    }
    let rhs = if c0 > 0.0 { 1.0 / (5.0 * split.k * c0) } else { f64::INFINITY };
    Ok(ContractionMargin { omega_s, omega_u, k: split.k, c0, lhs, rhs, margin: rhs - lhs })
}

/// Picard iteration of the band-wise maps. On the stable and unstable bands the
/// update is the Sylvester solve `J X − X(εΛ) = ε(L D_yf X − D_xg V − D_yg X)`,
/// on the center band `X = ε(J + εD_yg)⁻¹(L D_yf X − D_xg V + XΛ)`; `L2` mirrors this.
///
/// `split` must be the dichotomy of `A + D_xf` at the same `ε`.
pub fn solve_l_dichotomy(
    split: &DichotomySplit,
    b: &LinearBlocks,
    eps: f64,
    mode: CertificateMode,
) -> Result<BlockDiagResult> {
    check_eps(eps)?;
    let (nx, ny) = (b.n_x(), b.n_y());
    if split.n() != nx || (&split.a_f - b.a_f()).amax() > 1e-9 * b.a_f().amax().max(1.0) {
        return Err(NespError::Dimension("split does not belong to A + D_xf".into()));
    }
    let margin = contraction_margin(split, b, eps)?;
    if mode == CertificateMode::Enforce && margin.margin <= 0.0 {
        return Err(NespError::NoContraction(format!(
            "1/|w_s| + 1/|w_u| + 2 eps |J^-1| = {:.4e} >= 1/(5 K C0) = {:.4e} (w_s = {}, w_u = {}, K = {:.3}, C0 = {:.3})",
            margin.lhs, margin.rhs, margin.omega_s, margin.omega_u, margin.k, margin.c0
        )));
    }
    let j_eg = &b.j + &b.gy * eps;
    let j_eg_inv = j_eg
        .clone()
        .try_inverse()
        .ok_or_else(|| NespError::Singular("J + eps D_yg is singular".into()))?;
    let bands: Vec<(Band, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = [Band::S, Band::C, Band::U]
        .into_iter()
        .filter_map(|band| {
            let (v, w) = split.parts(band);
            (v.ncols() > 0).then(|| (band, v.clone(), w.clone(), w * &split.a_f * v))
        })
        .collect();
    let scale = b.scale(eps);
    let step_tol = 1e-13;
    let max_iter = 500;

    let mut l1 = DMatrix::zeros(ny, nx);
    let mut it1 = 0;
    loop {
        let mut next = DMatrix::zeros(ny, nx);
        for (band, v, w, lam) in &bands {
            let x = &l1 * v;
            let rhs = (&l1 * &b.fy * &x - &b.gx * v - &b.gy * &x) * eps;
            let xn = match band {
                Band::C => (&j_eg_inv * (&l1 * &b.fy * &x - &b.gx * v + &x * lam)) * eps,
                _ => solve_sylvester(&b.j, &(lam * eps), &rhs)?,
            };
            next += xn * w;
        }
        let step = (&next - &l1).amax();
        l1 = next;
        it1 += 1;
        if step <= step_tol {
            break;
        }
        if !step.is_finite() || step > 1e6 * scale || it1 >= max_iter {
            return Err(NespError::NoContraction(format!(
                "L1 iteration failed after {it1} steps (last step {step:.3e}); margin {:.3e}",
                margin.margin
            )));
        }
    }

    let mut l2 = DMatrix::zeros(nx, ny);
    let mut it2 = 0;
    loop {
        let mut next = DMatrix::zeros(nx, ny);
        for (band, v, w, lam) in &bands {
            let x = w * &l2;
            let xn = match band {
                Band::C => ((w * &b.fy - &x * &b.gx * &l2 + lam * &x) * &j_eg_inv) * eps,
                _ => {
                    let c = (w * &b.fy - &x * &b.gx * &l2 - &x * &b.gy) * eps;
                    solve_sylvester(&(lam * eps), &b.j, &(-c))?
                }
            };
            next += v * xn;
        }
        let step = (&next - &l2).amax();
        l2 = next;
        it2 += 1;
        if step <= step_tol {
            break;
        }
        if !step.is_finite() || step > 1e6 * scale || it2 >= max_iter {
            return Err(NespError::NoContraction(format!(
                "L2 iteration failed after {it2} steps (last step {step:.3e}); margin {:.3e}",
                margin.margin
            )));
        }
    }

    let band_norm = bands.iter().map(|(_, v, w, _)| op_norm(&(&l1 * v * w))).sum();
    Ok(BlockDiagResult {
        residual_l1: b.residual_l1(&l1, eps).amax(),
        residual_l2: b.residual_l2(&l2, eps).amax(),
        off_diagonal: off_diagonal(b, &l1, &l2, eps)?,
        iterations: it1.max(it2),
        residual_history: Vec::new(),
        convergence_order: None,
        l1_band_norm: Some(band_norm),
        margin: Some(margin),
        method: BlockDiagMethod::Dichotomy,
        l1,
        l2,
    })
}

/// Off-diagonal defect; `𝒜_ε` is undefined at `ε = 0`, where the maps vanish.
fn off_diagonal(b: &LinearBlocks, l1: &DMatrix<f64>, l2: &DMatrix<f64>, eps: f64) -> Result<f64> {
    if eps == 0.0 {
        return Ok(0.0);
    }
    Ok(apply_similarity(b, l1, l2, eps)?.off_diagonal)
}

/// Result of conjugating `𝒜_ε` by `T = [[I, L2], [L1, I]]`.
#[derive(Debug, Clone)]
pub struct Similarity {
    pub conjugated: DMatrix<f64>,
    /// `A + D_xf + D_yf L1`.
    pub slow_block: DMatrix<f64>,
    /// `J/ε + D_yg + D_xg L2`.
    pub fast_block: DMatrix<f64>,
    pub off_diagonal: f64,
}

/// `T = [[I, L2], [L1, I]]`.
pub fn coupling_factor(l1: &DMatrix<f64>, l2: &DMatrix<f64>) -> DMatrix<f64> {
    let (ny, nx) = (l1.nrows(), l1.ncols());
    let mut t = DMatrix::identity(nx + ny, nx + ny);
    t.view_mut((0, nx), (nx, ny)).copy_from(l2);
    t.view_mut((nx, 0), (ny, nx)).copy_from(l1);
    t
}

pub fn apply_similarity(b: &LinearBlocks, l1: &DMatrix<f64>, l2: &DMatrix<f64>, eps: f64) -> Result<Similarity> {
    let (nx, ny) = (b.n_x(), b.n_y());
    if !(eps > 0.0) {
        return Err(NespError::Parameter("the similarity needs eps > 0".into()));
    }
    if op_norm(l1) * op_norm(l2) >= 1.0 {
        return Err(NespError::Singular("coupling factor may be singular: |L1||L2| >= 1".into()));
    }
    let t = coupling_factor(l1, l2);
    let t_inv = t.clone().try_inverse().ok_or_else(|| NespError::Singular("coupling factor is singular".into()))?;
    let conjugated = &t_inv * b.full_matrix(eps) * &t;
    let off = conjugated.view((0, nx), (nx, ny)).amax().max(conjugated.view((nx, 0), (ny, nx)).amax());
    Ok(Similarity {
        slow_block: b.a_f() + &b.fy * l1,
        fast_block: &b.j / eps + &b.gy + &b.gx * l2,
        off_diagonal: if nx == 0 || ny == 0 { 0.0 } else { off },
        conjugated,
    })
}

/// Per-`ε` coupling data for [`transformed_system`].
pub type CouplingFn = dyn Fn(f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> + Send + Sync;

struct Coupling {
    l1: DMatrix<f64>,
    l2: DMatrix<f64>,
    t_inv: DMatrix<f64>,
    /// `[[0, A L2 − L2 J/ε], [J L1/ε − L1 A, 0]]`.
    c: DMatrix<f64>,
    identity: bool,
}

struct CouplingCache {
    provider: Arc<CouplingFn>,
    a: DMatrix<f64>,
    j: DMatrix<f64>,
    entries: Mutex<Vec<(u64, Arc<Coupling>)>>,
}

impl CouplingCache {
    fn get(&self, eps: f64) -> Result<Arc<Coupling>> {
        let key = eps.to_bits();
        if let Some(c) = self.entries.lock().unwrap().iter().find(|e| e.0 == key) {
            return Ok(c.1.clone());
        }
        let (l1, l2) = (self.provider)(eps)?;
        let (nx, ny) = (self.a.nrows(), self.j.nrows());
        if l1.shape() != (ny, nx) || l2.shape() != (nx, ny) {
            return Err(NespError::Dimension("coupling maps have the wrong shape".into()));
        }
        let identity = l1.amax() == 0.0 && l2.amax() == 0.0;
        let mut c = DMatrix::zeros(nx + ny, nx + ny);
        if !identity {
            if !(eps > 0.0) {
                return Err(NespError::Model("nonzero coupling at eps = 0".into()));
            }
            c.view_mut((0, nx), (nx, ny)).copy_from(&(&self.a * &l2 - &l2 * &self.j / eps));
            c.view_mut((nx, 0), (ny, nx)).copy_from(&(&self.j * &l1 / eps - &l1 * &self.a));
        }
        let t_inv = coupling_factor(&l1, &l2)
            .try_inverse()
            .ok_or_else(|| NespError::Singular("coupling factor is singular".into()))?;
        let entry = Arc::new(Coupling { l1, l2, t_inv, c, identity });
        let mut entries = self.entries.lock().unwrap();
        if entries.len() >= 4096 {
            entries.clear();
        }
        entries.push((key, entry.clone()));
        Ok(entry)
    }
}

/// Maps `(x̂, ŷ)` to `(x, y) = (x̂ + L2ŷ, L1x̂ + ŷ)`.
fn lift(cp: &Coupling, xh: &[f64], yh: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let xv = DVector::from_column_slice(xh) + &cp.l2 * DVector::from_column_slice(yh);
    let yv = &cp.l1 * DVector::from_column_slice(xh) + DVector::from_column_slice(yh);
    (xv.as_slice().to_vec(), yv.as_slice().to_vec())
}

/// Rewrites `sys` in the variables `ẑ = T⁻¹z`, keeping `A` and `J`:
/// the new nonlinearities are `T⁻¹(Cẑ + N(Tẑ))` with `N = (f, g)`.
///
/// `coupling(ε)` must return `(0, 0)` at `ε = 0`; results are cached per `ε`.
pub fn transformed_system(sys: &SlowFastSystem, name: &str, coupling: Arc<CouplingFn>) -> SlowFastSystem {
    let cache = Arc::new(CouplingCache {
        provider: coupling,
        a: sys.a.clone(),
        j: sys.j.clone(),
        entries: Mutex::new(Vec::new()),
    });
    let (nx, ny) = (sys.n_x, sys.n_y);

    let full = {
        let sys = sys.clone();
        let cache = cache.clone();
        move |xh: &[f64], yh: &[f64], t: f64, eps: f64| -> Result<(Arc<Coupling>, DVector<f64>)> {
            let cp = cache.get(eps)?;
            let (x, y) = lift(&cp, xh, yh);
            let mut w = DVector::zeros(nx + ny);
            sys.eval_f(&x, &y, t, eps, &mut w.as_mut_slice()[..nx])?;
            sys.eval_g(&x, &y, t, eps, &mut w.as_mut_slice()[nx..])?;
            if cp.identity {
                return Ok((cp, w));
            }
            let mut zh = DVector::zeros(nx + ny);
            zh.as_mut_slice()[..nx].copy_from_slice(xh);
            zh.as_mut_slice()[nx..].copy_from_slice(yh);
            w += &cp.c * zh;
            Ok((cp.clone(), &cp.t_inv * w))
        }
    };
    let full = Arc::new(full);

    let f = {
        let full = full.clone();
        let sys = sys.clone();
        let cache = cache.clone();
        Field::new(move |xh, yh, t, eps, out| {
            let cp = cache.get(eps)?;
            if cp.l2.amax() == 0.0 {
                // T⁻¹ keeps the slow block when L2 = 0.
                let (x, y) = lift(&cp, xh, yh);
                return sys.eval_f(&x, &y, t, eps, out);
            }
            let (_, w) = full(xh, yh, t, eps)?;
            out.copy_from_slice(&w.as_slice()[..nx]);
            Ok(())
        })
    };
    let g = Field::new(move |xh, yh, t, eps, out| {
        let (_, w) = full(xh, yh, t, eps)?;
        out.copy_from_slice(&w.as_slice()[nx..]);
        Ok(())
    });
    let mut out = SlowFastSystem::new(name, sys.a.clone(), sys.j.clone(), f, g)
        .expect("dimensions are inherited from a valid system")
        .with_flags(sys.flags)
        .with_hints(sys.hints);
    if let Some(inv) = &sys.invariant {
        let h = inv.h.clone();
        let cache = cache.clone();
        out = out.with_invariant(Invariant::new(move |xh, yh, eps| {
            let cp = cache.get(eps)?;
            let (x, y) = lift(&cp, xh, yh);
            h(&x, &y, eps)
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{expm, spectral_dichotomy, Gaps};
    use crate::quadrature::{integrate, QuadConfig};
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rot(n: usize) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(n, n);
        for k in 0..n / 2 {
            let w = 1.0 + k as f64;
            j[(2 * k, 2 * k + 1)] = w;
            j[(2 * k + 1, 2 * k)] = -w;
        }
        j
    }

    fn random_blocks(nx: usize, ny: usize, seed: u64) -> LinearBlocks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let mut a = m(nx, nx);
        // Keep A_f hyperbolic with well separated bands.
        for i in 0..nx {
            a[(i, i)] += if i % 2 == 0 { -3.0 } else { 3.0 };
        }
        LinearBlocks { a, j: rot(ny), fx: m(nx, nx) * 0.1, fy: m(nx, ny), gx: m(ny, nx), gy: m(ny, ny) }
    }

    #[test]
    fn zero_eps_gives_zero_maps() {
        let b = random_blocks(3, 2, 1);
        let r = solve_l_newton(&b, 0.0).unwrap();
        assert_eq!(r.l1.amax(), 0.0);
        assert_eq!(r.l2.amax(), 0.0);
    }

    #[test]
    fn newton_on_random_system() {
        let b = random_blocks(4, 2, 7);
        let eps = 1e-3;
        let r = solve_l_newton(&b, eps).unwrap();
        assert!(r.residual_l1 <= 1e-12 && r.residual_l2 <= 1e-12, "{} {}", r.residual_l1, r.residual_l2);
        assert!(r.off_diagonal <= 1e-10, "{}", r.off_diagonal);
    }

    #[test]
    fn similarity_preserves_spectrum() {
        let b = random_blocks(3, 2, 3);
        let eps = 1e-2;
        let r = solve_l_newton(&b, eps).unwrap();
        let s = apply_similarity(&b, &r.l1, &r.l2, eps).unwrap();
        let mut e1: Vec<_> = b.full_matrix(eps).complex_eigenvalues().iter().cloned().collect();
        let mut e2: Vec<_> = s.conjugated.complex_eigenvalues().iter().cloned().collect();
        let key = |z: &nalgebra::Complex<f64>| (z.re * 1e6).round() as i64 * 1_000_000_000 + (z.im * 1e6).round() as i64;
        e1.sort_by_key(key);
        e2.sort_by_key(key);
        for (a, b) in e1.iter().zip(e2.iter()) {
            assert!((a - b).norm() < 1e-9, "{a} vs {b}");
        }
        // Block-diagonal parts carry the spectrum separately.
        let ident = apply_similarity(&b, &DMatrix::zeros(2, 3), &DMatrix::zeros(3, 2), eps).unwrap();
        assert_eq!(ident.conjugated, b.full_matrix(eps));
    }

    #[test]
    fn methods_agree_and_scale_linearly() {
        let b = random_blocks(3, 2, 11);
        let split = spectral_dichotomy(&b.a_f(), Gaps::auto(&b.a_f()).unwrap()).unwrap();
        let mut norms = Vec::new();
        for &eps in &[1e-2, 1e-3] {
            let n = solve_l_newton(&b, eps).unwrap();
            let d = solve_l_dichotomy(&split, &b, eps, CertificateMode::Report).unwrap();
            assert!((&n.l1 - &d.l1).amax() < 1e-10 && (&n.l2 - &d.l2).amax() < 1e-10);
            assert!(d.residual_l1 < 1e-12 && d.residual_l2 < 1e-12);
            norms.push(n.l1.norm());
        }
        let slope = (norms[0] / norms[1]).log10();
        assert!(slope > 0.9, "slope {slope}");
    }

    #[test]
    fn decoupled_blocks_give_zero() {
        let mut b = random_blocks(2, 2, 5);
        b.gx.fill(0.0);
        b.fy.fill(0.0);
        let split = spectral_dichotomy(&b.a_f(), Gaps::auto(&b.a_f()).unwrap()).unwrap();
        let d = solve_l_dichotomy(&split, &b, 1e-2, CertificateMode::Report).unwrap();
        assert_eq!(d.l1.amax() + d.l2.amax(), 0.0);
    }

    #[test]
    fn enforce_mode_reports_violation() {
        let b = random_blocks(2, 2, 5);
        let split = spectral_dichotomy(&b.a_f(), Gaps::auto(&b.a_f()).unwrap()).unwrap();
        let m = contraction_margin(&split, &b, 1e-2).unwrap();
        let r = solve_l_dichotomy(&split, &b, 1e-2, CertificateMode::Enforce);
        assert_eq!(r.is_err(), m.margin <= 0.0);
    }

    #[test]
    fn sylvester_equals_oscillatory_integral() {
        // X = ∫_{∞}^{0} e^{tJ} C e^{−εtA} dt for an unstable 2x2 A on a 2-dimensional fast block.
        let j = rot(2);
        let a = dmatrix![1.0, 0.3; 0.0, 2.0];
        let eps = 0.5;
        let c = dmatrix![1.0, -0.5; 0.25, 2.0];
        let x = solve_sylvester(&j, &(&a * eps), &c).unwrap();
        let cfg = QuadConfig { abs_tol: 1e-12, rel_tol: 1e-12, max_intervals: 4000 };
        for r in 0..2 {
            for col in 0..2 {
                let v = integrate(
                    |t| Ok((expm(&j, t).unwrap() * &c * expm(&a, -eps * t).unwrap())[(r, col)]),
                    0.0,
                    80.0,
                    &cfg,
                )
                .unwrap()
                .value;
                assert!((x[(r, col)] + v).abs() < 1e-9, "{} vs {}", x[(r, col)], -v);
            }
        }
    }

    #[test]
    fn transformed_linear_system_is_block_diagonal() {
        // For a linear system the wrapped fields at the solved coupling are exactly
        // the block-diagonal linearization minus (A, J/ε).
        let b = random_blocks(2, 2, 9);
        let bb = b.clone();
        let f = Field::new(move |x, y, _, _, o| {
            let v = &bb.fx * DVector::from_column_slice(x) + &bb.fy * DVector::from_column_slice(y);
            o.copy_from_slice(v.as_slice());
            Ok(())
        });
        let bb = b.clone();
        let g = Field::new(move |x, y, _, _, o| {
            let v = &bb.gx * DVector::from_column_slice(x) + &bb.gy * DVector::from_column_slice(y);
            o.copy_from_slice(v.as_slice());
            Ok(())
        });
        let sys = SlowFastSystem::new("lin", b.a.clone(), b.j.clone(), f, g).unwrap();
        let bb = b.clone();
        let tr = transformed_system(
            &sys,
            "lin-t",
            Arc::new(move |eps| {
                if eps == 0.0 {
                    return Ok((DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)));
                }
                let r = solve_l_newton(&bb, eps)?;
                Ok((r.l1, r.l2))
            }),
        );
        let eps = 1e-2;
        let lb = LinearBlocks::at_origin(&tr, 0.0, eps).unwrap();
        assert!(lb.fy.amax() < 1e-8 && lb.gx.amax() < 1e-8, "{} {}", lb.fy.amax(), lb.gx.amax());
    }
}
