//! Dense kernels: matrix exponentials and φ-functions, the exact fast rotation,
//! spectral dichotomy splitting, and Sylvester solves.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;

use crate::error::{NespError, Result};

/// Spectral (2-) norm.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().max()
}

fn is_antisymmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m + m.transpose()).amax() <= 1e-14 * m.amax().max(1.0)
}

/// `e^{tM}`. Antisymmetric inputs go through [`RotationFactor`] so the result is
/// orthogonal to round-off; everything else uses scaling and squaring with a
/// degree-(6,6) Padé approximant.
pub fn expm(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(NespError::Dimension("expm needs a square matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) || !t.is_finite() {
        return Err(NespError::Eval("expm input is not finite".into()));
    }
    if m.nrows() > 0 && is_antisymmetric(m) {
        return Ok(RotationFactor::new(m)?.matrix(t));
    }
    Ok(expm_pade(&(m * t)))
}

fn expm_pade(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let norm1 = (0..n).map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let s = if norm1 > 0.5 { (norm1 / 0.5).log2().ceil() as i32 } else { 0 };
    let a = a / 2f64.powi(s);
    const C: [f64; 7] = [
        1.0,
        0.5,
        5.0 / 44.0,
        1.0 / 66.0,
        1.0 / 792.0,
        1.0 / 15840.0,
        1.0 / 665280.0,
    ];
    let id = DMatrix::<f64>::identity(n, n);
    let mut num = &id * C[0];
    let mut den = &id * C[0];
    let mut pow = id.clone();
    for (k, c) in C.iter().enumerate().skip(1) {
        pow = &pow * &a;
        num += &pow * *c;
        den += &pow * (if k % 2 == 0 { *c } else { -*c });
    }
    let mut x = den.lu().solve(&num).expect("Padé denominator is nonsingular for |A| <= 1/2");
    for _ in 0..s {
        x = &x * &x;
    }
    x
}

/// `[e^M, φ1(M), …, φ_k(M)]` from the exponential of an augmented block matrix.
pub fn phi_matrices(m: &DMatrix<f64>, k: usize) -> Vec<DMatrix<f64>> {
    let n = m.nrows();
    let big = n * (k + 1);
    let mut aug = DMatrix::zeros(big, big);
    aug.view_mut((0, 0), (n, n)).copy_from(m);
    for b in 0..k {
        for i in 0..n {
            aug[(b * n + i, (b + 1) * n + i)] = 1.0;
        }
    }
    let e = expm_pade(&aug);
    (0..=k).map(|b| e.view((0, b * n), (n, n)).into_owned()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RotBlock {
    Pair(f64),
    Fixed,
}

/// Real Schur form `J = Q·diag(ω_k [[0,1],[-1,0]], 0…)·Qᵀ` of an antisymmetric matrix,
/// so that `e^{sJ}y` costs `O(n²)`.
#[derive(Debug, Clone)]
pub struct RotationFactor {
    q: DMatrix<f64>,
    blocks: Vec<RotBlock>,
}

impl RotationFactor {
    pub fn new(j: &DMatrix<f64>) -> Result<Self> {
        let n = j.nrows();
        if !j.is_square() || (j + j.transpose()).amax() > 1e-12 * j.amax().max(1.0) {
            return Err(NespError::Model("rotation factor needs an antisymmetric matrix".into()));
        }
        let s = j.transpose() * j;
        let eig = s.clone().symmetric_eigen();
        let scale = j.amax().max(1e-300);
        let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut blocks = Vec::new();
        let mut remaining: Vec<usize> = (0..n).collect();
        // Completed blocks span J-invariant subspaces, so the residual of any eigenvector of JᵀJ
        // stays in its eigenspace; taking the largest residual keeps degenerate clusters stable.
        while cols.len() < n && !remaining.is_empty() {
            let resid = |i: usize| {
                let mut v = eig.eigenvectors.column(i).into_owned();
                for c in &cols {
                    let p = c.dot(&v);
                    v -= c * p;
                }
                v
            };
            let (pos, v) = remaining
                .iter()
                .enumerate()
                .map(|(p, &i)| (p, resid(i)))
                .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
                .unwrap();
            remaining.swap_remove(pos);
            let nv = v.norm();
            if nv < 1e-6 {
                continue;
            }
            let v = v / nv;
            let omega = (j * &v).norm();
            // A zero frequency computed in floating point is only O(sqrt(eps_mach)) accurate.
            if omega <= 1e-7 * scale {
                cols.push(v);
                blocks.push(RotBlock::Fixed);
                continue;
            }
            let mut b = -(j * &v) / omega;
            for c in &cols {
                let p = c.dot(&b);
                b -= c * p;
            }
            b -= &v * v.dot(&b);
            b /= b.norm();
            cols.push(v);
            cols.push(b);
            blocks.push(RotBlock::Pair(omega));
        }
        if cols.len() != n {
            return Err(NespError::Model("failed to build the real Schur basis of J".into()));
        }
        let q = DMatrix::from_columns(&cols);
        Ok(RotationFactor { q, blocks })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// Rotation frequencies `ω_k` (one per 2×2 block).
    pub fn frequencies(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                RotBlock::Pair(w) => Some(*w),
                RotBlock::Fixed => None,
            })
            .collect()
    }

    /// `out = e^{sJ}·y`; `scratch` must have length `dim`.
    pub fn apply(&self, s: f64, y: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        let n = self.dim();
        // c = Qᵀ y
        for (k, c) in scratch.iter_mut().enumerate().take(n) {
            let col = self.q.column(k);
            *c = col.iter().zip(y).map(|(a, b)| a * b).sum();
        }
        let mut k = 0;
        for b in &self.blocks {
            match *b {
                RotBlock::Pair(w) => {
                    let (sn, cs) = (w * s).sin_cos();
                    let (c0, c1) = (scratch[k], scratch[k + 1]);
                    scratch[k] = cs * c0 + sn * c1;
                    scratch[k + 1] = -sn * c0 + cs * c1;
                    k += 2;
                }
                RotBlock::Fixed => k += 1,
            }
        }
        out.fill(0.0);
        for k in 0..n {
            let c = scratch[k];
            for (o, q) in out.iter_mut().zip(self.q.column(k).iter()) {
                *o += q * c;
            }
        }
    }

    pub fn matrix(&self, s: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut r = DMatrix::<f64>::identity(n, n);
        let mut k = 0;
        for b in &self.blocks {
            match *b {
                RotBlock::Pair(w) => {
                    let (sn, cs) = (w * s).sin_cos();
                    r[(k, k)] = cs;
                    r[(k, k + 1)] = sn;
                    r[(k + 1, k)] = -sn;
                    r[(k + 1, k + 1)] = cs;
                    k += 2;
                }
                RotBlock::Fixed => k += 1,
            }
        }
        &self.q * r * self.q.transpose()
    }
}

/// Spectral bands and rates `(a1, a2, a1', a2')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gaps {
    pub a1: f64,
    pub a2: f64,
    pub a1p: f64,
    pub a2p: f64,
}

impl Gaps {
    pub fn new(a1: f64, a2: f64, a1p: f64, a2p: f64) -> Result<Self> {
        if !(a1 < a2.min(0.0) && a2 <= a1p && a2p > a1p.max(0.0)) {
            return Err(NespError::Parameter(format!(
                "gaps must satisfy a1 < min(a2,0), a2 <= a1', a2' > max(0,a1'); got ({a1}, {a2}, {a1p}, {a2p})"
            )));
        }
        Ok(Gaps { a1, a2, a1p, a2p })
    }

    /// Symmetric bands around the imaginary axis fitted to the spectrum of `m`:
    /// the center band is `[-δ, δ]` and the hyperbolic edges sit at 90% of the
    /// smallest hyperbolic real part.
    pub fn auto(m: &DMatrix<f64>) -> Result<Self> {
        let ev = m.complex_eigenvalues();
        let hyp: Vec<f64> = ev.iter().map(|l| l.re.abs()).filter(|r| *r > 1e-6).collect();
        let h = hyp.iter().cloned().fold(f64::INFINITY, f64::min);
        let h = if h.is_finite() { h } else { 1.0 };
        let d = (0.05 * h).min(1e-2).max(1e-7);
        Gaps::new(-0.9 * h, -d, d, 0.9 * h)
    }
}

/// Stable/center/unstable splitting of `A_f` with measured constant `K`.
#[derive(Debug, Clone)]
pub struct DichotomySplit {
    pub a_f: DMatrix<f64>,
    pub p_s: DMatrix<f64>,
    pub p_c: DMatrix<f64>,
    pub p_u: DMatrix<f64>,
    pub gaps: Gaps,
    pub k: f64,
    /// Column bases of the invariant subspaces.
    pub v_s: DMatrix<f64>,
    pub v_c: DMatrix<f64>,
    pub v_u: DMatrix<f64>,
    /// Eigenvalues grouped by band.
    pub spec_s: Vec<Complex<f64>>,
    pub spec_c: Vec<Complex<f64>>,
    pub spec_u: Vec<Complex<f64>>,
    // Left bases (rows of V⁻¹) for exact restricted propagators.
    w_s: DMatrix<f64>,
    w_c: DMatrix<f64>,
    w_u: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    S,
    C,
    U,
}

impl DichotomySplit {
    pub fn n(&self) -> usize {
        self.a_f.nrows()
    }
    pub fn dim_s(&self) -> usize {
        self.v_s.ncols()
    }
    pub fn dim_c(&self) -> usize {
        self.v_c.ncols()
    }
    pub fn dim_u(&self) -> usize {
        self.v_u.ncols()
    }
    pub fn p_cu(&self) -> DMatrix<f64> {
        &self.p_c + &self.p_u
    }
    pub fn p_cs(&self) -> DMatrix<f64> {
        &self.p_c + &self.p_s
    }

    /// Right basis `V` (columns) and left basis `W` (rows) of a band; `P = V·W`, `W·V = I`.
    pub fn parts(&self, band: Band) -> (&DMatrix<f64>, &DMatrix<f64>) {
        match band {
            Band::S => (&self.v_s, &self.w_s),
            Band::C => (&self.v_c, &self.w_c),
            Band::U => (&self.v_u, &self.w_u),
        }
    }

    /// `e^{tA_f}P_band`, computed on the restriction so unstable round-off is not amplified.
    pub fn propagator(&self, band: Band, t: f64) -> DMatrix<f64> {
        let (v, w) = self.parts(band);
        if v.ncols() == 0 {
            return DMatrix::zeros(self.n(), self.n());
        }
        let restricted = w * &self.a_f * v;
        v * expm_pade(&(restricted * t)) * w
    }

    /// Largest dichotomy quotient over the t-grid; see [`spectral_dichotomy`].
    fn measure_k(&self) -> f64 {
        let g = self.gaps;
        let mut k: f64 = 1.0;
        let tmax = 40.0;
        let steps = 400;
        for i in 0..=steps {
            let t = tmax * i as f64 / steps as f64;
            let q_s = op_norm(&self.propagator(Band::S, t)) * (-g.a1 * t).exp();
            let q_u = op_norm(&self.propagator(Band::U, -t)) * (g.a2p * t).exp();
            let pc_f = self.propagator(Band::C, t);
            let pc_b = self.propagator(Band::C, -t);
            let q_cs = op_norm(&(&self.propagator(Band::S, t) + &pc_f)) * (-g.a1p * t).exp();
            let q_cu = op_norm(&(&self.propagator(Band::U, -t) + &pc_b)) * (g.a2 * t).exp();
            k = k.max(q_s).max(q_u).max(q_cs).max(q_cu);
        }
        k
    }
}

/// Spectral projections of `A_f` grouped by the bands `Re λ ≤ a1`,
/// `a2 ≤ Re λ ≤ a1'`, `Re λ ≥ a2'`.
pub fn spectral_dichotomy(a_f: &DMatrix<f64>, gaps: Gaps) -> Result<DichotomySplit> {
    let n = a_f.nrows();
    if !a_f.is_square() {
        return Err(NespError::Dimension("A_f must be square".into()));
    }
    let ev: Vec<Complex<f64>> = a_f.complex_eigenvalues().iter().cloned().collect();
    let band_w = 1e-8;
    let mut groups: [Vec<Complex<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for l in &ev {
        let re = l.re;
        for edge in [gaps.a1, gaps.a2, gaps.a1p, gaps.a2p] {
            if (re - edge).abs() < band_w {
                return Err(NespError::DegenerateSplitting(format!(
                    "eigenvalue {l} lies on the band edge {edge}"
                )));
            }
        }
        if re < gaps.a1 {
            groups[0].push(*l);
        } else if re > gaps.a2 && re < gaps.a1p {
            groups[1].push(*l);
        } else if re > gaps.a2p {
            groups[2].push(*l);
        } else {
            return Err(NespError::DegenerateSplitting(format!(
                "eigenvalue {l} lies in a spectral gap of ({}, {}, {}, {})",
                gaps.a1, gaps.a2, gaps.a1p, gaps.a2p
            )));
        }
    }
    let bases: Vec<DMatrix<f64>> = groups.iter().map(|g| invariant_basis(a_f, g)).collect::<Result<_>>()?;
    let v = DMatrix::from_columns(
        &bases.iter().flat_map(|b| b.column_iter().map(|c| c.into_owned())).collect::<Vec<_>>(),
    );
    let v = if n == 0 { DMatrix::zeros(0, 0) } else { v };
    let w = v
        .clone()
        .try_inverse()
        .ok_or_else(|| NespError::DegenerateSplitting("invariant subspaces are not complementary".into()))?;
    let (ds, dc) = (bases[0].ncols(), bases[1].ncols());
    let du = n - ds - dc;
    let w_s = w.rows(0, ds).into_owned();
    let w_c = w.rows(ds, dc).into_owned();
    let w_u = w.rows(ds + dc, du).into_owned();
    let p_s = &bases[0] * &w_s;
    let p_c = &bases[1] * &w_c;
    let p_u = &bases[2] * &w_u;
    let mut split = DichotomySplit {
        a_f: a_f.clone(),
        p_s,
        p_c,
        p_u,
        gaps,
        k: 1.0,
        v_s: bases[0].clone(),
        v_c: bases[1].clone(),
        v_u: bases[2].clone(),
        spec_s: groups[0].clone(),
        spec_c: groups[1].clone(),
        spec_u: groups[2].clone(),
        w_s,
        w_c,
        w_u,
    };
    split.k = split.measure_k();
    Ok(split)
}

/// Orthonormal basis of the generalized eigenspace for `group`, as the null space of
/// the real polynomial `∏ (A − λI)` over the group.
fn invariant_basis(a: &DMatrix<f64>, group: &[Complex<f64>]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let d = group.len();
    if d == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    if d == n {
        return Ok(DMatrix::identity(n, n));
    }
    let id = DMatrix::<f64>::identity(n, n);
    let mut p = id.clone();
    let scale = a.amax().max(1.0);
    let mut reals: Vec<f64> = Vec::new();
    let mut pairs: Vec<Complex<f64>> = Vec::new();
    let mut neg = 0usize;
    for l in group {
        if l.im.abs() <= 1e-9 * scale {
            reals.push(l.re);
        } else if l.im > 0.0 {
            pairs.push(*l);
        } else {
            neg += 1;
        }
    }
    if neg != pairs.len() {
        // Unpaired near-real values from a perturbed defective block.
        reals.clear();
        pairs.clear();
        for l in group {
            reals.push(l.re);
        }
    }
    for r in reals {
        p = (&a.clone() - &id * r) * p / scale;
    }
    for l in pairs {
        let q = a * a - a * (2.0 * l.re) + &id * l.norm_sqr();
        p = q * p / (scale * scale);
    }
    let svd = p.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| NespError::DegenerateSplitting("SVD failed".into()))?;
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let cols: Vec<DVector<f64>> = idx[..d].iter().map(|&i| vt.row(i).transpose()).collect();
    Ok(DMatrix::from_columns(&cols))
}

/// Solves `P·L − L·Q = C` through the Kronecker form.
pub fn solve_sylvester(p: &DMatrix<f64>, q: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = (p.nrows(), q.nrows());
    if !p.is_square() || !q.is_square() || c.nrows() != m || c.ncols() != n {
        return Err(NespError::Dimension("Sylvester dimensions are inconsistent".into()));
    }
    if m == 0 || n == 0 {
        return Ok(DMatrix::zeros(m, n));
    }
    let sp = p.complex_eigenvalues();
    let sq = q.complex_eigenvalues();
    let mut gap = f64::INFINITY;
    for a in sp.iter() {
        for b in sq.iter() {
            gap = gap.min((a - b).norm());
        }
    }
    if gap < 1e-8 {
        return Err(NespError::Singular(format!("spectra of P and Q overlap (gap {gap:.2e})")));
    }
    let mut k = DMatrix::zeros(m * n, m * n);
    for j in 0..n {
        for i in 0..m {
            let row = j * m + i;
            for l in 0..m {
                k[(row, j * m + l)] += p[(i, l)];
            }
            for l in 0..n {
                k[(row, l * m + i)] -= q[(l, j)];
            }
        }
    }
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| NespError::Singular("Sylvester operator is singular".into()))?;
    Ok(DMatrix::from_column_slice(m, n, sol.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_antisym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = random_matrix(n, n, rng);
        &a - a.transpose()
    }

    #[test]
    fn expm_identity_and_rotation() {
        let j = dmatrix![0.0, 1.0; -1.0, 0.0];
        assert_eq!(expm(&j, 0.0).unwrap(), DMatrix::identity(2, 2));
        let r = expm(&j, std::f64::consts::FRAC_PI_2).unwrap();
        assert!((r - &j).amax() < 1e-15);
        let m = dmatrix![1.0, 2.0; 0.0, 3.0];
        assert!((expm(&m, 0.0).unwrap() - DMatrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn expm_matches_diagonal_and_nilpotent() {
        let d = dmatrix![-1.0, 0.0; 0.0, 2.5];
        let e = expm(&d, 1.3).unwrap();
        assert!((e[(0, 0)] - (-1.3f64).exp()).abs() < 1e-14);
        assert!((e[(1, 1)] / (3.25f64).exp() - 1.0).abs() < 1e-13);
        let n = dmatrix![0.0, 1.0; 0.0, 0.0];
        let e = expm(&n, 7.0).unwrap();
        assert!((e - dmatrix![1.0, 7.0; 0.0, 1.0]).amax() < 1e-13);
    }

    #[test]
    fn phi_functions_scalar() {
        let z = -0.7;
        let ph = phi_matrices(&DMatrix::from_element(1, 1, z), 3);
        let e: f64 = z.exp();
        let p1 = (e - 1.0) / z;
        let p2 = (p1 - 1.0) / z;
        let p3 = (p2 - 0.5) / z;
        assert!((ph[0][(0, 0)] - e).abs() < 1e-15);
        assert!((ph[1][(0, 0)] - p1).abs() < 1e-15);
        assert!((ph[2][(0, 0)] - p2).abs() < 1e-14);
        assert!((ph[3][(0, 0)] - p3).abs() < 1e-13);
    }

    #[test]
    fn rotation_factor_with_degenerate_and_zero_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 3, 4, 5, 6] {
            let j = random_antisym(n, &mut rng);
            let rf = RotationFactor::new(&j).unwrap();
            let r = rf.matrix(0.37);
            assert!((&r - expm_pade(&(&j * 0.37))).amax() < 1e-12, "n = {n}");
        }
        let j = dmatrix![0.0, 1.0, 0.0, 0.0; -1.0, 0.0, 0.0, 0.0; 0.0, 0.0, 0.0, 1.0; 0.0, 0.0, -1.0, 0.0];
        let rf = RotationFactor::new(&j).unwrap();
        assert!((rf.matrix(2.1) - expm_pade(&(&j * 2.1))).amax() < 1e-13);
        let mut out = [0.0; 4];
        let mut scr = [0.0; 4];
        rf.apply(2.1, &[1.0, 0.5, -0.2, 0.3], &mut out, &mut scr);
        let want = rf.matrix(2.1) * DVector::from_column_slice(&[1.0, 0.5, -0.2, 0.3]);
        assert!((DVector::from_column_slice(&out) - want).amax() < 1e-14);
    }

    #[test]
    fn dichotomy_coordinate_axes() {
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0, 0.0, 2.0]));
        let s = spectral_dichotomy(&a, Gaps::new(-0.5, -0.25, 0.25, 0.5).unwrap()).unwrap();
        let e = |i: usize| {
            let mut m = DMatrix::zeros(3, 3);
            m[(i, i)] = 1.0;
            m
        };
        assert!((&s.p_s - e(0)).amax() < 1e-12);
        assert!((&s.p_c - e(1)).amax() < 1e-12);
        assert!((&s.p_u - e(2)).amax() < 1e-12);
    }

    #[test]
    fn dichotomy_pendulum_saddle() {
        let a = dmatrix![0.0, 1.0; 1.0, 0.0];
        let s = spectral_dichotomy(&a, Gaps::auto(&a).unwrap()).unwrap();
        assert_eq!((s.dim_s(), s.dim_c(), s.dim_u()), (1, 0, 1));
        // Oracle: eigenvectors (1,-1) for -1 and (1,1) for +1.
        let vs = DVector::from_column_slice(&[1.0, -1.0]);
        assert!((&s.p_s * &vs - &vs).amax() < 1e-12);
        assert!((&s.p_u * &vs).amax() < 1e-12);
    }

    #[test]
    fn dichotomy_defective_center() {
        let a = dmatrix![0.0, 1.0; 0.0, 0.0];
        let s = spectral_dichotomy(&a, Gaps::new(-0.5, -0.25, 0.25, 0.5).unwrap()).unwrap();
        assert!((&s.p_c - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(s.k > 1.0);
    }

    #[test]
    fn dichotomy_rejects_gap_eigenvalue() {
        let a = DMatrix::from_diagonal(&DVector::from_column_slice(&[-0.3, 1.0]));
        let r = spectral_dichotomy(&a, Gaps::new(-0.5, -0.25, 0.25, 0.5).unwrap());
        assert!(matches!(r, Err(NespError::DegenerateSplitting(_))));
    }

    #[test]
    fn sylvester_examples() {
        let l = solve_sylvester(
            &DMatrix::from_element(1, 1, 2.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 3.0),
        )
        .unwrap();
        assert!((l[(0, 0)] - 3.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_matrix(4, 4, &mut rng) + DMatrix::identity(4, 4) * 5.0;
        let q = random_matrix(2, 2, &mut rng);
        let z = solve_sylvester(&p, &q, &DMatrix::zeros(4, 2)).unwrap();
        assert_eq!(z.amax(), 0.0);
        let c = random_matrix(4, 2, &mut rng);
        let l = solve_sylvester(&p, &q, &c).unwrap();
        let res = (&p * &l - &l * &q - &c).amax();
        assert!(res <= 1e-10 * (op_norm(&p) + op_norm(&q)) * op_norm(&l) + 1e-12);
        let same = solve_sylvester(&q, &q, &DMatrix::zeros(2, 2));
        assert!(matches!(same, Err(NespError::Singular(_))));
    }

    proptest! {
        #[test]
        fn semigroup_property(seed in 0u64..1000, s in -1.5f64..1.5, t in -1.5f64..1.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(4, 4, &mut rng);
            let lhs = expm(&m, s).unwrap() * expm(&m, t).unwrap();
            let rhs = expm(&m, s + t).unwrap();
            prop_assert!((lhs - &rhs).amax() <= 1e-10 * rhs.amax().max(1.0));
        }

        #[test]
        fn antisymmetric_exponential_is_orthogonal(seed in 0u64..1000, t in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = random_antisym(4, &mut rng);
            let r = expm(&j, t).unwrap();
            let err = (r.transpose() * &r - DMatrix::identity(4, 4)).amax();
            prop_assert!(err <= 1e-12);
            let y = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
            prop_assert!(((&r * &y).norm() - y.norm()).abs() <= 1e-12);
        }

        #[test]
        fn projection_algebra(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Spectrum placed in all three bands by similarity.
            let d = DMatrix::from_diagonal(&DVector::from_column_slice(&[-2.0, -1.0, 0.05, -0.05, 1.5]));
            let mut t = random_matrix(5, 5, &mut rng);
            t += DMatrix::identity(5, 5) * 3.0;
            let a = &t * d * t.clone().try_inverse().unwrap();
            let s = spectral_dichotomy(&a, Gaps::new(-0.5, -0.25, 0.25, 0.5).unwrap()).unwrap();
            let ps = [&s.p_s, &s.p_c, &s.p_u];
            let sum = ps[0] + ps[1] + ps[2];
            prop_assert!((sum - DMatrix::identity(5, 5)).amax() < 1e-10);
            for (i, p) in ps.iter().enumerate() {
                prop_assert!(((*p * *p) - *p).amax() < 1e-10);
                prop_assert!((&a * *p - *p * &a).amax() < 1e-10);
                for (j, q) in ps.iter().enumerate() {
                    if i != j {
                        prop_assert!((*p * *q).amax() < 1e-10);
                    }
                }
            }
        }
    }
}
