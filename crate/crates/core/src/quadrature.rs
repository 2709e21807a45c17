//! Adaptive Gauss–Kronrod (7, 15) quadrature on finite intervals.

use crate::error::{NespError, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
/// Gauss weights for the nodes `XGK[1], XGK[3], XGK[5], XGK[7]`.
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    /// Sum of the per-interval |K15 − G7| estimates.
    pub error: f64,
    pub evaluations: usize,
    pub intervals: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct QuadConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadConfig {
    fn default() -> Self {
        QuadConfig { abs_tol: 1e-10, rel_tol: 1e-10, max_intervals: 2000 }
    }
}

/// One G7K15 panel: (Kronrod value, |Kronrod − Gauss|).
pub fn gk15<F>(f: &mut F, a: f64, b: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c)?;
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let d = h * XGK[i];
        let s = f(c - d)? + f(c + d)?;
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    let (k, g) = (k * h, g * h);
    if !k.is_finite() {
        return Err(NespError::Eval(format!("non-finite integrand on [{a}, {b}]")));
    }
    Ok((k, (k - g).abs()))
}

/// Globally adaptive bisection driven by the largest local error estimate.
pub fn integrate<F>(mut f: F, a: f64, b: f64, cfg: &QuadConfig) -> Result<QuadResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    if a == b {
        return Ok(QuadResult { value: 0.0, error: 0.0, evaluations: 0, intervals: 0 });
    }
    let mut panels: Vec<(f64, f64, f64, f64)> = Vec::new();
    let (v, e) = gk15(&mut f, a, b)?;
    panels.push((a, b, v, e));
    let mut evals = 15;
    loop {
        let value: f64 = panels.iter().map(|p| p.2).sum();
        let error: f64 = panels.iter().map(|p| p.3).sum();
        if error <= cfg.abs_tol.max(cfg.rel_tol * value.abs()) {
            return Ok(QuadResult { value, error, evaluations: evals, intervals: panels.len() });
        }
        if panels.len() >= cfg.max_intervals {
            return Err(NespError::NoConvergence(format!(
                "quadrature error {error:.3e} above tolerance after {} panels",
                panels.len()
            )));
        }
        let worst = panels.iter().enumerate().max_by(|x, y| x.1 .3.total_cmp(&y.1 .3)).unwrap().0;
        let (pa, pb, _, _) = panels.swap_remove(worst);
        let m = 0.5 * (pa + pb);
        if m <= pa.min(pb) || m >= pa.max(pb) {
            return Err(NespError::NoConvergence("quadrature panel below resolution".into()));
        }
        let (v1, e1) = gk15(&mut f, pa, m)?;
        let (v2, e2) = gk15(&mut f, m, pb)?;
        evals += 30;
        panels.push((pa, m, v1, e1));
        panels.push((m, pb, v2, e2));
    }
}

/// Fixed composite G7K15 on `n` equal panels; returns (value, summed error estimate).
pub fn composite<F>(mut f: F, a: f64, b: f64, n: usize) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let h = (b - a) / n as f64;
    let mut v = 0.0;
    let mut e = 0.0;
    for i in 0..n {
        let (pv, pe) = gk15(&mut f, a + i as f64 * h, a + (i + 1) as f64 * h)?;
        v += pv;
        e += pe;
    }
    Ok((v, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn polynomials_exact_to_degree_22() {
        // K15 integrates degree ≤ 22 exactly.
        let (v, _) = gk15(&mut |x: f64| Ok(x.powi(22)), -1.0, 1.0).unwrap();
        assert!((v - 2.0 / 23.0).abs() < 1e-15);
        let (v, _) = gk15(&mut |x: f64| Ok(3.0 * x * x - x), 0.0, 2.0).unwrap();
        assert!((v - 6.0).abs() < 1e-14);
    }

    #[test]
    fn adaptive_sech_integrals() {
        let cfg = QuadConfig { abs_tol: 1e-13, rel_tol: 1e-13, max_intervals: 500 };
        // ∫ 4 sech² = 8 on the real line.
        let r = integrate(|t: f64| Ok(4.0 / t.cosh().powi(2)), -40.0, 40.0, &cfg).unwrap();
        assert!((r.value - 8.0).abs() < 1e-11);
        // ∫ 2 sech t cos t = 2π sech(π/2).
        let r = integrate(|t: f64| Ok(2.0 * t.cos() / t.cosh()), -40.0, 40.0, &cfg).unwrap();
        assert!((r.value - 2.0 * PI / (PI / 2.0).cosh()).abs() < 1e-11);
    }

    #[test]
    fn reversed_interval_changes_sign() {
        let cfg = QuadConfig::default();
        let a = integrate(|t: f64| Ok(t.exp()), 0.0, 1.0, &cfg).unwrap().value;
        let b = integrate(|t: f64| Ok(t.exp()), 1.0, 0.0, &cfg).unwrap().value;
        assert!((a + b).abs() < 1e-14 && (a - (1f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn errors_propagate() {
        let r = integrate(|t: f64| if t > 0.5 { Err(NespError::Eval("x".into())) } else { Ok(t) }, 0.0, 1.0, &QuadConfig::default());
        assert!(r.is_err());
        let r = integrate(|t: f64| Ok(1.0 / t.abs().sqrt().max(1e-300)), -1.0, 1.0, &QuadConfig { max_intervals: 20, ..Default::default() });
        assert!(matches!(r, Err(NespError::NoConvergence(_))));
    }
}
