//! Hot kernels: expression evaluation, the Lawson integrator, one Lyapunov-Perron
//! solve, one Melnikov value and the Newton block diagonalization.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::DMatrix;
use nesp_core::diagonalize::{solve_l_newton, LinearBlocks};
use nesp_core::integrate::{integrate_full, IntegratorOptions};
use nesp_core::manifold::{default_split, solve_cu_graph, LpConfig};
use nesp_core::melnikov::{homoclinic_closed_form, melnikov_value, MelnikovConfig};
use nesp_core::sysdsl::{parse_expr, Env};
use nesp_core::systems::{pendulum_separatrix, DissipativePendulum, ForcedPendulum, Forcing};

fn expression(c: &mut Criterion) {
    let e = parse_expr("-0.1*x2 + sin(x1)*cos(t) + 0.5*y1^2 - exp(-eps*x1)").unwrap();
    let (x, y) = ([0.3, -0.2], [0.1, 0.05]);
    c.bench_function("expr_eval", |b| b.iter(|| e.eval(&Env::new(black_box(&x), black_box(&y), 1.0, 1e-2)).unwrap()));
}

fn integrator(c: &mut Criterion) {
    let sys = DissipativePendulum::default().build().unwrap();
    let opts = IntegratorOptions::default();
    c.bench_function("integrate_full_pendulum_T1_eps1e-3", |b| {
        b.iter(|| integrate_full(&sys, black_box(&[0.1, 0.1]), &[0.0, 0.0], 0.0, 1.0, 1e-3, &opts).unwrap())
    });
}

fn lyapunov_perron(c: &mut Criterion) {
    let sys = DissipativePendulum::default().build().unwrap();
    let split = default_split(&sys).unwrap();
    let xi = (split.v_u.column(0).normalize() * 0.1).as_slice().to_vec();
    let cfg = LpConfig::default();
    let mut g = c.benchmark_group("lp");
    g.sample_size(10);
    g.bench_function("cu_graph_point_eps1e-2", |b| {
        b.iter(|| solve_cu_graph(&sys, &split, black_box(&xi), &[0.0, 0.0], 0.0, 1e-2, &cfg).unwrap())
    });
    g.finish();
}

fn melnikov(c: &mut Criterion) {
    let sys = ForcedPendulum { g: 1.0, gamma: 0.1, forcing: Forcing::expr("sin(t)", &[]).unwrap() }.build().unwrap();
    let orbit = homoclinic_closed_form(&sys, &pendulum_separatrix(1.0)).unwrap();
    let cfg = MelnikovConfig::default();
    c.bench_function("melnikov_value", |b| b.iter(|| melnikov_value(&sys, &orbit, black_box(0.7), 30.0, &cfg.quad).unwrap()));
}

fn block_diagonalization(c: &mut Criterion) {
    let a = DMatrix::from_row_slice(3, 3, &[-3.0, 0.2, 0.1, 0.3, 3.0, -0.4, 0.0, 0.5, -2.0]);
    let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let m = |r, c, s: f64| DMatrix::from_fn(r, c, |i, k| s * ((i * 7 + k * 3) % 5) as f64 / 5.0);
    let b = LinearBlocks { a, j, fx: m(3, 3, 0.1), fy: m(3, 2, 1.0), gx: m(2, 3, 1.0), gy: m(2, 2, 1.0) };
    c.bench_function("solve_l_newton_3x2", |bch| bch.iter(|| solve_l_newton(black_box(&b), 1e-2).unwrap()));
}

criterion_group!(kernels, expression, integrator, lyapunov_perron, melnikov, block_diagonalization);
criterion_main!(kernels);
