//! Subcommands. Each resolves its keys, prints the plan on a dry run, then computes
//! and writes its outputs. Flag `--some-key` and `[run]` key `some_key` are the same key.

use std::f64::consts::PI;

use clap::{Args, Subcommand};
use nalgebra::DMatrix;
use nesp_core::diagonalize::{solve_l_dichotomy, solve_l_newton, BlockDiagResult, CertificateMode, LinearBlocks};
use nesp_core::integrate::{integrate_full, integrate_limit, IntegratorOptions};
use nesp_core::manifold::{
    chart_directions, compute_graph, default_split, fiber_gap_study, manifold_gap_study, solve_fiber, t0_sensitivity_sweep,
    GraphAxis, LpConfig, ManifoldKind,
};
use nesp_core::melnikov::{
    conservative_connection, energy_positivity_check, homoclinic_closed_form, homoclinic_shooting, melnikov_profile,
    splitting_study, ConnectionConfig, HomoclinicOrbit, MelnikovConfig, ShootingConfig, SplittingConfig,
};
use nesp_core::quadrature::QuadConfig;
use nesp_core::slowlimit::{chain_sweep, convergence_study, default_probes, fit_loglog, Comparison, StudyConfig};
use nesp_core::systems::{catalog, export_document, BuiltinOptions};
use nesp_core::{spectral_dichotomy, validate, DichotomySplit, Gaps, SlowFastSystem};
use serde_json::json;

use crate::config::{CliError, CliResult, LoadedSystem, SystemArgs};
use crate::output::{sweeps_csv, Ctx};

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the structural assumptions of a system.
    Validate(ValidateArgs),
    /// Integrate the full, singular-limit or principal flow.
    Simulate(SimulateArgs),
    /// Compare one full orbit with its singular limit.
    Limit(LimitArgs),
    /// Convergence sweep in eps with a log-log slope.
    Converge(ConvergeArgs),
    /// Residual and invariance defect of the near-identity transform chain.
    Chain(ChainArgs),
    /// Invariant-manifold graph on a chart grid, or its eps studies.
    Manifold(ManifoldArgs),
    /// Stable fiber point, or the fiber-gap eps sweep.
    Fiber(FiberArgs),
    /// Melnikov profile along the homoclinic orbit with its simple roots.
    Melnikov(MelnikovArgs),
    /// Measured manifold splitting against eps times the Melnikov value.
    Splitting(SplittingArgs),
    /// Connection of the conservative system by energy matching.
    Connect(ConnectArgs),
    /// Block diagonalization of the linearization at the origin.
    Diagonalize(DiagonalizeArgs),
    /// List the builtin systems or export one as a document.
    Catalog(CatalogArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Simulate(_) => "simulate",
            Command::Limit(_) => "limit",
            Command::Converge(_) => "converge",
            Command::Chain(_) => "chain",
            Command::Manifold(_) => "manifold",
            Command::Fiber(_) => "fiber",
            Command::Melnikov(_) => "melnikov",
            Command::Splitting(_) => "splitting",
            Command::Connect(_) => "connect",
            Command::Diagonalize(_) => "diagonalize",
            Command::Catalog(_) => "catalog",
        }
    }

    pub fn run(self, ctx: &mut Ctx) -> CliResult<()> {
        match self {
            Command::Validate(a) => validate_cmd(ctx, a),
            Command::Simulate(a) => simulate(ctx, a),
            Command::Limit(a) => limit(ctx, a),
            Command::Converge(a) => converge(ctx, a),
            Command::Chain(a) => chain(ctx, a),
            Command::Manifold(a) => manifold(ctx, a),
            Command::Fiber(a) => fiber(ctx, a),
            Command::Melnikov(a) => melnikov(ctx, a),
            Command::Splitting(a) => splitting(ctx, a),
            Command::Connect(a) => connect(ctx, a),
            Command::Diagonalize(a) => diagonalize(ctx, a),
            Command::Catalog(a) => catalog_cmd(ctx, a),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct IntegArgs {
    /// Relative tolerance of the integrator.
    #[arg(long)]
    pub rtol: Option<f64>,
    /// Absolute tolerance of the integrator.
    #[arg(long)]
    pub atol: Option<f64>,
}

impl IntegArgs {
    fn resolve(&self, ctx: &mut Ctx, base: IntegratorOptions) -> CliResult<IntegratorOptions> {
        let rtol = ctx.cfg.get("rtol", self.rtol, base.rtol)?;
        let atol = ctx.cfg.get("atol", self.atol, base.atol)?;
        if !(rtol > 0.0 && atol > 0.0) {
            return Err(CliError::Config("rtol and atol must be positive".into()));
        }
        Ok(IntegratorOptions { rtol, atol, ..base })
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct LpArgs {
    /// Picard tolerance of the Lyapunov-Perron solves.
    #[arg(long)]
    pub lp_tol: Option<f64>,
    /// Largest step of the Lyapunov-Perron time grid.
    #[arg(long)]
    pub h_max: Option<f64>,
    /// Cap on the truncation horizon.
    #[arg(long)]
    pub t_trunc_max: Option<f64>,
    /// Cut-off radius; the system hint when absent.
    #[arg(long)]
    pub radius: Option<f64>,
}

impl LpArgs {
    fn resolve(&self, ctx: &mut Ctx) -> CliResult<LpConfig> {
        let d = LpConfig::default();
        Ok(LpConfig {
            tol: ctx.cfg.get("lp_tol", self.lp_tol, d.tol)?,
            h_max: ctx.cfg.get("h_max", self.h_max, d.h_max)?,
            t_trunc_max: ctx.cfg.get("t_trunc_max", self.t_trunc_max, d.t_trunc_max)?,
            radius: ctx.cfg.opt("radius", self.radius)?,
            ..d
        })
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct OrbitArgs {
    /// Homoclinic orbit source: auto, closed-form or shooting.
    #[arg(long)]
    pub orbit: Option<String>,
    /// Branch of the unstable manifold used by shooting, +1 or -1.
    #[arg(long, allow_negative_numbers = true)]
    pub branch: Option<f64>,
}

struct OrbitPlan {
    shooting: bool,
    branch: f64,
}

impl OrbitArgs {
    fn resolve(&self, ctx: &mut Ctx, sys: &LoadedSystem) -> CliResult<OrbitPlan> {
        let mode = ctx.cfg.get("orbit", self.orbit.clone(), "auto".to_string())?;
        let branch = ctx.cfg.get("branch", self.branch, 1.0)?;
        if branch.abs() != 1.0 {
            return Err(CliError::Config("branch must be +1 or -1".into()));
        }
        let shooting = match mode.as_str() {
            "auto" => sys.closed_form.is_none(),
            "shooting" => true,
            "closed-form" if sys.closed_form.is_some() => false,
            "closed-form" => return Err(CliError::Config(format!("{} has no closed-form homoclinic orbit", sys.label))),
            other => return Err(CliError::Config(format!("orbit must be auto, closed-form or shooting, got '{other}'"))),
        };
        Ok(OrbitPlan { shooting, branch })
    }
}

impl OrbitPlan {
    fn build(&self, sys: &LoadedSystem, split: &DichotomySplit) -> CliResult<HomoclinicOrbit> {
        Ok(match (&sys.closed_form, self.shooting) {
            (Some(c), false) => homoclinic_closed_form(&sys.system, c)?,
            _ => homoclinic_shooting(&sys.system, split, &ShootingConfig { branch: self.branch, ..Default::default() })?,
        })
    }
}

fn setup(ctx: &mut Ctx, args: &SystemArgs) -> CliResult<LoadedSystem> {
    let loaded = args.load()?;
    ctx.system = loaded.label.clone();
    ctx.inputs.extend(loaded.input.clone());
    ctx.cfg = crate::config::Resolver::new(&loaded.run);
    ctx.cfg.record("system", &args.resolved());
    Ok(loaded)
}

fn check_len(key: &str, v: &[f64], n: usize) -> CliResult<()> {
    if v.len() == n {
        Ok(())
    } else {
        Err(CliError::Config(format!("{key} needs {n} components, got {}", v.len())))
    }
}

fn single_eps(key: &str, eps: &[f64]) -> CliResult<f64> {
    match eps {
        [e] if *e >= 0.0 => Ok(*e),
        [_] => Err(CliError::Config(format!("{key} must be non-negative"))),
        _ => Err(CliError::Config(format!("{key} takes a single value here, got {}", eps.len()))),
    }
}

/// First column of `v`, normalized and scaled; `None` for an empty band.
fn scaled_column(v: &DMatrix<f64>, scale: f64) -> Option<Vec<f64>> {
    (v.ncols() > 0).then(|| (v.column(0).normalize() * scale).as_slice().to_vec())
}

fn sweep_default() -> Vec<f64> {
    vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
}

fn fmt_slope(s: Option<f64>) -> String {
    s.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Document path or builtin:NAME; alternative to --system.
    pub path: Option<String>,
    #[command(flatten)]
    pub sys: SystemArgs,
}

fn validate_cmd(ctx: &mut Ctx, a: ValidateArgs) -> CliResult<()> {
    let mut sa = a.sys.clone();
    if let Some(p) = a.path {
        if sa.system.is_some() {
            return Err(CliError::Usage("give the system either as a path or with --system".into()));
        }
        sa.system = Some(p);
    }
    let loaded = setup(ctx, &sa)?;
    if ctx.plan(&["validate.json"]) {
        return Ok(());
    }
    let report = validate(&loaded.system);
    print!("{report}");
    ctx.write_json("validate.json", &report)?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{} failed validation", loaded.label)))
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    /// Flow: full, limit (eps = 0) or principal.
    #[arg(long)]
    pub flow: Option<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub t0: Option<f64>,
    /// Final time; may precede t0.
    #[arg(long, allow_negative_numbers = true)]
    pub t1: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// Initial fast state (not rescaled by eps).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y0: Option<Vec<f64>>,
    #[command(flatten)]
    pub integ: IntegArgs,
}

fn simulate(ctx: &mut Ctx, a: SimulateArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let sys = &l.system;
    let flow = ctx.cfg.get("flow", a.flow, "full".to_string())?;
    let eps = ctx.cfg.get("eps", a.eps, 1e-2)?;
    let t0 = ctx.cfg.get("t0", a.t0, 0.0)?;
    let t1 = ctx.cfg.get("t1", a.t1, 10.0)?;
    let x0 = ctx.cfg.get("x0", a.x0, vec![0.1; sys.n_x])?;
    let y0 = ctx.cfg.get("y0", a.y0, vec![0.0; sys.n_y])?;
    let opts = a.integ.resolve(ctx, IntegratorOptions::default())?;
    check_len("x0", &x0, sys.n_x)?;
    check_len("y0", &y0, sys.n_y)?;
    if !matches!(flow.as_str(), "full" | "limit" | "principal") {
        return Err(CliError::Config(format!("flow must be full, limit or principal, got '{flow}'")));
    }
    if ctx.plan(&["simulate.csv", "simulate.json"]) {
        return Ok(());
    }
    let traj = match flow.as_str() {
        "full" => integrate_full(sys, &x0, &y0, t0, t1, eps, &opts)?,
        "limit" => integrate_limit(sys, &x0, t0, t1, 0.0, &opts)?,
        _ => integrate_limit(sys, &x0, t0, t1, eps, &opts)?,
    };
    ctx.write_csv("simulate.csv", &traj.to_csv())?;
    let summary = json!({
        "flow": flow,
        "nodes": traj.len(),
        "t_end": traj.t_end(),
        "final_state": traj.final_state(),
        "stats": traj.stats,
    });
    ctx.write_json("simulate.json", &summary)?;
    println!("{} nodes, final state {:?}", traj.len(), traj.final_state());
    Ok(())
}

#[derive(Debug, Args)]
pub struct LimitArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub t0: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    /// Initial fast state divided by eps.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y0_over_eps: Option<Vec<f64>>,
    /// Uniform samples of the window.
    #[arg(long)]
    pub samples: Option<usize>,
    #[command(flatten)]
    pub integ: IntegArgs,
}

fn limit(ctx: &mut Ctx, a: LimitArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let sys = &l.system;
    let eps = ctx.cfg.get("eps", a.eps, 1e-2)?;
    let t0 = ctx.cfg.get("t0", a.t0, 0.0)?;
    let horizon = ctx.cfg.get("horizon", a.horizon, 5.0)?;
    let x0 = ctx.cfg.get("x0", a.x0, vec![0.1; sys.n_x])?;
    let yoe = ctx.cfg.get("y0_over_eps", a.y0_over_eps, vec![0.0; sys.n_y])?;
    let samples = ctx.cfg.get("samples", a.samples, 400)?;
    let opts = a.integ.resolve(ctx, IntegratorOptions::tight())?;
    check_len("x0", &x0, sys.n_x)?;
    check_len("y0_over_eps", &yoe, sys.n_y)?;
    if !(eps > 0.0 && horizon > 0.0 && samples >= 2) {
        return Err(CliError::Config("limit needs eps > 0, horizon > 0 and samples >= 2".into()));
    }
    if ctx.plan(&["limit.csv", "limit.json"]) {
        return Ok(());
    }
    let y0: Vec<f64> = yoe.iter().map(|v| v * eps).collect();
    let t1 = t0 + horizon;
    let full = integrate_full(sys, &x0, &y0, t0, t1, eps, &opts)?;
    let lim = integrate_limit(sys, &x0, t0, t1, 0.0, &opts)?;
    let (nx, ny) = (sys.n_x, sys.n_y);
    let mut csv: Vec<String> = vec!["t".into()];
    csv.extend((1..=nx).map(|i| format!("x{i}")));
    csv.extend((1..=ny).map(|i| format!("y{i}")));
    csv.extend((1..=nx).map(|i| format!("xbar{i}")));
    csv.push("err".into());
    let mut body = csv.join(",") + "\n";
    let (mut sup, mut t_sup) = (0.0f64, t0);
    for k in 0..samples {
        let t = t0 + horizon * k as f64 / (samples - 1) as f64;
        let z = full.state_at(t)?;
        let xb = lim.state_at(t)?;
        let dx: f64 = (0..nx).map(|i| (z[i] - xb[i]).powi(2)).sum::<f64>().sqrt();
        let err = dx + z[nx..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if err > sup {
            (sup, t_sup) = (err, t);
        }
        let row: Vec<String> = std::iter::once(t).chain(z.iter().cloned()).chain(xb.iter().cloned()).chain([err]).map(|v| format!("{v:e}")).collect();
        body.push_str(&(row.join(",") + "\n"));
    }
    ctx.write_csv("limit.csv", &body)?;
    ctx.write_json("limit.json", &json!({ "eps": eps, "sup_error": sup, "argmax_t": t_sup, "norm": "|x - x0|_2 + |y|_2" }))?;
    println!("sup error {sup:.6e} at t = {t_sup:.4}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct ConvergeArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    /// Comparison: slow-limit, linearized or principal; `3.1` and `3.2` are aliases of the first two.
    #[arg(long)]
    pub thm: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    pub t0: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y0_over_eps: Option<Vec<f64>>,
    /// Tangent slow data of the linearized comparison.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub dx0: Option<Vec<f64>>,
    /// Tangent fast data of the linearized comparison.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub dy0: Option<Vec<f64>>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[command(flatten)]
    pub integ: IntegArgs,
}

fn converge(ctx: &mut Ctx, a: ConvergeArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let sys = &l.system;
    let thm = ctx.cfg.get("thm", a.thm, "slow-limit".to_string())?;
    let which = Comparison::parse(&thm).ok_or_else(|| CliError::Config(format!("unknown comparison '{thm}'")))?;
    let eps = ctx.cfg.get("eps", a.eps, sweep_default())?;
    let x0 = ctx.cfg.get("x0", a.x0, vec![0.1; sys.n_x])?;
    let mut cfg = StudyConfig::new(sys, x0, eps);
    cfg.t0 = ctx.cfg.get("t0", a.t0, cfg.t0)?;
    cfg.horizon = ctx.cfg.get("horizon", a.horizon, 5.0)?;
    cfg.y0_over_eps = ctx.cfg.get("y0_over_eps", a.y0_over_eps, cfg.y0_over_eps.clone())?;
    cfg.dx0 = ctx.cfg.get("dx0", a.dx0, cfg.dx0.clone())?;
    cfg.dy0 = ctx.cfg.get("dy0", a.dy0, cfg.dy0.clone())?;
    cfg.samples = ctx.cfg.get("samples", a.samples, cfg.samples)?;
    cfg.opts = a.integ.resolve(ctx, cfg.opts.clone())?;
    check_len("x0", &cfg.x0, sys.n_x)?;
    check_len("y0_over_eps", &cfg.y0_over_eps, sys.n_y)?;
    if ctx.plan(&["converge.csv", "converge.json"]) {
        return Ok(());
    }
    let r = convergence_study(sys, which, &cfg)?;
    ctx.write_csv("converge.csv", &r.to_csv())?;
    ctx.write_json("converge.json", &r.summary_json())?;
    println!("{} slope {}", which.label(), fmt_slope(r.slope));
    Ok(())
}

#[derive(Debug, Args)]
pub struct ChainArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    /// Number of transform pushes.
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Probe points of the invariance defect.
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[command(flatten)]
    pub integ: IntegArgs,
}

fn chain(ctx: &mut Ctx, a: ChainArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let order = ctx.cfg.get("order", a.order, 2)?;
    let eps = ctx.cfg.get("eps", a.eps, vec![4e-2, 2e-2, 1e-2, 5e-3])?;
    let probes = ctx.cfg.get("probes", a.probes, 4)?;
    let horizon = ctx.cfg.get("horizon", a.horizon, 1.0)?;
    let opts = a.integ.resolve(ctx, IntegratorOptions::tight())?;
    if ctx.plan(&["chain.csv", "chain.json"]) {
        return Ok(());
    }
    let pts = default_probes(&l.system, probes);
    let cs = chain_sweep(&l.system, order, &eps, &pts, horizon, &opts)?;
    ctx.write_csv("chain.csv", &cs.to_csv())?;
    ctx.write_json("chain.json", &cs)?;
    for k in 0..cs.defect_slopes.len() {
        println!("order {k}: defect slope {}, residual slope {}", fmt_slope(cs.defect_slopes[k]), fmt_slope(cs.residual_slopes[k]));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ManifoldArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    /// Manifold: s, u, cs, cu, c or fiber.
    #[arg(long)]
    pub kind: Option<String>,
    /// graph, gap (cu graph against its slow-only version) or t0 (t0 sensitivity).
    #[arg(long)]
    pub study: Option<String>,
    /// One value for a graph, several for a study.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    pub t0: Option<f64>,
    /// Half-width of every chart axis.
    #[arg(long)]
    pub half_width: Option<f64>,
    /// Nodes per chart axis.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Chart point of the studies; 0.1 times the unstable eigenvector by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub xi: Option<Vec<f64>>,
    /// Fast chart coordinate divided by eps for the t0 study.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y_over_eps: Option<Vec<f64>>,
    #[command(flatten)]
    pub lp: LpArgs,
}

fn manifold(ctx: &mut Ctx, a: ManifoldArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let sys = &l.system;
    let split = default_split(sys)?;
    let study = ctx.cfg.get("study", a.study, "graph".to_string())?;
    let t0 = ctx.cfg.get("t0", a.t0, 0.0)?;
    let cfg = a.lp.resolve(ctx)?;
    match study.as_str() {
        "graph" => {
            let kind_s = ctx.cfg.get("kind", a.kind, "cu".to_string())?;
            let kind = ManifoldKind::parse(&kind_s).ok_or_else(|| CliError::Config(format!("unknown manifold kind '{kind_s}'")))?;
            let eps = single_eps("eps", &ctx.cfg.get("eps", a.eps, vec![1e-2])?)?;
            let hw = ctx.cfg.get("half_width", a.half_width, 0.1)?;
            let nodes = ctx.cfg.get("nodes", a.nodes, 5)?;
            let axes: Vec<GraphAxis> =
                chart_directions(sys, &split, kind).into_iter().map(|(label, d)| GraphAxis::uniform(&label, d, hw, nodes)).collect();
            ctx.cfg.record("axes", &axes.iter().map(|a| a.label.clone()).collect::<Vec<_>>());
            if ctx.plan(&["manifold.csv", "manifold.json"]) {
                return Ok(());
            }
            let g = compute_graph(sys, &split, kind, axes, t0, eps, &cfg)?;
            ctx.write_csv("manifold.csv", &g.to_csv())?;
            ctx.write_json("manifold.json", &g.report_json())?;
            println!("{} graph: {} nodes", kind.name(), g.values.len());
        }
        "gap" | "t0" => {
            let eps = ctx.cfg.get("eps", a.eps, sweep_default())?;
            let default_xi = scaled_column(&split.v_u, 0.1).unwrap_or_else(|| vec![0.0; sys.n_x]);
            let xi = ctx.cfg.get("xi", a.xi, default_xi)?;
            check_len("xi", &xi, sys.n_x)?;
            let yoe = if study == "t0" { ctx.cfg.get("y_over_eps", a.y_over_eps, vec![0.0; sys.n_y])? } else { Vec::new() };
            if ctx.plan(&["manifold.csv", "manifold.json"]) {
                return Ok(());
            }
            if study == "gap" {
                let g = manifold_gap_study(sys, &split, &xi, t0, &eps, &cfg)?;
                ctx.write_csv("manifold.csv", &sweeps_csv(&[&g.value, &g.d_cu, &g.d_y]))?;
                ctx.write_json("manifold.json", &json!({ "value": g.value.summary_json(), "d_cu": g.d_cu.summary_json(), "d_y": g.d_y.summary_json() }))?;
                println!(
                    "gap slopes: value {}, d_cu {}, d_y {}",
                    fmt_slope(g.value.slope),
                    fmt_slope(g.d_cu.slope),
                    fmt_slope(g.d_y.slope)
                );
            } else {
                let r = t0_sensitivity_sweep(sys, &split, &xi, &yoe, t0, &eps, &cfg)?;
                ctx.write_csv("manifold.csv", &sweeps_csv(&[&r]))?;
                ctx.write_json("manifold.json", &r.summary_json())?;
                println!("t0-sensitivity slope {} flags {:?}", fmt_slope(r.slope), r.flags);
            }
        }
        other => return Err(CliError::Config(format!("study must be graph, gap or t0, got '{other}'"))),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct FiberArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    /// point or gap.
    #[arg(long)]
    pub study: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long, allow_negative_numbers = true)]
    pub t0: Option<f64>,
    /// Stable chart coordinate; 0.1 times the stable eigenvector by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub xi_s: Option<Vec<f64>>,
    /// Center chart coordinate of the base point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub xi_c: Option<Vec<f64>>,
    /// Fast chart coordinate of the base point.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub xi_y: Option<Vec<f64>>,
    /// Solve the fiber of the slow-only system.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub slow_only: Option<bool>,
    #[command(flatten)]
    pub lp: LpArgs,
}

fn fiber(ctx: &mut Ctx, a: FiberArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let sys = &l.system;
    let split = default_split(sys)?;
    let study = ctx.cfg.get("study", a.study, "point".to_string())?;
    let t0 = ctx.cfg.get("t0", a.t0, 0.0)?;
    let default_s = scaled_column(&split.v_s, 0.1).unwrap_or_else(|| vec![0.0; sys.n_x]);
    let xi_s = ctx.cfg.get("xi_s", a.xi_s, default_s)?;
    let xi_c = ctx.cfg.get("xi_c", a.xi_c, vec![0.0; sys.n_x])?;
    check_len("xi_s", &xi_s, sys.n_x)?;
    check_len("xi_c", &xi_c, sys.n_x)?;
    let cfg = a.lp.resolve(ctx)?;
    match study.as_str() {
        "point" => {
            let eps = single_eps("eps", &ctx.cfg.get("eps", a.eps, vec![1e-2])?)?;
            let xi_y = ctx.cfg.get("xi_y", a.xi_y, vec![0.0; sys.n_y])?;
            let slow_only = ctx.cfg.get("slow_only", a.slow_only, false)?;
            check_len("xi_y", &xi_y, sys.n_y)?;
            if ctx.plan(&["fiber.csv", "fiber.json"]) {
                return Ok(());
            }
            let f = solve_fiber(sys, &split, &xi_s, &xi_c, &xi_y, t0, eps, &cfg, slow_only)?;
            let mut body = String::from("component,base,point\n");
            for i in 0..f.point.len() {
                body.push_str(&format!("{i},{:e},{:e}\n", f.base[i], f.point[i]));
            }
            ctx.write_csv("fiber.csv", &body)?;
            ctx.write_json("fiber.json", &f)?;
            println!("|point - base| = {:.6e}", (&f.point - &f.base).norm());
        }
        "gap" => {
            let eps = ctx.cfg.get("eps", a.eps, sweep_default())?;
            if ctx.plan(&["fiber.csv", "fiber.json"]) {
                return Ok(());
            }
            let r = fiber_gap_study(sys, &split, &xi_s, &xi_c, t0, &eps, &cfg)?;
            ctx.write_csv("fiber.csv", &sweeps_csv(&[&r]))?;
            ctx.write_json("fiber.json", &r.summary_json())?;
            println!("fiber-gap slope {}", fmt_slope(r.slope));
        }
        other => return Err(CliError::Config(format!("study must be point or gap, got '{other}'"))),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct MelnikovArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    /// Number of grid intervals in t0.
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub t0_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub t0_max: Option<f64>,
    /// Absolute tolerance of the quadrature.
    #[arg(long)]
    pub abs_tol: Option<f64>,
    /// Relative tolerance of the quadrature.
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Half-width of the integration window; from the tail bound when absent.
    #[arg(long)]
    pub t_tail: Option<f64>,
    #[command(flatten)]
    pub orbit: OrbitArgs,
}

fn melnikov_config(ctx: &mut Ctx, abs_tol: Option<f64>, rel_tol: Option<f64>, t_tail: Option<f64>) -> CliResult<MelnikovConfig> {
    let d = MelnikovConfig::default();
    Ok(MelnikovConfig {
        quad: QuadConfig {
            abs_tol: ctx.cfg.get("abs_tol", abs_tol, d.quad.abs_tol)?,
            rel_tol: ctx.cfg.get("rel_tol", rel_tol, d.quad.rel_tol)?,
            ..d.quad
        },
        t_tail: ctx.cfg.opt("t_tail", t_tail)?,
        ..d
    })
}

fn melnikov(ctx: &mut Ctx, a: MelnikovArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let n = ctx.cfg.get("grid", a.grid, 64)?;
    let lo = ctx.cfg.get("t0_min", a.t0_min, 0.0)?;
    let hi = ctx.cfg.get("t0_max", a.t0_max, 2.0 * PI)?;
    let mcfg = melnikov_config(ctx, a.abs_tol, a.rel_tol, a.t_tail)?;
    let plan = a.orbit.resolve(ctx, &l)?;
    if n == 0 || !(hi > lo) {
        return Err(CliError::Config("melnikov needs grid >= 1 and t0_max > t0_min".into()));
    }
    if ctx.plan(&["melnikov.csv", "melnikov.json"]) {
        return Ok(());
    }
    let split = default_split(&l.system)?;
    let orbit = plan.build(&l, &split)?;
    let grid: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let p = melnikov_profile(&l.system, &orbit, &grid, &mcfg)?;
    ctx.write_csv("melnikov.csv", &p.to_csv())?;
    let summary = json!({
        "roots": p.roots,
        "t_tail": p.t_tail,
        "tail_bound": p.tail_bound,
        "max_abs_m": p.m.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        "orbit": { "source": orbit.source, "x0": orbit.x0.as_slice(), "rates": orbit.rates },
    });
    ctx.write_json("melnikov.json", &summary)?;
    if p.roots.is_empty() {
        println!("no sign change on [{lo}, {hi}]");
    }
    for r in &p.roots {
        println!("root t0 = {:.6}, M' = {:.6e}{}", r.t0, r.slope, if r.simple { "" } else { " (not simple)" });
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SplittingArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    #[arg(long, allow_negative_numbers = true)]
    pub t0: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Residual tolerance of the matching solves.
    #[arg(long)]
    pub newton_tol: Option<f64>,
    #[arg(long)]
    pub max_newton: Option<usize>,
    /// Launch time on the center-stable side.
    #[arg(long)]
    pub t1: Option<f64>,
    /// Launch time on the unstable side (negative).
    #[arg(long, allow_negative_numbers = true)]
    pub t2: Option<f64>,
    #[arg(long)]
    pub abs_tol: Option<f64>,
    #[command(flatten)]
    pub lp: LpArgs,
    #[command(flatten)]
    pub integ: IntegArgs,
    #[command(flatten)]
    pub orbit: OrbitArgs,
}

fn splitting_config(ctx: &mut Ctx, a: &SplittingArgs) -> CliResult<SplittingConfig> {
    let d = SplittingConfig::default();
    Ok(SplittingConfig {
        lp: a.lp.resolve(ctx)?,
        integrator: a.integ.resolve(ctx, d.integrator.clone())?,
        newton_tol: ctx.cfg.get("newton_tol", a.newton_tol, d.newton_tol)?,
        max_newton: ctx.cfg.get("max_newton", a.max_newton, d.max_newton)?,
        t1: ctx.cfg.opt("t1", a.t1)?,
        t2: ctx.cfg.opt("t2", a.t2)?,
        ..d
    })
}

fn splitting(ctx: &mut Ctx, a: SplittingArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let t0 = ctx.cfg.get("t0", a.t0, 1.0)?;
    let eps = ctx.cfg.get("eps", a.eps.clone(), vec![1e-2, 3e-3, 1e-3])?;
    let cfg = splitting_config(ctx, &a)?;
    let mcfg = melnikov_config(ctx, a.abs_tol, None, None)?;
    let plan = a.orbit.resolve(ctx, &l)?;
    if ctx.plan(&["splitting.csv", "splitting.json"]) {
        return Ok(());
    }
    let split = default_split(&l.system)?;
    let orbit = plan.build(&l, &split)?;
    let st = splitting_study(&l.system, &split, &orbit, t0, &eps, &cfg, &mcfg)?;
    ctx.write_csv("splitting.csv", &st.to_csv())?;
    ctx.write_json("splitting.json", &st)?;
    for r in &st.rows {
        println!("eps {:.1e}: ratio {:.6}{}", r.eps, r.ratio, if r.suspect { " (suspect)" } else { "" });
    }
    println!("C = {:.4}, deviation exponent {}", st.c_fit, fmt_slope(st.deviation_exponent));
    Ok(())
}

#[derive(Debug, Args)]
pub struct ConnectArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Subintervals of the bracket scan in tau.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Tolerance on |h(tau0)|.
    #[arg(long)]
    pub h_tol: Option<f64>,
    /// Forward horizon of the tube check.
    #[arg(long)]
    pub tube_horizon: Option<f64>,
    /// Half-width of the chart box of the energy check.
    #[arg(long)]
    pub energy_box: Option<f64>,
    /// Samples per axis of the energy check.
    #[arg(long)]
    pub energy_samples: Option<usize>,
    #[command(flatten)]
    pub lp: LpArgs,
    #[command(flatten)]
    pub integ: IntegArgs,
    #[command(flatten)]
    pub orbit: OrbitArgs,
}

fn connect(ctx: &mut Ctx, a: ConnectArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let d = ConnectionConfig::default();
    let eps = ctx.cfg.get("eps", a.eps, 1e-2)?;
    let lp = a.lp.resolve(ctx)?;
    let splitting = SplittingConfig { integrator: a.integ.resolve(ctx, d.splitting.integrator.clone())?, lp: lp.clone(), ..d.splitting.clone() };
    let cfg = ConnectionConfig {
        h_tol: ctx.cfg.get("h_tol", a.h_tol, d.h_tol)?,
        grid: ctx.cfg.get("grid", a.grid, d.grid)?,
        tube_horizon: ctx.cfg.get("tube_horizon", a.tube_horizon, d.tube_horizon)?,
        splitting,
    };
    let b = ctx.cfg.get("energy_box", a.energy_box, 0.1)?;
    let per_axis = ctx.cfg.get("energy_samples", a.energy_samples, 5)?;
    let plan = a.orbit.resolve(ctx, &l)?;
    if ctx.plan(&["connect.csv", "connect.json"]) {
        return Ok(());
    }
    let split = default_split(&l.system)?;
    let orbit = plan.build(&l, &split)?;
    let c = conservative_connection(&l.system, &split, &orbit, eps, &cfg)?;
    let energy = energy_positivity_check(&l.system, &split, eps, b, per_axis, &lp)?;
    ctx.write_csv("connect.csv", &c.orbit.to_csv())?;
    ctx.write_json("connect.json", &json!({ "connection": c, "energy": energy }))?;
    println!(
        "tau0 = {:.6}, |h(tau0)| = {:.3e}, |P - x0|/eps = {:.4}, tube {} (ratio {:.3}), energy {} (min ratio {:.4})",
        c.tau0,
        c.h_tau0.abs(),
        c.c_prime,
        if c.tube.passed { "ok" } else { "left" },
        c.tube.max_ratio,
        if energy.passed { "positive" } else { "not positive" },
        energy.min_ratio
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct DiagonalizeArgs {
    #[command(flatten)]
    pub sys: SystemArgs,
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Time at which the linear blocks are taken.
    #[arg(long, allow_negative_numbers = true)]
    pub t: Option<f64>,
    /// report or enforce the sufficient contraction condition.
    #[arg(long)]
    pub certificate: Option<String>,
}

fn diag_row(eps: f64, r: &BlockDiagResult) -> String {
    format!(
        "{eps:e},{:?},{:e},{:e},{:e},{:e},{:e},{}\n",
        r.method,
        r.residual_l1,
        r.residual_l2,
        r.off_diagonal,
        r.l1.norm(),
        r.l2.norm(),
        r.iterations
    )
}

fn diagonalize(ctx: &mut Ctx, a: DiagonalizeArgs) -> CliResult<()> {
    let l = setup(ctx, &a.sys)?;
    let sys: &SlowFastSystem = &l.system;
    let eps = ctx.cfg.get("eps", a.eps, vec![1e-2, 3e-3, 1e-3])?;
    let t = ctx.cfg.get("t", a.t, 0.0)?;
    let mode = match ctx.cfg.get("certificate", a.certificate, "report".to_string())?.as_str() {
        "report" => CertificateMode::Report,
        "enforce" => CertificateMode::Enforce,
        other => return Err(CliError::Config(format!("certificate must be report or enforce, got '{other}'"))),
    };
    if ctx.plan(&["diagonalize.csv", "diagonalize.json"]) {
        return Ok(());
    }
    let mut body = String::from("eps,method,residual_l1,residual_l2,off_diagonal,l1_norm,l2_norm,iterations\n");
    let mut rows = Vec::new();
    let mut norms = Vec::new();
    for &e in &eps {
        let b = LinearBlocks::at_origin(sys, t, e)?;
        let a_f = b.a_f();
        let gaps = match sys.hints.gaps {
            Some((a1, a2, a1p, a2p)) => Gaps::new(a1, a2, a1p, a2p)?,
            None => Gaps::auto(&a_f)?,
        };
        let split = spectral_dichotomy(&a_f, gaps)?;
        let n = solve_l_newton(&b, e)?;
        let d = solve_l_dichotomy(&split, &b, e, mode)?;
        body.push_str(&diag_row(e, &n));
        body.push_str(&diag_row(e, &d));
        let agreement = (&n.l1 - &d.l1).amax().max((&n.l2 - &d.l2).amax());
        norms.push(n.l1.norm());
        println!("eps {e:.1e}: residual {:.2e}, off-diagonal {:.2e}, methods agree to {agreement:.2e}", n.residual_l1.max(n.residual_l2), n.off_diagonal);
        rows.push(json!({ "eps": e, "newton": n, "dichotomy": d, "agreement": agreement }));
    }
    let slope = fit_loglog(&eps, &norms).map(|f| f.0);
    ctx.write_csv("diagonalize.csv", &body)?;
    ctx.write_json("diagonalize.json", &json!({ "rows": rows, "l1_slope": slope }))?;
    println!("|L1| slope {}", fmt_slope(slope));
    Ok(())
}

#[derive(Debug, Args)]
pub struct CatalogArgs {
    /// Export this entry as a system document.
    #[arg(long)]
    pub export: Option<String>,
    /// Parameter override `name=value` of the exported entry; repeatable.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    pub params: Vec<String>,
    /// Expression override `key=source` of the exported entry; repeatable.
    #[arg(long = "expr", value_name = "KEY=SOURCE")]
    pub exprs: Vec<String>,
}

fn catalog_cmd(ctx: &mut Ctx, a: CatalogArgs) -> CliResult<()> {
    ctx.system = "catalog".into();
    ctx.cfg.record("export", &a.export);
    let Some(name) = a.export else {
        if ctx.plan(&["catalog.json"]) {
            return Ok(());
        }
        for e in catalog() {
            let params: Vec<String> = e.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
            println!("{:<32} {}", e.name, e.summary);
            if !params.is_empty() || !e.expressions.is_empty() {
                println!("{:<32} params: {}; expressions: {}", "", params.join(" "), e.expressions.join(" "));
            }
        }
        return ctx.write_json("catalog.json", &catalog()).map(|_| ());
    };
    let sa = SystemArgs { system: Some(format!("builtin:{name}")), params: a.params, exprs: a.exprs, ..Default::default() };
    ctx.cfg.record("system", &sa.resolved());
    let (params, expressions) = sa.overrides()?;
    let opts = BuiltinOptions { params, expressions };
    let file = format!("{name}.sys");
    if ctx.plan(&[&file]) {
        return Ok(());
    }
    let text = export_document(&name, &opts)?;
    ctx.write_text(&file, &text)?;
    print!("{text}");
    Ok(())
}
