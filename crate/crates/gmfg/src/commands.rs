//! Subcommand implementations shared by the binary and the tests.

use std::path::{Path, PathBuf};

use gmfg_core::control::MAX_QUADRATURE_DIM;
use gmfg_core::gmfg::{
    self, check_monotonicity, consistency_residual, contraction_constant, solution_distance, ContractionReport,
    FixedPointOptions, MeanFieldSolution, Method, MonotonicityReport, Prepared,
};
use gmfg_core::graphon::DEFAULT_RANK_TOL;
use gmfg_core::model::validate_assumptions;
use gmfg_core::simulate::{
    default_probes, nash_gap_experiment, simulate_population, CostEstimate, GapSummary, NashGapConfig, NashGapRow,
    PairedEstimate, Population, SimConfig,
};
use gmfg_core::{AssumptionReport, SpectralDecomposition};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{ConfigError, Loaded, MethodChoice};
use crate::csvio::{self, format_number, Table};
use crate::exec::Rayon;
use crate::manifest::RunManifest;

pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const ASSUMPTION: i32 = 2;
    pub const SOLVER: i32 = 3;
    pub const SIMULATION: i32 = 4;
}

/// Trajectory storage above which `simulate` refuses to record paths.
pub const MAX_TRAJECTORY_BYTES: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<gmfg_core::Error> for Failure {
    fn from(e: gmfg_core::Error) -> Self {
        use gmfg_core::Error::*;
        let code = match &e {
            InvalidModel(_) | Dimension(_) | OutOfRange(_) => exit::CONFIG,
            NonFinite { .. } | Blowup { .. } | Eigen(_) | Singular(_) | NotContractive { .. } | NonConvergence { .. } => {
                exit::SOLVER
            }
            DivergentCost(_) | Simulation { .. } | CostOverflow { .. } => exit::SIMULATION,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(exit::CONFIG, e.0)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(exit::CONFIG, format!("i/o: {e}"))
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::new(exit::CONFIG, format!("csv: {e}"))
    }
}

pub type Outcome<T> = Result<T, Failure>;

/// Everything a subcommand needs.
pub struct Context {
    pub loaded: Loaded,
    pub exec: Rayon,
    pub out: PathBuf,
    pub manifest: RunManifest,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Outcome<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
        std::fs::write(self.path(name), text + "\n")?;
        self.manifest.record(name);
        Ok(())
    }

    fn record(&mut self, name: &str) {
        self.manifest.record(name);
    }

    fn gamma(&self) -> f64 {
        self.loaded.spec.coefficients.risk_sensitivity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Riccati,
    State,
    Control,
    Z,
    S,
    All,
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn require_assumptions(loaded: &Loaded) -> Outcome<AssumptionReport> {
    let report = validate_assumptions(&loaded.spec);
    if !report.ok() {
        return Err(Failure::new(exit::ASSUMPTION, report.warnings.join("; ")));
    }
    Ok(report)
}

fn fixed_point_options(loaded: &Loaded, force: bool) -> FixedPointOptions {
    let s = &loaded.config.solver;
    let d = FixedPointOptions::default();
    FixedPointOptions {
        tol: s.tol.unwrap_or(d.tol),
        max_iter: s.max_iter.unwrap_or(d.max_iter),
        relaxation: s.relaxation.unwrap_or(d.relaxation),
        force: force || s.force.unwrap_or(false),
    }
}

fn rank_tol(loaded: &Loaded) -> f64 {
    loaded.config.solver.rank_tol.unwrap_or(DEFAULT_RANK_TOL)
}

struct Solved {
    solution: MeanFieldSolution,
    decomposition: Option<SpectralDecomposition>,
}

fn solve_one(ctx: &Context, p: &Prepared, method: Method, force: bool) -> Outcome<Solved> {
    match method {
        Method::FixedPoint => {
            let sol = gmfg::solve_fixed_point(p, &fixed_point_options(&ctx.loaded, force), &ctx.exec)?;
            Ok(Solved { solution: sol, decomposition: None })
        }
        Method::Spectral => {
            let dec = p.decompose(rank_tol(&ctx.loaded))?;
            let sol = gmfg::solve_spectral(p, &dec, &ctx.exec)?;
            Ok(Solved { solution: sol, decomposition: Some(dec) })
        }
    }
}

/// The configured method, or the fixed point when it is known to contract
/// and the spectral solver otherwise.
fn default_method(ctx: &Context, p: &Prepared) -> Method {
    match ctx.loaded.config.solver.method {
        Some(MethodChoice::FixedPoint) => Method::FixedPoint,
        Some(MethodChoice::Spectral) => Method::Spectral,
        Some(MethodChoice::Both) | None => {
            if contraction_constant(p).contraction_ok {
                Method::FixedPoint
            } else {
                Method::Spectral
            }
        }
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::FixedPoint => "fixed_point",
        Method::Spectral => "spectral",
    }
}

fn matrix_names(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    if rows == 1 && cols == 1 {
        return vec![prefix.to_string()];
    }
    let mut v = Vec::with_capacity(rows * cols);
    for i in 1..=rows {
        for j in 1..=cols {
            v.push(format!("{prefix}_{i}_{j}"));
        }
    }
    v
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

/// `t, Π` and, when spectral gains exist, `P⊥` and `P_λℓ` for each retained
/// eigenvalue.
fn write_riccati(path: &Path, p: &Prepared, sol: &MeanFieldSolution) -> Outcome<()> {
    let n = p.dim();
    let grid = p.grids().time;
    let mut header = vec!["t".to_string()];
    header.extend(matrix_names("Pi", n, n));
    let gains = sol.gains.as_ref();
    if let Some(g) = gains {
        header.extend(matrix_names("P_perp", n, n));
        for l in 1..=g.p_ell.len() {
            header.extend(matrix_names(&format!("P_lambda_{l}"), n, n));
        }
    }
    let mut t = Table::create(path, &header)?;
    let mut row = Vec::with_capacity(header.len());
    for k in 0..grid.nodes() {
        row.clear();
        row.push(grid.t(k));
        row.extend(row_major(p.riccati.pi.at_node(k)));
        if let Some(g) = gains {
            row.extend(row_major(g.p_perp.at_node(k)));
            for pl in &g.p_ell {
                row.extend(row_major(pl.at_node(k)));
            }
        }
        t.row(row.iter().copied())?;
    }
    t.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct CheckReport {
    ok: bool,
    assumptions: AssumptionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    contraction: Option<ContractionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spectrum: Option<SpectralDecomposition>,
    #[serde(skip_serializing_if = "Option::is_none")]
    monotonicity: Option<MonotonicityReport>,
    quadrature_dimension_limit: usize,
    warnings: Vec<String>,
}

pub fn check(ctx: &mut Context) -> Outcome<()> {
    let assumptions = validate_assumptions(&ctx.loaded.spec);
    let mut report = CheckReport {
        ok: assumptions.ok(),
        assumptions,
        contraction: None,
        spectrum: None,
        monotonicity: None,
        quadrature_dimension_limit: MAX_QUADRATURE_DIM,
        warnings: ctx.loaded.warnings.clone(),
    };
    if report.ok {
        let p = Prepared::new(&ctx.loaded.spec, &ctx.loaded.graphon)?;
        let dec = p.decompose(rank_tol(&ctx.loaded))?;
        report.contraction = Some(contraction_constant(&p));
        report.monotonicity = Some(check_monotonicity(&p, &dec));
        report.spectrum = Some(dec);
    }
    ctx.write_json("check.json", &report)?;
    emit(&serde_json::to_string_pretty(&report).expect("report serializes"));
    if !report.ok {
        return Err(Failure::new(exit::ASSUMPTION, report.assumptions.warnings.join("; ")));
    }
    Ok(())
}

#[derive(Serialize)]
struct SolveEntry {
    method: Method,
    iterations: usize,
    last_change: f64,
    consistency_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    eigenvalues: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spectral_residual: Option<f64>,
    solution_file: String,
}

#[derive(Serialize)]
struct SolveSummary {
    contraction: ContractionReport,
    solutions: Vec<SolveEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    method_difference: Option<f64>,
    warnings: Vec<String>,
}

pub fn solve(ctx: &mut Context, method: Option<MethodChoice>, force: bool) -> Outcome<()> {
    require_assumptions(&ctx.loaded)?;
    let p = Prepared::new(&ctx.loaded.spec, &ctx.loaded.graphon)?;
    let methods = match method.or(ctx.loaded.config.solver.method) {
        Some(MethodChoice::FixedPoint) => vec![Method::FixedPoint],
        Some(MethodChoice::Spectral) => vec![Method::Spectral],
        Some(MethodChoice::Both) => vec![Method::FixedPoint, Method::Spectral],
        None => vec![default_method(ctx, &p)],
    };
    let grids = p.grids();
    let mut solved = Vec::new();
    let mut entries = Vec::new();
    for m in methods {
        let s = solve_one(ctx, &p, m, force)?;
        let file = format!("solution_{}.csv", method_name(m));
        csvio::write_solution(&ctx.path(&file), &s.solution, grids.alpha, grids.time)?;
        ctx.record(&file);
        entries.push(SolveEntry {
            method: m,
            iterations: s.solution.iterations,
            last_change: s.solution.last_change,
            consistency_residual: consistency_residual(&p, &s.solution)?,
            eigenvalues: s.decomposition.as_ref().map(|d| d.eigenvalues.clone()),
            spectral_residual: s.decomposition.as_ref().map(|d| d.residual),
            solution_file: file,
        });
        solved.push(s);
    }
    let last = solved.last().expect("at least one method");
    write_riccati(&ctx.path("riccati.csv"), &p, &last.solution)?;
    ctx.record("riccati.csv");
    let method_difference = match solved.as_slice() {
        [a, b] => Some(solution_distance(&a.solution, &b.solution)),
        _ => None,
    };
    let summary = SolveSummary {
        contraction: contraction_constant(&p),
        solutions: entries,
        method_difference,
        warnings: ctx.loaded.warnings.clone(),
    };
    ctx.write_json("summary.json", &summary)?;
    emit(&serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn to_zero_based(probes: &[usize], n: usize) -> Outcome<Vec<usize>> {
    probes
        .iter()
        .map(|&a| {
            if a == 0 || a > n {
                Err(Failure::new(exit::CONFIG, format!("probe agent {a} outside 1..={n}")))
            } else {
                Ok(a - 1)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct SimulateArgs {
    pub agents: Option<usize>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub probes: Option<Vec<usize>>,
    pub trajectories: bool,
}

#[derive(Serialize)]
struct ProbeCost {
    agent: usize,
    alpha: f64,
    cost: CostEstimate,
    j_limit: f64,
    gap: f64,
    paired: PairedEstimate,
}

#[derive(Serialize)]
struct SimulateSummary {
    n_agents: usize,
    paths: usize,
    seed: u64,
    dt: f64,
    method: Method,
    probes: Vec<ProbeCost>,
    warnings: Vec<String>,
}

fn solved_population(ctx: &Context, n_agents: usize) -> Outcome<(Prepared, MeanFieldSolution, Method)> {
    require_assumptions(&ctx.loaded)?;
    let p = Prepared::new(&ctx.loaded.spec, &ctx.loaded.graphon)?;
    let method = default_method(ctx, &p);
    let s = solve_one(ctx, &p, method, false)?;
    if n_agents == 0 {
        return Err(Failure::new(exit::CONFIG, "N must be at least 1"));
    }
    Ok((p, s.solution, method))
}

pub fn simulate(ctx: &mut Context, args: &SimulateArgs) -> Outcome<()> {
    let sim = ctx.loaded.config.simulation.clone();
    let n = args.agents.or(sim.agents).unwrap_or(ctx.loaded.spec.grids.alpha.n);
    let m = args.paths.or(sim.paths).unwrap_or(1000);
    let seed = args.seed.or(sim.seed).unwrap_or(0);
    ctx.manifest.seed = Some(seed);
    ctx.manifest.write()?;
    let (p, sol, method) = solved_population(ctx, n)?;
    let weights = ctx.loaded.graphon.sample_step(n)?;
    let pop = Population::new(&p, &sol, &weights, sim.dt, &ctx.exec)?;
    if args.trajectories {
        let c = &ctx.loaded.spec.coefficients;
        let per_step = 2 * c.state_dim() + c.control_dim();
        let bytes = m.saturating_mul(n).saturating_mul(pop.steps() + 1).saturating_mul(per_step * 8);
        if bytes > MAX_TRAJECTORY_BYTES {
            return Err(Failure::new(
                exit::CONFIG,
                format!("storing trajectories needs {bytes} bytes; pass --no-trajectories or fewer paths"),
            ));
        }
    }
    let probes = match args.probes.as_ref().or(sim.probes.as_ref()) {
        Some(p) => to_zero_based(p, n)?,
        None => default_probes(n),
    };
    let cfg = SimConfig {
        paths: m,
        seed,
        dt: sim.dt,
        deviation: None,
        probes: Some(probes),
        record: args.trajectories,
        limit_shadow: true,
    };
    let run = simulate_population(&pop, &cfg, &ctx.exec)?;
    let alphas: Vec<f64> = pop.agents.iter().map(|a| a.alpha).collect();
    if let Some(paths) = &run.paths {
        csvio::write_trajectories(&ctx.path("trajectories.csv"), paths, &alphas)?;
        ctx.record("trajectories.csv");
    }
    csvio::write_exponents(&ctx.path("exponents.csv"), &run, &alphas)?;
    ctx.record("exponents.csv");

    let gamma = ctx.gamma();
    let limit = run.limit_exponents.as_ref().expect("limit shadow requested");
    let mut costs = Vec::new();
    for (k, &agent) in run.probes.iter().enumerate() {
        let cost = CostEstimate::from_exponents(gamma, &run.exponents[k])?;
        let j_limit = pop.limit_cost(agent)?;
        costs.push(ProbeCost {
            agent: agent + 1,
            alpha: alphas[agent],
            gap: (cost.mean - j_limit).abs(),
            paired: PairedEstimate::from_exponents(gamma, &run.exponents[k], &limit[k])?,
            cost,
            j_limit,
        });
    }
    let header: Vec<String> = [
        "agent",
        "alpha",
        "mean",
        "std_error",
        "log_mean",
        "median_exponent",
        "effective_paths",
        "heavy_tail",
        "j_limit",
        "paired_gap",
        "paired_std_error",
    ]
    .map(String::from)
    .to_vec();
    let mut t = Table::create(&ctx.path("costs.csv"), &header)?;
    for c in &costs {
        t.row([
            c.agent as f64,
            c.alpha,
            c.cost.mean,
            c.cost.std_error,
            c.cost.log_mean,
            c.cost.median_exponent,
            c.cost.effective_paths,
            f64::from(u8::from(c.cost.heavy_tail)),
            c.j_limit,
            c.paired.mean,
            c.paired.std_error,
        ])?;
    }
    t.finish()?;
    ctx.record("costs.csv");
    let summary = SimulateSummary {
        n_agents: n,
        paths: m,
        seed,
        dt: pop.dt(),
        method,
        probes: costs,
        warnings: ctx.loaded.warnings.clone(),
    };
    ctx.write_json("summary.json", &summary)?;
    emit(&serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct NashGapArgs {
    pub n_list: Option<Vec<usize>>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub deviate: Option<f64>,
}

#[derive(Serialize)]
struct NashGapOutput<'a> {
    paths: usize,
    seed: u64,
    method: Method,
    rows: &'a [NashGapRow],
    summaries: Vec<GapSummary>,
    observed_order: Option<f64>,
}

pub fn nash_gap(ctx: &mut Context, args: &NashGapArgs) -> Outcome<()> {
    let sim = ctx.loaded.config.simulation.clone();
    let n_list = args.n_list.clone().or(sim.n_list.clone()).unwrap_or_else(|| vec![25, 50, 100, 200]);
    let m = args.paths.or(sim.paths).unwrap_or(20_000);
    let seed = args.seed.or(sim.seed).unwrap_or(0);
    let deviate = args.deviate.or(sim.deviate);
    ctx.manifest.seed = Some(seed);
    ctx.manifest.write()?;
    let smallest = n_list.iter().copied().min().unwrap_or(0);
    let (p, sol, method) = solved_population(ctx, smallest)?;
    let probes = match &sim.probes {
        Some(pr) => Some(to_zero_based(pr, smallest)?),
        None => None,
    };
    let cfg = NashGapConfig { paths: m, seed, dt: sim.dt, probes, deviation: deviate };
    let report = nash_gap_experiment(&p, &sol, &n_list, &cfg, &ctx.exec)?;
    let header: Vec<String> = [
        "N",
        "agent",
        "alpha",
        "j_hat",
        "j_hat_std_error",
        "j_limit",
        "gap",
        "paired_gap",
        "paired_std_error",
        "eps1",
        "eps2",
        "eps3",
    ]
    .map(String::from)
    .to_vec();
    let mut t = Table::create(&ctx.path("nash_gap.csv"), &header)?;
    for r in &report.rows {
        t.row([
            r.n_agents as f64,
            r.agent as f64,
            r.alpha,
            r.j_hat.mean,
            r.j_hat.std_error,
            r.j_limit,
            r.gap,
            r.paired.mean,
            r.paired.std_error,
            r.eps1,
            r.eps2,
            r.eps3,
        ])?;
    }
    t.finish()?;
    ctx.record("nash_gap.csv");
    let out = NashGapOutput {
        paths: m,
        seed,
        method,
        rows: &report.rows,
        summaries: report.summaries(),
        observed_order: report.observed_order(),
    };
    ctx.write_json("nash_gap.json", &out)?;
    emit(&serde_json::to_string_pretty(&(&out.summaries, out.observed_order)).expect("summary serializes"));
    Ok(())
}

fn alpha_columns(alphas: &[f64], dim: usize, prefix: &str) -> Vec<String> {
    let mut cols = Vec::with_capacity(alphas.len() * dim);
    for a in alphas {
        let a = format_number(*a);
        if dim == 1 {
            cols.push(format!("{prefix}{a}"));
        } else {
            cols.extend((1..=dim).map(|c| format!("{prefix}{a}_{c}")));
        }
    }
    cols
}

/// Regenerates the figure data of the benchmark. The mean field is solved
/// with the spectral method, which also supplies the `P⊥` and `P_λ` gains.
pub fn reproduce(ctx: &mut Context, figure: Figure, seed: u64) -> Outcome<()> {
    use Figure::*;
    ctx.manifest.seed = Some(seed);
    ctx.manifest.write()?;
    require_assumptions(&ctx.loaded)?;
    let p = Prepared::new(&ctx.loaded.spec, &ctx.loaded.graphon)?;
    let s = solve_one(ctx, &p, Method::Spectral, false)?;
    let sol = &s.solution;
    let grids = p.grids();
    let n = p.dim();
    let wants = |f: Figure| figure == f || figure == All;
    if wants(Riccati) {
        write_riccati(&ctx.path("riccati.csv"), &p, sol)?;
        ctx.record("riccati.csv");
    }
    let alphas = grids.alpha.nodes();
    let grid_cols = alpha_columns(&alphas, n, "alpha_");
    if wants(Z) {
        csvio::write_wide(&ctx.path("z.csv"), grids.time, &grid_cols, |c, k| sol.z.at(c / n, k)[c % n])?;
        ctx.record("z.csv");
    }
    if wants(S) {
        csvio::write_wide(&ctx.path("s.csv"), grids.time, &grid_cols, |c, k| sol.s.at(c / n, k)[c % n])?;
        ctx.record("s.csv");
    }
    if wants(State) || wants(Control) {
        let agents = ctx.loaded.config.simulation.agents.unwrap_or(200);
        let weights = ctx.loaded.graphon.sample_step(agents)?;
        let pop = Population::new(&p, sol, &weights, None, &ctx.exec)?;
        let cfg = SimConfig { record: true, probes: Some(vec![]), ..SimConfig::new(1, seed) };
        let run = simulate_population(&pop, &cfg, &ctx.exec)?;
        let paths = run.paths.expect("recorded");
        let time = gmfg_core::TimeGrid { steps: paths.times - 1, horizon: grids.time.horizon };
        let labels: Vec<String> = (1..=agents).map(|a| format!("agent_{a}")).collect();
        let expand = |dim: usize| -> Vec<String> {
            if dim == 1 {
                labels.clone()
            } else {
                labels.iter().flat_map(|l| (1..=dim).map(move |c| format!("{l}_{c}"))).collect()
            }
        };
        if wants(State) {
            csvio::write_wide(&ctx.path("state.csv"), time, &expand(n), |c, k| paths.x(0, c / n, k)[c % n])?;
            ctx.record("state.csv");
        }
        if wants(Control) {
            let mdim = paths.control_dim;
            csvio::write_wide(&ctx.path("control.csv"), time, &expand(mdim), |c, k| {
                paths.u(0, c / mdim, k)[c % mdim]
            })?;
            ctx.record("control.csv");
        }
    }
    emit(&format!("wrote {} to {}", ctx.manifest.outputs.join(", "), ctx.out.display()));
    Ok(())
}
