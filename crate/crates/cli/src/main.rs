//! `nisio`: run eigenpair experiments from a config file.
//!
//! Every command writes `report.json` (also echoed to stdout) plus CSV
//! sidecars into the output directory. Exit status is 0 on success, 1 for
//! invalid input and 2 when a numerical procedure fails; failures print a
//! JSON object on stderr.

// `!(x > 0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nisio::cone::fit_exponential_rate;
use nisio::eigensolver::{solve, solve_evolution_orbit, solve_max};
use nisio::matrix::{cw_lower, cw_upper, perron_shifted, NonnegOperator};
use nisio::mc::policy_sweep;
use nisio::semigroup::evolve_recorded;
use nisio::variational::{cw_bounds, cw_search, dv_check, hji_residual, CwSearchOptions, Direction, DvOptions};
use nisio::{DiscreteGenerator, EigenPair, EvolveOptions, NonnegMatrix};
use serde_json::{json, Value};

use config::{parse_config, Config, ConfigError, Overrides};
use report::Report;

#[derive(Parser)]
#[command(name = "nisio", version, about = "Principal eigenpairs of risk-sensitive control semigroups")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file.
    config: PathBuf,
    /// Replace mc.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace output.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace problem.n.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestFunction {
    Ones,
    Phi,
}

#[derive(Subcommand)]
enum Cmd {
    /// Principal eigenpair (ρ, φ) and the maximizing value β.
    Solve(Common),
    /// Collatz–Wielandt bounds of Gf/f for a test function.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "ones")]
        f: TestFunction,
        /// Also tighten both bounds along this many semigroup candidates;
        /// row 0 of the output is the test function itself.
        #[arg(long, default_value_t = 0)]
        search: usize,
    },
    /// Donsker–Varadhan identity check; single-control problems only.
    Dv(Common),
    /// Residual of the log-transformed eigen equation.
    HjiCheck(Common),
    /// Monte Carlo cost under the optimal policy and every constant control.
    Simulate(Common),
    /// Orbit statistics of the normalized evolution.
    Orbit {
        #[command(flatten)]
        common: Common,
        /// Record every this many iterations.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Fit the rate only while the orbit spread stays above this.
        #[arg(long, default_value_t = 1e-9)]
        floor: f64,
        /// Also evaluate the P1 diagnostic.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Time series of ‖S_t f‖∞.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 100)]
        every: usize,
        #[arg(long, value_enum, default_value = "ones")]
        f: TestFunction,
    },
    /// Perron root and Collatz–Wielandt bounds of a nonnegative CSV matrix.
    MatrixCw {
        matrix: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] nisio::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }

    fn to_json(&self) -> Value {
        let (kind, line) = match self {
            CliError::Config(e) => (e.kind(), e.line()),
            CliError::Core(e) => (e.kind(), None),
            CliError::Io { .. } => ("IoError", None),
            CliError::Input(_) => ("InputError", None),
        };
        json!({ "error": kind, "message": self.to_string(), "line": line })
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn load(c: &Common) -> Result<Config> {
    let text = std::fs::read_to_string(&c.config).map_err(io_err(&c.config))?;
    let ov = Overrides { n: c.n, seed: c.seed, out: c.out.clone() };
    Ok(parse_config(&text, &ov)?)
}

fn solved(cfg: &Config, gen: &DiscreteGenerator) -> Result<EigenPair> {
    Ok(solve(gen, &cfg.solver, cfg.method.core())?)
}

fn test_function(which: TestFunction, cfg: &Config, gen: &DiscreteGenerator) -> Result<(Vec<f64>, &'static str)> {
    Ok(match which {
        TestFunction::Ones => (vec![1.0; gen.nodes()], "ones"),
        TestFunction::Phi => (solved(cfg, gen)?.phi.0, "phi"),
    })
}

fn cmd_solve(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let gen = cfg.generator();
    let pair = solved(&cfg, &gen)?;
    let beta = solve_max(&gen, &cfg.solver, cfg.method.core())?;
    let mut r = Report::new("solve", &cfg);
    r.set("method", pair.method.name());
    r.set("rho", pair.rho);
    r.set("beta", beta.rho);
    r.set("residual", pair.residual);
    r.set("lower", pair.lower);
    r.set("upper", pair.upper);
    r.set("iterations", pair.iterations);
    r.set("policy_histogram", pair.policy_histogram(gen.num_controls()));
    r.write_phi(&gen, &pair)?;
    r.finish()
}

fn cmd_bounds(c: &Common, which: TestFunction, search: usize) -> Result<()> {
    let cfg = load(c)?;
    let gen = cfg.generator();
    let rho = solved(&cfg, &gen)?.rho;
    let (f, label) = test_function(which, &cfg, &gen)?;
    let b = cw_bounds(&gen, &f)?;
    let mut r = Report::new("bounds", &cfg);
    r.set("f", label);
    r.set("lower", b.lower);
    r.set("upper", b.upper);
    r.set("gap", b.gap());
    r.set("rho", rho);
    r.set("contains", b.lower <= rho && rho <= b.upper);
    if search > 0 {
        let s = cw_search(&gen, &f, Direction::Both, search, &CwSearchOptions::default())?;
        let rows: Vec<Value> = s
            .best
            .iter()
            .enumerate()
            .map(|(k, b)| json!({ "candidate": k, "lower": b.lower, "upper": b.upper }))
            .collect();
        r.set("search", rows);
    }
    r.finish()
}

fn cmd_dv(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let gen = cfg.generator();
    let check = dv_check(&gen, &DvOptions { seed: cfg.mc.seed, ..DvOptions::default() })?;
    let mut r = Report::new("dv", &cfg);
    r.set("rho", check.rho);
    r.set("rhs", check.rhs);
    r.set("gap", check.gap);
    r.set("integral_r", check.integral_r);
    r.set("rate", check.rate.value);
    r.set("rate_converged", check.rate.converged);
    r.finish()
}

fn cmd_hji(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let gen = cfg.generator();
    let pair = solved(&cfg, &gen)?;
    let h = hji_residual(&gen, &pair)?;
    let mut r = Report::new("hji-check", &cfg);
    r.set("rho", pair.rho);
    r.set("residual", h.residual);
    r.set("node", h.node);
    r.set("h", h.h);
    r.set("eigen_residual", pair.residual);
    r.finish()
}

fn cmd_simulate(c: &Common) -> Result<()> {
    let cfg = load(c)?;
    let gen = cfg.generator();
    let pair = solved(&cfg, &gen)?;
    let mut labels = vec!["optimal".to_string()];
    let mut policies = vec![pair.policy.clone()];
    for v in 0..gen.num_controls() {
        labels.push(format!("constant:{v}"));
        policies.push(vec![v; gen.nodes()]);
    }
    let mc = cfg.mc.config(gen.grid(), 0);
    let est = policy_sweep(&cfg.problem, &mc, &policies)?;
    let mut r = Report::new("simulate", &cfg);
    r.set("rho", pair.rho);
    r.set("T", est[0].horizon);
    r.set("dt_sim", mc.dt);
    r.set("N", mc.paths);
    r.set("seed", mc.seed);
    r.set("x0", mc.x0.clone());
    let rows: Vec<Value> = labels
        .iter()
        .zip(&est)
        .map(|(l, e)| json!({ "policy": l, "value": e.value, "stderr": e.stderr, "n_effective": e.n_effective }))
        .collect();
    r.set("estimates", rows);
    r.write_csv(
        "sweep.csv",
        &["policy", "value", "stderr", "n_effective"],
        labels
            .iter()
            .zip(&est)
            .map(|(l, e)| vec![l.clone(), e.value.to_string(), e.stderr.to_string(), e.n_effective.to_string()]),
    )?;
    r.finish()
}

fn cmd_orbit(c: &Common, stride: usize, floor: f64, diagnostics: bool) -> Result<()> {
    let cfg = load(c)?;
    let gen = cfg.generator();
    if stride == 0 {
        return Err(CliError::Input("--stride must be at least 1".into()));
    }
    let opts = nisio::SolveOptions { record_stride: stride, diagnostics, ..cfg.solver.clone() };
    let (pair, stats) = solve_evolution_orbit(&gen, &opts)?;
    let fit = fit_exponential_rate(&stats.above_floor(floor)).ok();
    let (under, over) = stats.bracket_violation();
    let mut r = Report::new("orbit", &cfg);
    r.set("rho", pair.rho);
    r.set("iterations", pair.iterations);
    r.set("records", stats.records.len());
    r.set(
        "fit",
        fit.map(|f| json!({ "theta": f.theta, "r2": f.r2, "contracting": f.contracting, "samples": f.samples })),
    );
    r.set("bracket_violation", json!({ "under_alpha_drop": under, "over_alpha_rise": over }));
    r.set("zeta1", stats.zeta1);
    r.set("p2_holds", stats.p2_holds);
    r.set("p1_min", stats.p1_min);
    r.write_csv(
        "orbit.csv",
        &["iteration", "under_alpha", "over_alpha", "eta", "growth_estimate", "sup_norm"],
        stats.records.iter().map(|k| {
            vec![
                k.iteration.to_string(),
                k.under_alpha.to_string(),
                k.over_alpha.to_string(),
                k.eta.to_string(),
                k.growth_estimate.to_string(),
                k.sup_norm.to_string(),
            ]
        }),
    )?;
    r.finish()
}

fn cmd_evolve(c: &Common, t: f64, every: usize, which: TestFunction) -> Result<()> {
    let cfg = load(c)?;
    let gen = cfg.generator();
    let (f, label) = test_function(which, &cfg, &gen)?;
    let dt = cfg.solver.dt_factor * gen.dt_max();
    let opts = EvolveOptions { dt, t_final: t, record_every: every };
    let (steps, dt_eff) = opts.schedule()?;
    let (out, records) = evolve_recorded(&gen, &f, &opts)?;
    let last = records.last().expect("endpoints are always recorded");
    let mut r = Report::new("evolve", &cfg);
    r.set("f", label);
    r.set("t_final", t);
    r.set("dt", dt_eff);
    r.set("steps", steps);
    r.set("sup_norm", out.sup_norm());
    r.set("log_growth", last.log_growth);
    r.set("records", records.len());
    r.write_csv(
        "evolve.csv",
        &["step", "t", "sup_norm", "log_growth"],
        records
            .iter()
            .map(|k| vec![k.step.to_string(), k.t.to_string(), k.sup_norm.to_string(), k.log_growth.to_string()]),
    )?;
    r.finish()
}

fn read_matrix(path: &Path) -> Result<NonnegMatrix> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| CliError::Input(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(NonnegMatrix::from_rows(&rows)?)
}

fn cmd_matrix_cw(path: &Path, out: &Path) -> Result<()> {
    let m = read_matrix(path)?;
    let n = m.dim();
    let p = perron_shifted(&m, 1e-14, 10_000_000)?;
    let ones = vec![1.0; n];
    let mut r = Report::bare("matrix-cw", out);
    r.set("n", n);
    r.set("lambda", p.lambda);
    r.set("lower", p.lower);
    r.set("vector", p.vector.clone());
    r.set("iterations", p.iterations);
    r.set("ones", json!({ "lower": cw_lower(&m, &ones)?, "upper": cw_upper(&m, &ones)? }));
    r.finish()
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("NISIO_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Input(format!("NISIO_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.cmd {
        Cmd::Solve(c) => cmd_solve(c),
        Cmd::Bounds { common, f, search } => cmd_bounds(common, *f, *search),
        Cmd::Dv(c) => cmd_dv(c),
        Cmd::HjiCheck(c) => cmd_hji(c),
        Cmd::Simulate(c) => cmd_simulate(c),
        Cmd::Orbit { common, stride, floor, diagnostics } => cmd_orbit(common, *stride, *floor, *diagnostics),
        Cmd::Evolve { common, t, every, f } => cmd_evolve(common, *t, *every, *f),
        Cmd::MatrixCw { matrix, out } => cmd_matrix_cw(matrix, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
