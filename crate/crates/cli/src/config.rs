//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! section.key = value        # bare token
//! section.key = "a + b"      # quoted string, may contain spaces and '#'
//! ```
//!
//! Every key is checked against a fixed table; unknown or repeated keys are
//! errors anchored at their line. The problem is fully validated, including
//! sampling the coefficients on the grid, before any command runs.

use std::collections::HashMap;
use std::path::PathBuf;

use nisio::generator::DEFAULT_EPS_A;
use nisio::mc::McConfig;
use nisio::{build_generator, DiscreteGenerator, Grid, ProblemSpec, Sense, SolveOptions, Topology};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}{key}: {message}", at_line(*.line))]
    Invalid { line: Option<usize>, key: String, message: String },
}

fn at_line(line: Option<usize>) -> String {
    line.map_or_else(String::new, |l| format!("line {l}: "))
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Parse { line, .. } => Some(*line),
            ConfigError::Invalid { line, .. } => *line,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::Parse { .. } => "ParseError",
            ConfigError::Invalid { .. } => "ValidationError",
        }
    }
}

const KEYS: &[&str] = &[
    "problem.topology",
    "problem.extent",
    "problem.n",
    "problem.d",
    "problem.controls",
    "problem.sigma",
    "problem.sigma11",
    "problem.sigma12",
    "problem.sigma21",
    "problem.sigma22",
    "problem.b1",
    "problem.b2",
    "problem.r",
    "problem.sense",
    "problem.eps_a",
    "solver.method",
    "solver.dt_factor",
    "solver.tol",
    "solver.max_iters",
    "mc.T",
    "mc.dt_sim",
    "mc.N",
    "mc.seed",
    "mc.x0",
    "output.dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMethod {
    Evolution,
    PolicyIteration,
}

impl SolverMethod {
    pub fn core(self) -> nisio::eigensolver::Method {
        match self {
            SolverMethod::Evolution => nisio::eigensolver::Method::Evolution,
            SolverMethod::PolicyIteration => nisio::eigensolver::Method::PolicyIteration,
        }
    }
}

#[derive(Debug, Clone)]
pub struct McSection {
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    /// `None` selects the center of the domain.
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub problem: ProblemSpec,
    pub method: SolverMethod,
    pub solver: SolveOptions,
    pub mc: McSection,
    pub out_dir: PathBuf,
}

/// Command-line values that replace config entries.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

struct Entry {
    value: String,
    line: usize,
}

struct Table {
    entries: HashMap<String, Entry>,
}

fn strip_comment(s: &str) -> &str {
    let mut quoted = false;
    for (i, c) in s.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &s[..i],
            _ => {}
        }
    }
    s
}

fn parse_value(raw: &str, line: usize) -> Result<String, ConfigError> {
    let err = |m: &str| ConfigError::Parse { line, message: m.to_string() };
    if let Some(rest) = raw.strip_prefix('"') {
        let inner = rest.strip_suffix('"').ok_or_else(|| err("unterminated quoted value"))?;
        if inner.contains('"') {
            return Err(err("quoted value contains a stray quote"));
        }
        Ok(inner.to_string())
    } else if raw.is_empty() {
        Err(err("missing value"))
    } else if raw.contains('"') {
        Err(err("quotes must enclose the whole value"))
    } else if raw.contains(char::is_whitespace) {
        Err(err("bare values may not contain spaces; quote the value"))
    } else {
        Ok(raw.to_string())
    }
}

impl Table {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: HashMap<String, Entry> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = strip_comment(raw).trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse { line, message: "expected `section.key = value`".into() })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::Parse { line, message: format!("unknown key `{key}`") });
            }
            let value = parse_value(value.trim(), line)?;
            if let Some(prev) = entries.get(key) {
                return Err(ConfigError::Parse { line, message: format!("`{key}` already set on line {}", prev.line) });
            }
            entries.insert(key.to_string(), Entry { value, line });
        }
        Ok(Table { entries })
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.entries.get(key).map(|e| e.line)
    }

    fn invalid(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid { line: self.line(key), key: key.to_string(), message: message.into() }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.raw(key).ok_or_else(|| self.invalid(key, "required key is missing"))
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s.parse().map_err(|_| self.invalid(key, format!("cannot parse `{s}` as a number"))),
        }
    }
}

fn parse_list(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|t| t.trim().parse::<f64>().ok().filter(|x| x.is_finite())).collect()
}

/// `"a,b; c,d"`: controls separated by `;`, components by `,`.
fn parse_controls(s: &str) -> Option<Vec<Vec<f64>>> {
    s.split(';').map(parse_list).collect()
}

fn expr_error(t: &Table, key: &str, e: nisio::ExprError) -> ConfigError {
    match e {
        nisio::ExprError::Syntax { .. } | nisio::ExprError::UnknownIdentifier { .. } => {
            ConfigError::Parse { line: t.line(key).unwrap_or(0), message: format!("{key}: {e}") }
        }
        other => t.invalid(key, other.to_string()),
    }
}

/// Expression keys in the order `ProblemSpec::parse` consumes them.
fn sigma_keys(t: &Table, d: usize) -> Result<Vec<(&'static str, String)>, ConfigError> {
    if d == 1 {
        if t.raw("problem.sigma").is_some() && t.raw("problem.sigma11").is_some() {
            return Err(t.invalid("problem.sigma11", "set either problem.sigma or problem.sigma11"));
        }
        for k in ["problem.sigma12", "problem.sigma21", "problem.sigma22", "problem.b2"] {
            if t.raw(k).is_some() {
                return Err(t.invalid(k, "only valid for d = 2"));
            }
        }
        let key = if t.raw("problem.sigma11").is_some() { "problem.sigma11" } else { "problem.sigma" };
        return Ok(vec![(key, t.required(key)?.to_string())]);
    }
    if t.raw("problem.sigma").is_some() {
        return Err(t.invalid("problem.sigma", "for d = 2 use problem.sigma11 .. problem.sigma22"));
    }
    let mut out = Vec::new();
    for k in ["problem.sigma11", "problem.sigma12", "problem.sigma21", "problem.sigma22"] {
        let default = if k.ends_with("12") || k.ends_with("21") { Some("0") } else { None };
        let v = match (t.raw(k), default) {
            (Some(v), _) => v,
            (None, Some(d)) => d,
            (None, None) => t.required(k)?,
        };
        out.push((k, v.to_string()));
    }
    Ok(out)
}

fn build_problem(t: &Table, ov: &Overrides) -> Result<ProblemSpec, ConfigError> {
    let topology = match t.required("problem.topology")? {
        "torus" => Topology::Torus,
        "interval" => Topology::Interval,
        other => return Err(t.invalid("problem.topology", format!("expected torus or interval, got `{other}`"))),
    };
    let extent: f64 = t.num("problem.extent", 1.0)?;
    let d: usize = t.num("problem.d", 1)?;
    let n: usize = match ov.n {
        Some(n) => n,
        None => t.required("problem.n")?.parse().map_err(|_| t.invalid("problem.n", "expected an integer"))?,
    };
    let n_key = |m: String| match ov.n {
        Some(_) => ConfigError::Invalid { line: None, key: "--n".into(), message: m },
        None => t.invalid("problem.n", m),
    };
    if n < 8 {
        return Err(n_key(format!("n ≥ 8 required, got {n}")));
    }
    if d != 1 && d != 2 {
        return Err(t.invalid("problem.d", format!("d must be 1 or 2, got {d}")));
    }
    let grid = Grid::new(topology, d, n, extent).map_err(|e| match e {
        nisio::Error::InvalidGrid(m) if m.contains("extent") => t.invalid("problem.extent", m),
        nisio::Error::InvalidGrid(m) if m.contains("n ≥") => n_key(m),
        other => t.invalid("problem.d", other.to_string()),
    })?;

    let controls = match t.raw("problem.controls") {
        None => vec![vec![0.0]],
        Some(s) => {
            parse_controls(s).ok_or_else(|| t.invalid("problem.controls", "expected numbers like \"-1, 0; 1, 0\""))?
        }
    };
    let sigma = sigma_keys(t, d)?;
    let drift: Vec<(&str, String)> =
        ["problem.b1", "problem.b2"][..d].iter().map(|&k| (k, t.raw(k).unwrap_or("0").to_string())).collect();
    let cost = ("problem.r", t.required("problem.r")?.to_string());

    // parse one key at a time so errors name the key
    for (k, src) in sigma.iter().chain(&drift).chain(std::iter::once(&cost)) {
        nisio::parse(src).map_err(|e| expr_error(t, k, e))?;
    }
    let sigma_src: Vec<&str> = sigma.iter().map(|(_, s)| s.as_str()).collect();
    let drift_src: Vec<&str> = drift.iter().map(|(_, s)| s.as_str()).collect();
    let mut spec = ProblemSpec::parse(grid, &sigma_src, &drift_src, &cost.1, controls).map_err(|e| {
        let msg = e.to_string();
        let key = if msg.contains("sigma") {
            sigma[0].0
        } else if msg.contains("drift") {
            "problem.b1"
        } else if msg.contains("cost") {
            "problem.r"
        } else {
            "problem.controls"
        };
        t.invalid(key, msg)
    })?;
    spec.sense = match t.raw("problem.sense").unwrap_or("minimize") {
        "minimize" | "min" => Sense::Minimize,
        "maximize" | "max" => Sense::Maximize,
        other => return Err(t.invalid("problem.sense", format!("expected minimize or maximize, got `{other}`"))),
    };
    spec.eps_a = t.num("problem.eps_a", DEFAULT_EPS_A)?;
    if !(spec.eps_a > 0.0) {
        return Err(t.invalid("problem.eps_a", "must be positive"));
    }
    build_generator::<f64>(&spec).map_err(|e| {
        let key = match &e {
            nisio::Error::DegenerateDiffusion { .. } | nisio::Error::NonMonotoneStencil { .. } => sigma[0].0,
            nisio::Error::NonFiniteCoefficient { what, .. } if what.contains("drift") => "problem.b1",
            nisio::Error::NonFiniteCoefficient { what, .. } if what.contains("diffusion") => sigma[0].0,
            _ => "problem.r",
        };
        t.invalid(key, e.to_string())
    })?;
    Ok(spec)
}

fn build_solver(t: &Table) -> Result<(SolverMethod, SolveOptions), ConfigError> {
    let method = match t.raw("solver.method").unwrap_or("evolution") {
        "evolution" => SolverMethod::Evolution,
        "policy_iteration" | "policy" => SolverMethod::PolicyIteration,
        other => {
            return Err(t.invalid("solver.method", format!("expected evolution or policy_iteration, got `{other}`")))
        }
    };
    let defaults = SolveOptions::default();
    let opts = SolveOptions {
        dt_factor: t.num("solver.dt_factor", defaults.dt_factor)?,
        tol: t.num("solver.tol", defaults.tol)?,
        max_iters: t.num("solver.max_iters", defaults.max_iters)?,
        ..defaults
    };
    if !(opts.dt_factor > 0.0 && opts.dt_factor <= 1.0) {
        return Err(t.invalid("solver.dt_factor", "must lie in (0, 1]"));
    }
    if !(opts.tol > 0.0) {
        return Err(t.invalid("solver.tol", "must be positive"));
    }
    if opts.max_iters == 0 {
        return Err(t.invalid("solver.max_iters", "must be at least 1"));
    }
    Ok((method, opts))
}

fn build_mc(t: &Table, spec: &ProblemSpec, ov: &Overrides) -> Result<McSection, ConfigError> {
    let mc = McSection {
        horizon: t.num("mc.T", 20.0)?,
        dt: t.num("mc.dt_sim", 1e-3)?,
        paths: t.num("mc.N", 10_000)?,
        seed: match ov.seed {
            Some(s) => s,
            None => t.num("mc.seed", 0)?,
        },
        x0: match t.raw("mc.x0") {
            None => None,
            Some(s) => Some(parse_list(s).ok_or_else(|| t.invalid("mc.x0", "expected comma-separated numbers"))?),
        },
    };
    let cfg = mc.config(&spec.grid, 0);
    cfg.validate(spec).map_err(|e| {
        let msg = e.to_string();
        let key = if msg.contains("dt_sim") {
            "mc.dt_sim"
        } else if msg.contains("T ") {
            "mc.T"
        } else if msg.contains("N ") {
            "mc.N"
        } else {
            "mc.x0"
        };
        t.invalid(key, msg)
    })?;
    Ok(mc)
}

impl McSection {
    /// Simulation settings under a constant policy `v`.
    pub fn config(&self, grid: &Grid, v: usize) -> McConfig {
        let x0 = self.x0.clone().unwrap_or_else(|| vec![0.5 * grid.extent(); grid.dim()]);
        McConfig::constant(grid, v, self.horizon, self.dt, self.paths, self.seed, x0)
    }
}

impl Config {
    pub fn generator(&self) -> DiscreteGenerator {
        build_generator(&self.problem).expect("validated at load")
    }
}

pub fn parse_config(text: &str, ov: &Overrides) -> Result<Config, ConfigError> {
    let t = Table::parse(text)?;
    let problem = build_problem(&t, ov)?;
    let (method, solver) = build_solver(&t)?;
    let mc = build_mc(&t, &problem, ov)?;
    let out_dir = match &ov.out {
        Some(p) => p.clone(),
        None => PathBuf::from(t.raw("output.dir").unwrap_or("out")),
    };
    Ok(Config { problem, method, solver, mc, out_dir })
}
