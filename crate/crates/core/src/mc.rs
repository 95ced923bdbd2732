//! Monte Carlo estimate of the risk-sensitive cost
//! `(1/T) log E[exp ∫_0^T r(X_t, u(X_t)) dt]` under a Markov policy `u`.
//!
//! Paths follow Euler–Maruyama, mirrored back into the interval or wrapped
//! on the torus. Path `p` draws from a ChaCha8 stream selected by `p` under
//! the master seed, so results do not depend on the worker count, and
//! different policies see common random numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::generator::{CompiledProblem, Grid, ProblemSpec, Topology};

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub x0: Vec<f64>,
    /// Control index per grid node, looked up at the nearest node.
    pub policy: Vec<usize>,
}

impl McConfig {
    pub const MIN_PATHS: usize = 100;

    /// A constant policy `v` on every node of `grid`.
    pub fn constant(grid: &Grid, v: usize, horizon: f64, dt: f64, paths: usize, seed: u64, x0: Vec<f64>) -> Self {
        McConfig { horizon, dt, paths, seed, x0, policy: vec![v; grid.len()] }
    }

    pub fn with_policy(&self, policy: Vec<usize>) -> Self {
        McConfig { policy, ..self.clone() }
    }

    pub fn steps(&self) -> usize {
        ((self.horizon / self.dt).round() as usize).max(1)
    }

    pub fn validate(&self, spec: &ProblemSpec) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidOptions(m));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt_sim must be positive, got {}", self.dt));
        }
        if !(self.horizon >= 10.0 * self.dt) || !self.horizon.is_finite() {
            return bad(format!("T must be at least 10·dt_sim, got T = {}", self.horizon));
        }
        if self.paths < Self::MIN_PATHS {
            return bad(format!("N must be at least {}, got {}", Self::MIN_PATHS, self.paths));
        }
        let grid = &spec.grid;
        if self.x0.len() != grid.dim() {
            return Err(Error::DimensionMismatch { expected: grid.dim(), got: self.x0.len() });
        }
        if self.x0.iter().any(|&c| !(0.0..=grid.extent()).contains(&c)) {
            return bad(format!("x0 must lie in [0, {}]^d", grid.extent()));
        }
        if self.policy.len() != grid.len() {
            return Err(Error::DimensionMismatch { expected: grid.len(), got: self.policy.len() });
        }
        if let Some(&v) = self.policy.iter().find(|&&v| v >= spec.controls.len()) {
            return Err(Error::IndexOutOfRange { index: v, len: spec.controls.len() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    /// Delta-method standard error of `value`.
    pub stderr: f64,
    /// `(Σw)² / Σw²` for the path weights `w = exp(A − max A)`.
    pub n_effective: f64,
    pub paths: usize,
    pub horizon: f64,
    pub dt: f64,
}

#[inline]
fn reflect(mut c: f64, top: f64) -> f64 {
    loop {
        if c < 0.0 {
            c = -c;
        } else if c > top {
            c = 2.0 * top - c;
        } else {
            return c;
        }
    }
}

struct PathRunner<'a> {
    grid: &'a Grid,
    prog: CompiledProblem,
    controls: &'a [Vec<f64>],
    policy: &'a [usize],
    steps: usize,
    dt: f64,
    x0: &'a [f64],
    seed: u64,
}

impl PathRunner<'_> {
    fn run(&self, path: usize) -> Result<f64> {
        let d = self.grid.dim();
        let top = self.grid.extent();
        let sqdt = self.dt.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        let mut x = [0.0f64; 2];
        x[..d].copy_from_slice(self.x0);
        let mut b = [0.0f64; 2];
        let mut s = [0.0f64; 4];
        let mut xi = [0.0f64; 2];
        let mut acc = 0.0;
        let fail = |step: usize| Error::NonFiniteState { path, step };
        for k in 0..self.steps {
            let v = &self.controls[self.policy[self.grid.nearest_node(&x[..d])]];
            acc += self.prog.cost(&x[..d], v).map_err(|_| fail(k))? * self.dt;
            self.prog.drift(&x[..d], v, &mut b[..d]).map_err(|_| fail(k))?;
            self.prog.sigma(&x[..d], &mut s[..d * d]).map_err(|_| fail(k))?;
            for z in xi.iter_mut().take(d) {
                *z = StandardNormal.sample(&mut rng);
            }
            for i in 0..d {
                let mut noise = 0.0;
                for j in 0..d {
                    noise += s[i * d + j] * xi[j];
                }
                let c = x[i] + b[i] * self.dt + noise * sqdt;
                if !c.is_finite() {
                    return Err(fail(k));
                }
                x[i] = match self.grid.topology() {
                    Topology::Interval => reflect(c, top),
                    Topology::Torus => c.rem_euclid(top),
                };
                if !(0.0..=top).contains(&x[i]) {
                    return Err(fail(k));
                }
            }
        }
        if acc.is_finite() {
            Ok(acc)
        } else {
            Err(fail(self.steps))
        }
    }
}

/// Per-path integrals `A_p = Σ_k r(X_k, u(X_k))·dt`, in path order.
pub fn simulate_paths(spec: &ProblemSpec, cfg: &McConfig) -> Result<Vec<f64>> {
    spec.validate()?;
    cfg.validate(spec)?;
    let runner = PathRunner {
        grid: &spec.grid,
        prog: spec.compile(),
        controls: &spec.controls,
        policy: &cfg.policy,
        steps: cfg.steps(),
        dt: cfg.dt,
        x0: &cfg.x0,
        seed: cfg.seed,
    };
    (0..cfg.paths).into_par_iter().map(|p| runner.run(p)).collect()
}

/// Sum in a fixed binary-tree order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// `(1/T) log mean exp(A_p)` with its delta-method standard error.
pub fn log_mean_exp_estimate(a: &[f64], horizon: f64, dt: f64) -> McEstimate {
    let n = a.len() as f64;
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = a.iter().map(|&x| (x - m).exp()).collect();
    let sum = pairwise_sum(&w);
    let mean = sum / n;
    let sq: Vec<f64> = w.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = if a.len() > 1 { pairwise_sum(&sq) / (n - 1.0) } else { 0.0 };
    let sq2: Vec<f64> = w.iter().map(|&x| x * x).collect();
    McEstimate {
        value: (m + mean.ln()) / horizon,
        stderr: var.sqrt() / (n.sqrt() * mean * horizon),
        n_effective: sum * sum / pairwise_sum(&sq2),
        paths: a.len(),
        horizon,
        dt,
    }
}

/// Risk-sensitive cost estimate under `cfg.policy`.
pub fn simulate_cost(spec: &ProblemSpec, cfg: &McConfig) -> Result<McEstimate> {
    let a = simulate_paths(spec, cfg)?;
    let horizon = cfg.steps() as f64 * cfg.dt;
    Ok(log_mean_exp_estimate(&a, horizon, cfg.dt))
}

/// [`simulate_cost`] for each policy, with common random numbers.
pub fn policy_sweep(spec: &ProblemSpec, cfg: &McConfig, policies: &[Vec<usize>]) -> Result<Vec<McEstimate>> {
    policies.iter().map(|p| simulate_cost(spec, &cfg.with_policy(p.clone()))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(grid: Grid, sigma: &str, drift: &str, cost: &str) -> ProblemSpec {
        ProblemSpec::parse(grid, &[sigma], &[drift], cost, vec![vec![-1.0], vec![1.0]]).unwrap()
    }

    #[test]
    fn constant_cost_is_exact() {
        let s = spec(Grid::interval(16, 1.0).unwrap(), "1", "v1", "0.5");
        let cfg = McConfig::constant(&s.grid, 0, 1.0, 1.0 / 1024.0, 100, 7, vec![0.3]);
        let e = simulate_cost(&s, &cfg).unwrap();
        assert_eq!(e.value, 0.5);
        assert_eq!(e.stderr, 0.0);
        assert_eq!(e.n_effective, 100.0);
    }

    #[test]
    fn frozen_path() {
        let s = spec(Grid::torus(1, 16, 1.0).unwrap(), "0", "0", "x1^2 + v1");
        let cfg = McConfig::constant(&s.grid, 1, 0.5, 1.0 / 256.0, 100, 1, vec![0.25]);
        let e = simulate_cost(&s, &cfg).unwrap();
        assert!((e.value - 1.0625).abs() < 1e-12);
    }

    #[test]
    fn reflection_stays_inside() {
        assert_eq!(reflect(-0.25, 1.0), 0.25);
        assert_eq!(reflect(1.25, 1.0), 0.75);
        assert_eq!(reflect(2.5, 1.0), 0.5);
        let s = spec(Grid::interval(16, 1.0).unwrap(), "3", "5*v1", "x1");
        let cfg = McConfig::constant(&s.grid, 1, 0.5, 1e-2, 200, 3, vec![0.9]);
        let a = simulate_paths(&s, &cfg).unwrap();
        assert!(a.iter().all(|&x| (0.0..=0.5 + 1e-12).contains(&x)));
    }

    #[test]
    fn deterministic_and_common_numbers() {
        let s = spec(Grid::torus(1, 16, 1.0).unwrap(), "1", "v1", "cos(2*pi*x1)");
        let cfg = McConfig::constant(&s.grid, 0, 1.0, 1e-2, 200, 11, vec![0.0]);
        let a = simulate_cost(&s, &cfg).unwrap();
        let b = simulate_cost(&s, &cfg).unwrap();
        assert_eq!(a, b);
        let sweep = policy_sweep(&s, &cfg, &[cfg.policy.clone(), cfg.policy.clone()]).unwrap();
        assert_eq!(sweep[0], sweep[1]);
        assert_eq!(sweep[0], a);
    }

    #[test]
    fn config_validation() {
        let s = spec(Grid::torus(1, 16, 1.0).unwrap(), "1", "v1", "0");
        let ok = McConfig::constant(&s.grid, 0, 1.0, 1e-2, 100, 0, vec![0.0]);
        assert!(ok.validate(&s).is_ok());
        for bad in [
            McConfig { paths: 99, ..ok.clone() },
            McConfig { dt: 0.0, ..ok.clone() },
            McConfig { horizon: 0.05, ..ok.clone() },
            McConfig { x0: vec![1.5], ..ok.clone() },
            McConfig { x0: vec![0.1, 0.1], ..ok.clone() },
            McConfig { policy: vec![2; 16], ..ok.clone() },
        ] {
            assert!(simulate_cost(&s, &bad).is_err());
        }
    }

    #[test]
    fn log_mean_exp_no_overflow() {
        let a: Vec<f64> = (0..200).map(|i| 690.0 + (i % 7) as f64).collect();
        let e = log_mean_exp_estimate(&a, 1.0, 0.1);
        assert!(e.value.is_finite() && e.value > 690.0 && e.value < 697.0);
        assert!(e.stderr >= 0.0);
    }
}
