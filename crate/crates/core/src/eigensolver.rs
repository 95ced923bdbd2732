//! Principal eigenpair `G φ = ρ φ` by two independent routes.
//!
//! [`solve_evolution`] runs the normalized semigroup orbit to its fixed
//! point. [`solve_policy_iteration`] alternates a Perron solve for a frozen
//! policy with a greedy policy update. Both report `ρ` as the
//! Collatz–Wielandt midpoint of `Gφ/φ` at the returned `φ`, so a constant
//! cost `c` gives exactly `ρ = c`.

use crate::cone::{power_iterate, OrbitStats, PowerOptions};
use crate::error::{Error, Result};
use crate::generator::{DiscreteGenerator, GridFunction, Sense};
use crate::matrix::is_irreducible;
use crate::scalar::{sup_norm, Scalar};
use crate::semigroup::step_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Evolution,
    PolicyIteration,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Evolution => "evolution",
            Method::PolicyIteration => "policy_iteration",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions<T> {
    /// Time step as a fraction of the CFL bound, in `(0, 1]`.
    pub dt_factor: T,
    /// Target accuracy of `ρ`, in 1/time.
    pub tol: T,
    /// Iteration cap for the orbit and for each inner Perron solve.
    pub max_iters: usize,
    /// Cap on policy updates.
    pub max_policy_iters: usize,
    /// Start vector; defaults to `1`.
    pub start: Option<Vec<T>>,
    /// Orbit recording stride for [`solve_evolution_orbit`]; 0 disables.
    pub record_stride: usize,
    pub diagnostics: bool,
}

impl<T: Scalar> Default for SolveOptions<T> {
    fn default() -> Self {
        SolveOptions {
            dt_factor: T::of(0.9),
            tol: T::of(1e-10),
            max_iters: 5_000_000,
            max_policy_iters: 100,
            start: None,
            record_stride: 0,
            diagnostics: false,
        }
    }
}

impl<T: Scalar> SolveOptions<T> {
    fn validate(&self, n: usize) -> Result<()> {
        if !(self.dt_factor > T::zero() && self.dt_factor <= T::one()) {
            return Err(Error::InvalidOptions(format!("dt_factor must lie in (0, 1], got {}", self.dt_factor)));
        }
        if !(self.tol > T::zero()) {
            return Err(Error::InvalidOptions(format!("tol must be positive, got {}", self.tol)));
        }
        if let Some(s) = &self.start {
            if s.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: s.len() });
            }
            if let Some(i) = s.iter().position(|&x| !(x > T::zero()) || !x.is_finite()) {
                return Err(Error::NonPositiveFunction { node: i });
            }
        }
        Ok(())
    }

    fn start_vector(&self, n: usize) -> Vec<T> {
        self.start.clone().unwrap_or_else(|| vec![T::one(); n])
    }
}

/// `ρ` and `φ` with a strictly positive `φ` of sup norm 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair<T> {
    pub rho: T,
    pub phi: GridFunction<T>,
    /// Optimizing control index per node at `φ`.
    pub policy: Vec<usize>,
    /// `‖Gφ − ρφ‖∞`
    pub residual: T,
    /// `min Gφ/φ` and `max Gφ/φ`.
    pub lower: T,
    pub upper: T,
    pub iterations: usize,
    pub method: Method,
    pub sense: Sense,
}

impl<T: Scalar> EigenPair<T> {
    /// Node count per control index.
    pub fn policy_histogram(&self, controls: usize) -> Vec<usize> {
        let mut h = vec![0; controls];
        for &v in &self.policy {
            if v < controls {
                h[v] += 1;
            }
        }
        h
    }
}

fn finish<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    phi: Vec<T>,
    iterations: usize,
    method: Method,
) -> Result<EigenPair<T>> {
    let s = sup_norm(&phi);
    let phi: Vec<T> = phi.iter().map(|&x| x / s).collect();
    if let Some(i) = phi.iter().position(|&x| !(x > T::zero())) {
        return Err(Error::NonPositivePhi { node: i });
    }
    let gphi = gen.apply_g(&phi)?;
    let mut lower = T::infinity();
    let mut upper = T::neg_infinity();
    for (&g, &p) in gphi.iter().zip(&phi) {
        let q = g / p;
        lower = lower.min(q);
        upper = upper.max(q);
    }
    let rho = (lower + upper) * T::half();
    let residual = gphi.iter().zip(&phi).map(|(&g, &p)| (g - rho * p).abs()).fold(T::zero(), T::max);
    let policy = gen.argmin_policy(&phi)?;
    Ok(EigenPair {
        rho,
        phi: GridFunction(phi),
        policy,
        residual,
        lower,
        upper,
        iterations,
        method,
        sense: gen.sense(),
    })
}

/// Fixed point of the normalized one-step map `f ← f + dt·G f`.
pub fn solve_evolution<T: Scalar>(gen: &DiscreteGenerator<T>, opts: &SolveOptions<T>) -> Result<EigenPair<T>> {
    solve_evolution_orbit(gen, opts).map(|(pair, _)| pair)
}

/// [`solve_evolution`] plus the orbit statistics of the run, recorded per
/// `opts.record_stride`.
pub fn solve_evolution_orbit<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    opts: &SolveOptions<T>,
) -> Result<(EigenPair<T>, OrbitStats<T>)> {
    let n = gen.nodes();
    opts.validate(n)?;
    let dt = opts.dt_factor * gen.dt_max();
    let map = step_map(gen, dt)?;
    // Gg/g spread below tol ⇔ log-ratio spread of one step below about tol·dt
    let floor = T::of(64.0) * T::epsilon();
    let popts = PowerOptions {
        tol: (opts.tol * dt).max(floor),
        max_iters: opts.max_iters,
        record_stride: opts.record_stride,
        diagnostics: opts.diagnostics,
        ..PowerOptions::default()
    };
    let res = power_iterate(map, &opts.start_vector(n), &popts)?;
    let pair = finish(gen, res.fixed_point.into_inner(), res.iterations, Method::Evolution)?;
    Ok((pair, res.stats))
}

/// Perron pair of `A_u` for a frozen policy `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPerron<T> {
    /// Midpoint of the Collatz–Wielandt bounds of `A_u x / x`.
    pub rho: T,
    pub lower: T,
    pub upper: T,
    /// Strictly positive, sup norm 1.
    pub vector: Vec<T>,
    pub iterations: usize,
}

/// Power iteration on `c I + A_u` from `start`.
///
/// Convergence is judged on the unshifted ratios `A_u x / x`, which carry
/// no cancellation against `c`. The stopping threshold is `tol` or the
/// rounding level of those ratios, whichever is larger. Each entry of `x`
/// carries a relative rounding error from the previous update, and a
/// neighbor difference scales it by the edge weight, so that level grows
/// like `ε·Σ_j w_ij x_j / x_i`.
pub fn policy_perron<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    policy: &[usize],
    start: &[T],
    tol: T,
    max_iters: usize,
) -> Result<PolicyPerron<T>> {
    let op = gen.shifted_policy_operator(policy)?;
    if !is_irreducible(&op) {
        return Err(Error::NotIrreducible);
    }
    let n = gen.nodes();
    if start.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: start.len() });
    }
    if let Some(i) = start.iter().position(|&x| !(x > T::zero()) || !x.is_finite()) {
        return Err(Error::NonPositiveVector { index: i });
    }
    let shift = op.shift();
    let eps8 = T::of(8.0) * T::epsilon();
    let s0 = sup_norm(start);
    let mut x: Vec<T> = start.iter().map(|&v| v / s0).collect();
    let mut y = vec![T::zero(); n];
    for it in 0..max_iters {
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        let mut noise = T::zero();
        for i in 0..n {
            let v = policy[i];
            y[i] = gen.linear_at(v, &x, i);
            let q = y[i] / x[i];
            lo = lo.min(q);
            hi = hi.max(q);
            let mass: T = gen.weights(v, i).iter().zip(gen.neighbors(i)).map(|(&w, &j)| w * x[j].max(x[i])).sum();
            noise = noise.max((mass + gen.cost(v)[i].abs() * x[i]) / x[i]);
        }
        if hi - lo <= tol.max(eps8 * noise) {
            return Ok(PolicyPerron { rho: (lo + hi) * T::half(), lower: lo, upper: hi, vector: x, iterations: it });
        }
        // x + (A x − μ x)/(c + μ) is (c I + A) x / (c + μ), with the
        // correction formed before it meets the large diagonal
        let mu = (lo + hi) * T::half();
        let denom = shift + mu;
        let mut s = T::zero();
        for i in 0..n {
            y[i] = x[i] + (y[i] - mu * x[i]) / denom;
            s = s.max(y[i]);
        }
        if !(s > T::zero()) || !s.is_finite() {
            return Err(Error::NoConvergence { iterations: it });
        }
        for (a, &b) in x.iter_mut().zip(&y) {
            *a = b / s;
        }
    }
    Err(Error::NoConvergence { iterations: max_iters })
}

/// Howard policy iteration with a shifted Perron solve per policy.
pub fn solve_policy_iteration<T: Scalar>(gen: &DiscreteGenerator<T>, opts: &SolveOptions<T>) -> Result<EigenPair<T>> {
    let n = gen.nodes();
    opts.validate(n)?;
    let tie = T::of(1e-12);
    let mut vec = opts.start_vector(n);
    let mut policy = gen.argmin_policy(&vec)?;
    let mut history: Vec<Vec<usize>> = vec![policy.clone()];
    let mut prev_rho: Option<T> = None;
    let mut total = 0;
    for _ in 0..opts.max_policy_iters {
        let pp = policy_perron(gen, &policy, &vec, opts.tol, opts.max_iters)?;
        total += pp.iterations + 1;
        vec = pp.vector;
        let next = gen.improve_policy(&vec, &policy, tie)?;
        if next == policy {
            return finish(gen, vec, total, Method::PolicyIteration);
        }
        let settled = prev_rho.is_some_and(|p: T| (pp.rho - p).abs() < opts.tol);
        if history.contains(&next) {
            if settled {
                return finish(gen, vec, total, Method::PolicyIteration);
            }
            return Err(Error::CycleDetected { first: policy, second: next });
        }
        if settled {
            return finish(gen, vec, total, Method::PolicyIteration);
        }
        prev_rho = Some(pp.rho);
        history.push(next.clone());
        policy = next;
    }
    Err(Error::NoConvergence { iterations: opts.max_policy_iters })
}

/// Dispatch on [`Method`].
pub fn solve<T: Scalar>(gen: &DiscreteGenerator<T>, opts: &SolveOptions<T>, method: Method) -> Result<EigenPair<T>> {
    match method {
        Method::Evolution => solve_evolution(gen, opts),
        Method::PolicyIteration => solve_policy_iteration(gen, opts),
    }
}

/// The pair `(β, ψ)` for the maximizing envelope.
pub fn solve_max<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    opts: &SolveOptions<T>,
    method: Method,
) -> Result<EigenPair<T>> {
    solve(&gen.with_sense(Sense::Maximize), opts, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{build_generator, Grid, ProblemSpec};

    fn gen(grid: Grid, drift: &str, cost: &str, controls: Vec<Vec<f64>>) -> DiscreteGenerator<f64> {
        let sigma: Vec<&str> = if grid.dim() == 1 { vec!["1"] } else { vec!["1", "0", "0", "1"] };
        let drift: Vec<&str> = if grid.dim() == 1 { vec![drift] } else { vec![drift, "0"] };
        build_generator(&ProblemSpec::parse(grid, &sigma, &drift, cost, controls).unwrap()).unwrap()
    }

    #[test]
    fn constant_cost_is_exact() {
        let g = gen(Grid::interval(16, 1.0).unwrap(), "v1", "1.5", vec![vec![-1.0], vec![1.0]]);
        for m in [Method::Evolution, Method::PolicyIteration] {
            let p = solve(&g, &SolveOptions::default(), m).unwrap();
            assert_eq!(p.rho, 1.5);
            assert_eq!(p.residual, 0.0);
            assert!(p.phi.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn methods_agree_on_cosine() {
        let g = gen(
            Grid::torus(1, 32, 1.0).unwrap(),
            "v1",
            "cos(2*pi*x1) + 0.5*v1^2",
            vec![vec![-1.0], vec![0.0], vec![1.0]],
        );
        let opts = SolveOptions::default();
        let a = solve_evolution(&g, &opts).unwrap();
        let b = solve_policy_iteration(&g, &opts).unwrap();
        assert!((a.rho - b.rho).abs() <= 1e-8 * a.rho.abs().max(1.0), "{} {}", a.rho, b.rho);
        assert!(a.residual <= 1e-9 && b.residual <= 1e-9);
        let beta = solve_max(&g, &opts, Method::Evolution).unwrap();
        assert!(beta.rho >= a.rho);
        assert_eq!(beta.sense, Sense::Maximize);
    }

    #[test]
    fn start_is_validated() {
        let g = gen(Grid::torus(1, 8, 1.0).unwrap(), "0", "x1", vec![vec![0.0]]);
        let opts = SolveOptions { start: Some(vec![1.0; 7]), ..SolveOptions::default() };
        assert!(matches!(solve_evolution(&g, &opts), Err(Error::DimensionMismatch { .. })));
        let opts = SolveOptions { dt_factor: 1.5, ..SolveOptions::default() };
        assert!(matches!(solve_evolution(&g, &opts), Err(Error::InvalidOptions(_))));
    }
}
