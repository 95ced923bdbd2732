//! Certificates for `ρ`.
//!
//! For every strictly positive `f`, `min Gf/f ≤ ρ ≤ max Gf/f`, with equality
//! at `f = φ`. For a single linear generator the Donsker–Varadhan identity
//! `ρ = sup_ν (∫ r dν − I(ν))` holds, with the supremum attained at the
//! normalized product of the right and left Perron vectors. Writing
//! `φ = e^ψ` turns the eigen-equation into an ergodic HJB equation with a
//! quadratic gradient term, whose residual is checked on the grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::eigensolver::{policy_perron, EigenPair};
use crate::error::{Error, Result};
use crate::generator::{DiscreteGenerator, GridFunction};
use crate::matrix::perron;
use crate::scalar::{sup_norm, Scalar};
use crate::semigroup::{evolve, EvolveOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichReport<T> {
    /// `min_x (Gf/f)(x)`
    pub lower: T,
    /// `max_x (Gf/f)(x)`
    pub upper: T,
    /// What `f` was, for reports.
    pub label: String,
    pub rho: Option<T>,
}

impl<T: Scalar> SandwichReport<T> {
    pub fn with_rho(mut self, rho: T) -> Self {
        self.rho = Some(rho);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn gap(&self) -> T {
        self.upper - self.lower
    }

    /// `lower − slack ≤ rho ≤ upper + slack`.
    pub fn contains(&self, rho: T, slack: T) -> bool {
        self.lower - slack <= rho && rho <= self.upper + slack
    }
}

/// Collatz–Wielandt bounds `min Gf/f` and `max Gf/f`.
pub fn cw_bounds<T: Scalar>(gen: &DiscreteGenerator<T>, f: &[T]) -> Result<SandwichReport<T>> {
    if f.len() != gen.nodes() {
        return Err(Error::DimensionMismatch { expected: gen.nodes(), got: f.len() });
    }
    if let Some(i) = f.iter().position(|&x| !(x > T::zero()) || !x.is_finite()) {
        return Err(Error::NonPositiveFunction { node: i });
    }
    let sense = gen.sense();
    let mut lower = T::infinity();
    let mut upper = T::neg_infinity();
    for (i, &fi) in f.iter().enumerate() {
        let q = gen.envelope_at(sense, f, i) / fi;
        lower = lower.min(q);
        upper = upper.max(q);
    }
    Ok(SandwichReport { lower, upper, label: String::new(), rho: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    TightenLower,
    TightenUpper,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwSearchOptions<T> {
    /// Semigroup time advanced between candidates.
    pub tau: T,
    pub dt_factor: T,
}

impl<T: Scalar> Default for CwSearchOptions<T> {
    fn default() -> Self {
        CwSearchOptions { tau: T::of(0.05), dt_factor: T::of(0.9) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CwSearch<T> {
    /// Bounds at each candidate `f_k = S_{kτ} f0 / ‖·‖∞`, `k = 0..=iters`.
    pub raw: Vec<SandwichReport<T>>,
    /// Best active bound(s) so far; the inactive bound is carried from
    /// `f0`.
    pub best: Vec<SandwichReport<T>>,
    pub last: GridFunction<T>,
}

/// Tightens the sandwich along the normalized semigroup orbit of `f0`.
pub fn cw_search<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    f0: &[T],
    direction: Direction,
    iters: usize,
    opts: &CwSearchOptions<T>,
) -> Result<CwSearch<T>> {
    if iters == 0 {
        return Err(Error::InvalidOptions("cw_search needs at least one iteration".into()));
    }
    if !(opts.tau > T::zero()) {
        return Err(Error::InvalidOptions(format!("tau must be positive, got {}", opts.tau)));
    }
    let dt = opts.dt_factor * gen.dt_max();
    let evo = EvolveOptions::new(dt.min(opts.tau), opts.tau);
    let mut f = GridFunction(f0.to_vec()).normalized();
    let first = cw_bounds(gen, &f)?.with_label("k=0");
    let mut raw = vec![first.clone()];
    let mut best = vec![first];
    for k in 1..=iters {
        f = evolve(gen, &f, &evo)?.normalized();
        let r = cw_bounds(gen, &f)?.with_label(format!("k={k}"));
        let prev = best.last().expect("nonempty");
        let mut b = prev.clone().with_label(r.label.clone());
        if matches!(direction, Direction::TightenLower | Direction::Both) {
            b.lower = b.lower.max(r.lower);
        }
        if matches!(direction, Direction::TightenUpper | Direction::Both) {
            b.upper = b.upper.min(r.upper);
        }
        raw.push(r);
        best.push(b);
    }
    Ok(CwSearch { raw, best, last: f })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvOptions<T> {
    pub max_iters: usize,
    /// Stop when `‖∇J‖∞` falls below this.
    pub grad_tol: T,
    /// Number of starts; the first is `ψ = 0`, the rest uniform in `[-1, 1]`.
    pub starts: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for DvOptions<T> {
    fn default() -> Self {
        DvOptions { max_iters: 50_000, grad_tol: T::of(1e-11), starts: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvRate<T> {
    /// `I(ν) ≥ 0`
    pub value: T,
    /// Whether some start reached the gradient tolerance. When the infimum
    /// is not attained `ψ` diverges while the gradient still decays.
    pub converged: bool,
    /// Best `ψ` found.
    pub psi: GridFunction<T>,
    pub iterations: usize,
}

fn require_single<T: Scalar>(gen: &DiscreteGenerator<T>) -> Result<()> {
    if gen.num_controls() != 1 {
        return Err(Error::InvalidProblem(format!(
            "the rate function needs a single control, got {}",
            gen.num_controls()
        )));
    }
    Ok(())
}

/// `J(ψ) = Σ_x ν_x (L e^ψ)_x e^{−ψ_x}` and its gradient.
fn dv_objective<T: Scalar>(gen: &DiscreteGenerator<T>, nu: &[T], psi: &[T], grad: &mut [T]) -> T {
    grad.iter_mut().for_each(|g| *g = T::zero());
    let mut j = T::zero();
    for (x, &nx) in nu.iter().enumerate() {
        if nx == T::zero() {
            continue;
        }
        for (&w, &y) in gen.weights(0, x).iter().zip(gen.neighbors(x)) {
            if w == T::zero() || y == x {
                continue;
            }
            let t = nx * w * (psi[y] - psi[x]).exp();
            j = j + (t - nx * w);
            grad[y] = grad[y] + t;
            grad[x] = grad[x] - t;
        }
    }
    j
}

fn minimize_dv<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    nu: &[T],
    mut psi: Vec<T>,
    opts: &DvOptions<T>,
) -> (T, Vec<T>, bool, usize) {
    let n = psi.len();
    let mut g = vec![T::zero(); n];
    let mut j = dv_objective(gen, nu, &psi, &mut g);
    let scale = (0..n).map(|i| gen.outflow(0, i)).fold(T::zero(), T::max);
    let mut step = T::one() / scale.max(T::epsilon());
    let mut trial = vec![T::zero(); n];
    let mut g_trial = vec![T::zero(); n];
    let c1 = T::of(1e-4);
    for it in 0..opts.max_iters {
        let gnorm = sup_norm(&g);
        if gnorm <= opts.grad_tol {
            return (j, psi, true, it);
        }
        let g2: T = g.iter().map(|&x| x * x).sum();
        let mut accepted = false;
        let mut jt = j;
        for _ in 0..60 {
            for ((t, &p), &d) in trial.iter_mut().zip(&psi).zip(&g) {
                *t = p - step * d;
            }
            jt = dv_objective(gen, nu, &trial, &mut g_trial);
            if jt.is_finite() && jt <= j - c1 * step * g2 {
                accepted = true;
                break;
            }
            step = step * T::half();
        }
        if !accepted {
            return (j, psi, false, it);
        }
        // Barzilai–Borwein step for the next iteration
        let mut ss = T::zero();
        let mut sy = T::zero();
        for i in 0..n {
            let s = trial[i] - psi[i];
            let y = g_trial[i] - g[i];
            ss = ss + s * s;
            sy = sy + s * y;
        }
        step = if sy > T::zero() { ss / sy } else { step * T::two() };
        std::mem::swap(&mut psi, &mut trial);
        std::mem::swap(&mut g, &mut g_trial);
        j = jt;
    }
    let done = sup_norm(&g) <= opts.grad_tol;
    (j, psi, done, opts.max_iters)
}

/// `I(ν) = −inf_ψ Σ_x ν_x (L e^ψ)_x e^{−ψ_x}` for a single-control generator.
pub fn dv_rate<T: Scalar>(gen: &DiscreteGenerator<T>, nu: &[T], opts: &DvOptions<T>) -> Result<DvRate<T>> {
    require_single(gen)?;
    let n = gen.nodes();
    if nu.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: nu.len() });
    }
    if let Some(i) = nu.iter().position(|&x| !(x >= T::zero()) || !x.is_finite()) {
        return Err(Error::NegativeEntry { row: i, col: 0 });
    }
    let total: T = nu.iter().copied().sum();
    if (total - T::one()).abs() > T::of(1e-9).max(T::of(16.0) * T::epsilon() * T::of(n as f64)) {
        return Err(Error::InvalidOptions(format!("nu must sum to 1, got {total}")));
    }
    if opts.starts == 0 {
        return Err(Error::InvalidOptions("dv_rate needs at least one start".into()));
    }
    let starts: Vec<Vec<T>> = (0..opts.starts)
        .map(|s| {
            if s == 0 {
                vec![T::zero(); n]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(s as u64);
                (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()
            }
        })
        .collect();
    let runs: Vec<_> = starts.into_par_iter().map(|p| minimize_dv(gen, nu, p, opts)).collect();
    let converged = runs.iter().any(|r| r.2);
    let iterations = runs.iter().map(|r| r.3).max().unwrap_or(0);
    let (j, psi, _, _) = runs.into_iter().reduce(|a, b| if b.0 < a.0 { b } else { a }).expect("at least one start");
    Ok(DvRate { value: (-j).max(T::zero()), converged, psi: GridFunction(psi), iterations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DvCheck<T> {
    /// Perron root of `L + diag(r)`.
    pub rho: T,
    /// `∫ r dν* − I(ν*)`
    pub rhs: T,
    pub gap: T,
    pub integral_r: T,
    pub rate: DvRate<T>,
    /// Normalized `φ ⊙ φ̂`.
    pub nu_star: GridFunction<T>,
}

/// Perron root with right and left Perron vectors of `L + diag(r)`.
pub fn perron_left_right<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    tol: T,
    max_iters: usize,
) -> Result<(T, Vec<T>, Vec<T>)> {
    require_single(gen)?;
    let n = gen.nodes();
    let policy = vec![0; n];
    let right = policy_perron(gen, &policy, &vec![T::one(); n], tol, max_iters)?;
    let op = gen.shifted_policy_operator(&policy)?;
    let scale = op.shift() + gen.cost_abs_max();
    let rel = (tol / scale).max(T::of(256.0) * T::epsilon());
    let left = perron(&op.transpose(), rel, max_iters)?;
    Ok((right.rho, right.vector, left.vector))
}

/// Evaluates the Donsker–Varadhan identity at the twisted stationary measure.
pub fn dv_check<T: Scalar>(gen: &DiscreteGenerator<T>, opts: &DvOptions<T>) -> Result<DvCheck<T>> {
    let (rho, phi, phi_hat) = perron_left_right(gen, T::of(1e-13), 10_000_000)?;
    let prod: Vec<T> = phi.iter().zip(&phi_hat).map(|(&a, &b)| a * b).collect();
    let total: T = prod.iter().copied().sum();
    let nu: Vec<T> = prod.iter().map(|&x| x / total).collect();
    let integral_r: T = nu.iter().zip(gen.cost(0)).map(|(&n, &r)| n * r).sum();
    let rate = dv_rate(gen, &nu, opts)?;
    let rhs = integral_r - rate.value;
    Ok(DvCheck { rho, rhs, gap: (rho - rhs).abs(), integral_r, rate, nu_star: GridFunction(nu) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjiReport<T> {
    pub residual: T,
    pub node: usize,
    /// Grid spacing.
    pub h: f64,
}

/// `max_x |env_v[r + L_v ψ] + ½ ∇ψᵀ a ∇ψ − ρ|` with `ψ = log φ` and centered
/// differences for `∇ψ`.
pub fn hji_residual<T: Scalar>(gen: &DiscreteGenerator<T>, pair: &EigenPair<T>) -> Result<HjiReport<T>> {
    let n = gen.nodes();
    if pair.phi.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: pair.phi.len() });
    }
    if let Some(i) = pair.phi.iter().position(|&x| !(x > T::zero())) {
        return Err(Error::NonPositivePhi { node: i });
    }
    let psi: Vec<T> = pair.phi.iter().map(|&x| x.ln()).collect();
    let grid = gen.grid();
    let d = grid.dim();
    let inv2h = T::of(0.5 / grid.spacing());
    let mut worst = T::zero();
    let mut node = 0;
    for i in 0..n {
        let mut best = gen.cost(0)[i] + gen.transport_at(0, &psi, i);
        for v in 1..gen.num_controls() {
            best = pair.sense.pick(best, gen.cost(v)[i] + gen.transport_at(v, &psi, i));
        }
        let mut grad = [T::zero(); 2];
        grad[0] = (psi[grid.neighbor(i, 1, 0)] - psi[grid.neighbor(i, -1, 0)]) * inv2h;
        if d == 2 {
            grad[1] = (psi[grid.neighbor(i, 0, 1)] - psi[grid.neighbor(i, 0, -1)]) * inv2h;
        }
        let a = gen.diffusion(i);
        let mut quad = T::zero();
        for p in 0..d {
            for q in 0..d {
                quad = quad + grad[p] * a[p * d + q] * grad[q];
            }
        }
        let r = (best + T::half() * quad - pair.rho).abs();
        if r > worst {
            worst = r;
            node = i;
        }
    }
    Ok(HjiReport { residual: worst, node, h: grid.spacing() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigensolver::{solve_evolution, SolveOptions};
    use crate::generator::{build_generator, Grid, ProblemSpec};

    fn torus(cost: &str) -> DiscreteGenerator<f64> {
        let spec = ProblemSpec::parse(Grid::torus(1, 32, 1.0).unwrap(), &["1"], &["0"], cost, vec![vec![0.0]]).unwrap();
        build_generator(&spec).unwrap()
    }

    #[test]
    fn ones_reduce_to_cost_range() {
        let g = torus("cos(2*pi*x1)");
        let r = cw_bounds(&g, &[1.0; 32]).unwrap();
        let (lo, hi) = crate::scalar::min_max(g.cost(0));
        assert_eq!((r.lower, r.upper), (lo, hi));
        assert!(matches!(cw_bounds(&g, &[0.0; 32]), Err(Error::NonPositiveFunction { node: 0 })));
    }

    #[test]
    fn search_tightens() {
        let g = torus("cos(2*pi*x1)");
        let rho = solve_evolution(&g, &SolveOptions::default()).unwrap().rho;
        let s = cw_search(&g, &[1.0; 32], Direction::Both, 20, &CwSearchOptions::default()).unwrap();
        let first = &s.best[0];
        let last = s.best.last().unwrap();
        assert!(last.upper - rho < 0.1 * (first.upper - rho));
        assert!(rho - last.lower < 0.1 * (rho - first.lower));
        assert!(s.best.windows(2).all(|w| w[1].gap() <= w[0].gap()));
    }

    #[test]
    fn rate_vanishes_at_stationary_and_point_mass_is_outflow() {
        let g = torus("0");
        let nu = vec![1.0 / 32.0; 32];
        let r = dv_rate(&g, &nu, &DvOptions::default()).unwrap();
        assert!(r.value <= 1e-12 && r.converged);
        let mut delta = vec![0.0; 32];
        delta[5] = 1.0;
        let r = dv_rate(&g, &delta, &DvOptions::default()).unwrap();
        assert!((r.value - g.outflow(0, 5)).abs() <= 1e-6 * g.outflow(0, 5), "{}", r.value);
    }

    #[test]
    fn dv_identity_on_cosine() {
        let g = torus("cos(2*pi*x1)");
        let c = dv_check(&g, &DvOptions::default()).unwrap();
        assert!(c.gap <= 1e-6, "gap {}", c.gap);
    }

    #[test]
    fn hji_constant_cost_is_zero() {
        let g = torus("0.75");
        let p = solve_evolution(&g, &SolveOptions::default()).unwrap();
        assert_eq!(hji_residual(&g, &p).unwrap().residual, 0.0);
    }
}
