//! Explicit-Euler evolution of the nonlinear semigroup and of the
//! frozen-control linear semigroups.
//!
//! One step is `f ← f + dt·G f`. Under the CFL bound every `I + dt·A_v` is
//! a nonnegative matrix, so each step is monotone, positively homogeneous
//! and superadditive, and the same holds for any composition of steps.

use crate::error::{Error, Result};
use crate::generator::{DiscreteGenerator, GridFunction};
use crate::scalar::{sup_norm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions<T> {
    /// Requested step; snapped down so `t_final` is a whole number of steps.
    pub dt: T,
    pub t_final: T,
    /// Record every this many steps in [`evolve_recorded`]; 0 records only
    /// the endpoints.
    pub record_every: usize,
}

impl<T: Scalar> EvolveOptions<T> {
    pub fn new(dt: T, t_final: T) -> Self {
        EvolveOptions { dt, t_final, record_every: 0 }
    }

    /// Step count and effective step size.
    pub fn schedule(&self) -> Result<(usize, T)> {
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(Error::InvalidOptions(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= T::zero()) || !self.t_final.is_finite() {
            return Err(Error::InvalidOptions(format!("t_final must be nonnegative, got {}", self.t_final)));
        }
        if self.t_final == T::zero() {
            return Ok((0, self.dt));
        }
        let ratio = (self.t_final / self.dt).to_f64_lossy();
        let nearest = ratio.round();
        let steps = if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) { nearest } else { ratio.ceil() } as usize;
        let steps = steps.max(1);
        Ok((steps, self.t_final / T::of(steps as f64)))
    }
}

fn check_cfl<T: Scalar>(gen: &DiscreteGenerator<T>, dt: T) -> Result<()> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidOptions(format!("dt must be positive, got {dt}")));
    }
    if dt > gen.dt_max() {
        return Err(Error::CflViolation { dt: dt.to_f64_lossy(), dt_max: gen.dt_max().to_f64_lossy() });
    }
    Ok(())
}

fn check_len<T: Scalar>(gen: &DiscreteGenerator<T>, f: &[T]) -> Result<()> {
    if f.len() != gen.nodes() {
        return Err(Error::DimensionMismatch { expected: gen.nodes(), got: f.len() });
    }
    Ok(())
}

/// Which operator a step advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Nonlinear,
    Frozen(usize),
}

#[inline]
fn step_into<T: Scalar>(gen: &DiscreteGenerator<T>, flow: Flow, f: &[T], dt: T, out: &mut [T]) {
    match flow {
        Flow::Nonlinear => {
            let sense = gen.sense();
            for (i, o) in out.iter_mut().enumerate() {
                *o = f[i] + dt * gen.envelope_at(sense, f, i);
            }
        }
        Flow::Frozen(v) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = f[i] + dt * gen.linear_at(v, f, i);
            }
        }
    }
}

/// One explicit-Euler step `f + dt·G f`.
pub fn step<T: Scalar>(gen: &DiscreteGenerator<T>, f: &[T], dt: T) -> Result<GridFunction<T>> {
    check_cfl(gen, dt)?;
    check_len(gen, f)?;
    let mut out = vec![T::zero(); f.len()];
    step_into(gen, Flow::Nonlinear, f, dt, &mut out);
    Ok(GridFunction(out))
}

/// A reusable one-step map for power iteration: `out = f + dt·G f`.
pub fn step_map<T: Scalar>(gen: &DiscreteGenerator<T>, dt: T) -> Result<impl FnMut(&[T], &mut [T]) + '_> {
    check_cfl(gen, dt)?;
    Ok(move |f: &[T], out: &mut [T]| step_into(gen, Flow::Nonlinear, f, dt, out))
}

fn run<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    flow: Flow,
    f: &[T],
    opts: &EvolveOptions<T>,
    mut observe: impl FnMut(usize, T, &[T]),
) -> Result<GridFunction<T>> {
    check_len(gen, f)?;
    if let Flow::Frozen(v) = flow {
        if v >= gen.num_controls() {
            return Err(Error::IndexOutOfRange { index: v, len: gen.num_controls() });
        }
    }
    let (steps, dt) = opts.schedule()?;
    check_cfl(gen, opts.dt)?;
    let mut cur = f.to_vec();
    let mut next = vec![T::zero(); f.len()];
    observe(0, dt, &cur);
    for k in 1..=steps {
        step_into(gen, flow, &cur, dt, &mut next);
        std::mem::swap(&mut cur, &mut next);
        observe(k, dt, &cur);
    }
    Ok(GridFunction(cur))
}

/// `S_t f`.
pub fn evolve<T: Scalar>(gen: &DiscreteGenerator<T>, f: &[T], opts: &EvolveOptions<T>) -> Result<GridFunction<T>> {
    run(gen, Flow::Nonlinear, f, opts, |_, _, _| {})
}

/// `T_t^v f`: the semigroup of the single control `v`.
pub fn evolve_linear<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    v: usize,
    f: &[T],
    opts: &EvolveOptions<T>,
) -> Result<GridFunction<T>> {
    run(gen, Flow::Frozen(v), f, opts, |_, _, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveRecord<T> {
    pub step: usize,
    pub t: T,
    pub sup_norm: T,
    /// `log ‖f_t‖∞ / t`, zero at `t = 0`.
    pub log_growth: T,
}

/// [`evolve`] with a time series of sup norms every `record_every` steps.
pub fn evolve_recorded<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    f: &[T],
    opts: &EvolveOptions<T>,
) -> Result<(GridFunction<T>, Vec<EvolveRecord<T>>)> {
    let (steps, _) = opts.schedule()?;
    let every = opts.record_every;
    let mut records = Vec::new();
    let out = run(gen, Flow::Nonlinear, f, opts, |k, dt, cur| {
        if k == 0 || k == steps || (every > 0 && k % every == 0) {
            let t = dt * T::of(k as f64);
            let n = sup_norm(cur);
            let log_growth = if k == 0 { T::zero() } else { n.ln() / t };
            records.push(EvolveRecord { step: k, t, sup_norm: n, log_growth });
        }
    })?;
    Ok((out, records))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitResidual<T> {
    pub t: T,
    /// `max_x |(S_t f − f)(x)/t − (G f)(x)|`
    pub residual: T,
}

/// Difference quotients `(S_t f − f)/t` against `G f` for each `t`.
pub fn generator_limit_check<T: Scalar>(
    gen: &DiscreteGenerator<T>,
    f: &[T],
    times: &[T],
    dt: T,
) -> Result<Vec<LimitResidual<T>>> {
    check_len(gen, f)?;
    check_cfl(gen, dt)?;
    if let Some(i) = f.iter().position(|&x| !(x > T::zero())) {
        return Err(Error::NonPositiveFunction { node: i });
    }
    let gf = gen.apply_g(f)?;
    times
        .iter()
        .map(|&t| {
            let st = evolve(gen, f, &EvolveOptions::new(dt, t))?;
            let residual =
                st.iter().zip(f).zip(gf.iter()).map(|((&s, &f0), &g)| ((s - f0) / t - g).abs()).fold(T::zero(), T::max);
            Ok(LimitResidual { t, residual })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{build_generator, Grid, ProblemSpec};

    fn constant_cost(c: f64) -> DiscreteGenerator<f64> {
        let spec = ProblemSpec::parse(
            Grid::torus(1, 16, 1.0).unwrap(),
            &["1"],
            &["v1"],
            &format!("{c}"),
            vec![vec![-1.0], vec![1.0]],
        )
        .unwrap();
        build_generator(&spec).unwrap()
    }

    #[test]
    fn constant_cost_step_is_scalar() {
        let g = constant_cost(1.0);
        let dt = g.dt_max() * 0.5;
        let out = step(&g, &[1.0; 16], dt).unwrap();
        assert!(out.iter().all(|&x| x == 1.0 + dt * 1.0));
    }

    #[test]
    fn cfl_guard() {
        let g = constant_cost(1.0);
        let dt = g.dt_max() * 1.5;
        assert!(matches!(step(&g, &[1.0; 16], dt), Err(Error::CflViolation { .. })));
        assert!(matches!(evolve(&g, &[1.0; 16], &EvolveOptions::new(dt, 1.0)), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn zero_time_is_identity() {
        let g = constant_cost(0.3);
        let f: Vec<f64> = (0..16).map(|i| 1.0 + i as f64).collect();
        let out = evolve(&g, &f, &EvolveOptions::new(g.dt_max() * 0.5, 0.0)).unwrap();
        assert_eq!(out.0, f);
    }

    #[test]
    fn compound_interest_limit() {
        let g = constant_cost(1.0);
        let dt = 1.0 / 1000.0;
        assert!(dt <= g.dt_max());
        let out = evolve(&g, &[1.0; 16], &EvolveOptions::new(dt, 1.0)).unwrap();
        let mut scalar = 1.0f64;
        for _ in 0..1000 {
            scalar += dt * (1.0 * scalar);
        }
        assert!(out.iter().all(|&x| x == scalar));
        assert!((scalar - std::f64::consts::E).abs() <= 2e-3);
        let lin = evolve_linear(&g, 1, &[1.0; 16], &EvolveOptions::new(dt, 1.0)).unwrap();
        assert_eq!(lin, out);
    }

    #[test]
    fn schedule_snaps_down() {
        let o = EvolveOptions::new(0.3, 1.0);
        let (k, dt) = o.schedule().unwrap();
        assert_eq!(k, 4);
        assert_eq!(dt, 0.25);
        let (k, _) = EvolveOptions::new(0.1, 0.3).schedule().unwrap();
        assert_eq!(k, 3);
    }

    #[test]
    fn recorded_series() {
        let g = constant_cost(0.5);
        let dt = 1.0 / 1024.0;
        let mut opts = EvolveOptions::new(dt, 1.0);
        opts.record_every = 256;
        let (_, rec) = evolve_recorded(&g, &[1.0; 16], &opts).unwrap();
        assert_eq!(rec.len(), 5);
        assert!((rec[4].log_growth - 0.5).abs() < 1e-3);
    }

    #[test]
    fn limit_check_constant_cost() {
        let c = 0.7;
        let g = constant_cost(c);
        let dt = 1.0 / 4096.0;
        let res = generator_limit_check(&g, &[1.0; 16], &[0.125, 0.0625, 0.03125], dt).unwrap();
        for r in &res {
            let k = (r.t / dt).round();
            let expected = ((1.0_f64 + c * dt).powf(k) - 1.0) / r.t - c;
            assert!((r.residual - expected.abs()).abs() < 1e-9);
            assert!(r.residual <= c * c * r.t);
        }
    }
}
