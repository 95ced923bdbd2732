//! Normalized power iteration for positively 1-homogeneous monotone maps on
//! the cone of nonnegative grid functions.
//!
//! Given a map `S` and a start `f0 > 0`, the iterates `g_k = S^k f0 / ‖·‖∞`
//! converge to the normalized eigenvector `x̂`. The unnormalized orbit
//! `y_k = S^k f0 / growth^k` is bracketed by `α̲_k x̂ ≤ y_k ≤ ᾱ_k x̂`, with
//! `α̲_k` nondecreasing, `ᾱ_k` nonincreasing, and `η_k = ᾱ_k − α̲_k → 0`
//! geometrically for strongly positive maps.

use crate::error::{Error, Result};
use crate::generator::GridFunction;
use crate::scalar::{min_max, sup_norm, Scalar};

/// `(min f/reference, max f/reference)`.
pub fn alpha_bounds<T: Scalar>(f: &[T], reference: &[T]) -> Result<(T, T)> {
    if f.len() != reference.len() {
        return Err(Error::DimensionMismatch { expected: reference.len(), got: f.len() });
    }
    if let Some(i) = reference.iter().position(|&r| !(r > T::zero())) {
        return Err(Error::NonPositiveReference { node: i });
    }
    let mut lo = T::infinity();
    let mut hi = T::neg_infinity();
    for (&a, &r) in f.iter().zip(reference) {
        let q = a / r;
        lo = lo.min(q);
        hi = hi.max(q);
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerOptions<T> {
    /// Stop when `max log(S g / g) − min log(S g / g) < tol`.
    pub tol: T,
    pub max_iters: usize,
    /// Record orbit statistics every this many iterations; 0 disables.
    pub record_stride: usize,
    /// Cap on stored records; the stride doubles when it is reached.
    pub max_records: usize,
    /// Also evaluate the (P1) diagnostic, at two extra map calls per record.
    pub diagnostics: bool,
}

impl<T: Scalar> Default for PowerOptions<T> {
    fn default() -> Self {
        PowerOptions {
            tol: T::of(1e-12),
            max_iters: 1_000_000,
            record_stride: 0,
            max_records: 2048,
            diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrbitRecord<T> {
    pub iteration: usize,
    pub under_alpha: T,
    pub over_alpha: T,
    pub eta: T,
    /// Collatz–Wielandt midpoint of `S g_k / g_k`, per application.
    pub growth_estimate: T,
    /// `‖y_k‖∞` of the unnormalized orbit.
    pub sup_norm: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrbitStats<T> {
    pub records: Vec<OrbitRecord<T>>,
    /// `max x̂ / min x̂`; the (P2) bound reads `‖y‖∞ ≤ ᾱ·zeta1`.
    pub zeta1: T,
    /// Whether every record satisfied the (P2) bound.
    pub p2_holds: bool,
    /// `min_k ‖S(x̂ − z_k)‖∞ + ‖S z_k‖∞` with `z_k = α̲(g_k) g_k`, if requested.
    pub p1_min: Option<T>,
}

impl<T: Scalar> OrbitStats<T> {
    pub fn empty() -> Self {
        OrbitStats { records: Vec::new(), zeta1: T::one(), p2_holds: true, p1_min: None }
    }

    /// Builds stats from a bare `η` sequence at consecutive iterations.
    pub fn from_eta(eta: impl IntoIterator<Item = T>) -> Self {
        let records = eta
            .into_iter()
            .enumerate()
            .map(|(k, e)| OrbitRecord {
                iteration: k,
                under_alpha: T::zero(),
                over_alpha: e,
                eta: e,
                growth_estimate: T::one(),
                sup_norm: e,
            })
            .collect();
        OrbitStats { records, ..Self::empty() }
    }

    /// The prefix of records whose `η` stays above `floor`.
    pub fn above_floor(&self, floor: T) -> Self {
        let end = self.records.iter().position(|r| !(r.eta > floor)).unwrap_or(self.records.len());
        OrbitStats { records: self.records[..end].to_vec(), ..self.clone() }
    }

    /// Largest drop of `α̲` and largest rise of `ᾱ` between consecutive
    /// records; both are zero for a monotone bracket.
    pub fn bracket_violation(&self) -> (T, T) {
        let mut under = T::zero();
        let mut over = T::zero();
        for w in self.records.windows(2) {
            under = under.max(w[0].under_alpha - w[1].under_alpha);
            over = over.max(w[1].over_alpha - w[0].over_alpha);
        }
        (under, over)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerResult<T> {
    /// Collatz–Wielandt midpoint of `S x̂ / x̂` at the final iterate.
    pub growth: T,
    pub lower_ratio: T,
    pub upper_ratio: T,
    /// Geometric mean of the normalization factors over the last quarter
    /// of the run; a diagnostic only.
    pub tail_growth: T,
    pub fixed_point: GridFunction<T>,
    pub iterations: usize,
    pub stats: OrbitStats<T>,
}

struct Snapshot<T> {
    iteration: usize,
    g: Vec<T>,
    growth_estimate: T,
}

/// Power iteration `g ← S g / ‖S g‖∞` from `f0`.
pub fn power_iterate<T: Scalar, M: FnMut(&[T], &mut [T])>(
    mut map: M,
    f0: &[T],
    opts: &PowerOptions<T>,
) -> Result<PowerResult<T>> {
    if !(opts.tol > T::zero()) {
        return Err(Error::InvalidOptions("tolerance must be positive".into()));
    }
    if f0.is_empty() {
        return Err(Error::InvalidOptions("start vector is empty".into()));
    }
    if let Some(i) = f0.iter().position(|&x| !(x > T::zero()) || !x.is_finite()) {
        return Err(Error::NonPositiveFunction { node: i });
    }
    let n = f0.len();
    let f0_norm = sup_norm(f0);
    let mut g: Vec<T> = f0.iter().map(|&x| x / f0_norm).collect();
    let mut sg = vec![T::zero(); n];
    let mut log_norms: Vec<T> = Vec::new();
    let mut snaps: Vec<Snapshot<T>> = Vec::new();
    let mut stride = opts.record_stride;
    let recording = stride > 0;

    for k in 0..=opts.max_iters {
        map(&g, &mut sg);
        if sg.iter().any(|&x| !(x > T::zero()) || !x.is_finite()) {
            return Err(Error::NonPositiveIterate { iteration: k });
        }
        let mut lo = T::infinity();
        let mut hi = T::neg_infinity();
        for (&a, &b) in g.iter().zip(&sg) {
            let q = b / a;
            lo = lo.min(q);
            hi = hi.max(q);
        }
        let mid = (lo + hi) * T::half();
        let converged = hi.ln() - lo.ln() < opts.tol;
        if recording && (converged || k % stride == 0) {
            snaps.push(Snapshot { iteration: k, g: g.clone(), growth_estimate: mid });
            if snaps.len() >= opts.max_records.max(4) && !converged {
                stride *= 2;
                snaps.retain(|s| s.iteration % stride == 0);
            }
        }
        if converged {
            let tail_growth = tail_mean(&log_norms).map_or(mid, T::exp);
            let stats = if recording {
                orbit_stats(&mut map, &g, &snaps, &log_norms, f0_norm, mid, opts.diagnostics)
            } else {
                OrbitStats::empty()
            };
            return Ok(PowerResult {
                growth: mid,
                lower_ratio: lo,
                upper_ratio: hi,
                tail_growth,
                fixed_point: GridFunction(g),
                iterations: k,
                stats,
            });
        }
        let s = sup_norm(&sg);
        log_norms.push(s.ln());
        for (a, &b) in g.iter_mut().zip(&sg) {
            *a = b / s;
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iters })
}

fn tail_mean<T: Scalar>(logs: &[T]) -> Option<T> {
    if logs.is_empty() {
        return None;
    }
    let start = logs.len() - logs.len().div_ceil(4);
    let tail = &logs[start..];
    Some(tail.iter().copied().sum::<T>() / T::of(tail.len() as f64))
}

fn orbit_stats<T: Scalar, M: FnMut(&[T], &mut [T])>(
    map: &mut M,
    reference: &[T],
    snaps: &[Snapshot<T>],
    log_norms: &[T],
    f0_norm: T,
    growth: T,
    diagnostics: bool,
) -> OrbitStats<T> {
    let (rmin, rmax) = min_max(reference);
    let zeta1 = rmax / rmin;
    let log_growth = growth.ln();
    // log ‖y_k‖ = log ‖f0‖ + Σ_{j<k} (log n_j − log growth)
    let mut prefix = Vec::with_capacity(log_norms.len() + 1);
    let mut acc = f0_norm.ln();
    prefix.push(acc);
    for &l in log_norms {
        acc = acc + (l - log_growth);
        prefix.push(acc);
    }
    let mut p2_holds = true;
    let mut p1_min: Option<T> = None;
    let n = reference.len();
    let (mut a, mut b) = (vec![T::zero(); n], vec![T::zero(); n]);
    let records = snaps
        .iter()
        .map(|s| {
            let scale = prefix[s.iteration].exp();
            let (lo, hi) = alpha_bounds(&s.g, reference).unwrap_or((T::zero(), T::infinity()));
            let under = lo * scale;
            let over = hi * scale;
            if scale > over * zeta1 * (T::one() + T::of(64.0) * T::epsilon()) {
                p2_holds = false;
            }
            if diagnostics {
                // z = α̲(g) g ⪯ x̂ touches x̂ at some node
                let (zlo, _) = alpha_bounds(reference, &s.g).unwrap_or((T::zero(), T::zero()));
                let z: Vec<T> = s.g.iter().map(|&x| x * zlo).collect();
                let diff: Vec<T> = reference.iter().zip(&z).map(|(&r, &x)| (r - x).max(T::zero())).collect();
                map(&diff, &mut a);
                map(&z, &mut b);
                let v = sup_norm(&a) + sup_norm(&b);
                p1_min = Some(p1_min.map_or(v, |m: T| m.min(v)));
            }
            OrbitRecord {
                iteration: s.iteration,
                under_alpha: under,
                over_alpha: over,
                eta: over - under,
                growth_estimate: s.growth_estimate,
                sup_norm: scale,
            }
        })
        .collect();
    OrbitStats { records, zeta1, p2_holds, p1_min }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit<T> {
    /// Decay rate of `η` per iteration.
    pub theta: T,
    pub r2: T,
    pub contracting: bool,
    pub samples: usize,
}

/// Least-squares fit of `log η_k` against `k`.
pub fn fit_exponential_rate<T: Scalar>(stats: &OrbitStats<T>) -> Result<RateFit<T>> {
    const MIN_RECORDS: usize = 10;
    let recs = &stats.records;
    if recs.len() < MIN_RECORDS {
        return Err(Error::InsufficientData { have: recs.len(), need: MIN_RECORDS });
    }
    if let Some(i) = recs.iter().position(|r| !(r.eta > T::zero())) {
        return Err(Error::NonPositiveEta { index: i });
    }
    let m = recs.len() as f64;
    let xs: Vec<f64> = recs.iter().map(|r| r.iteration as f64).collect();
    let ys: Vec<f64> = recs.iter().map(|r| r.eta.to_f64_lossy().ln()).collect();
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let syy: f64 = ys.iter().map(|y| (y - ybar).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - ybar - slope * (x - xbar)).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let theta = -slope;
    let noise = 1e-12 * (1.0 + ybar.abs());
    Ok(RateFit {
        theta: T::of(if theta.abs() <= noise { 0.0 } else { theta }),
        r2: T::of(r2),
        contracting: theta > noise,
        samples: recs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{NonnegMatrix, NonnegOperator};

    #[test]
    fn alpha_examples() {
        let r = [1.0, 2.0, 4.0];
        assert_eq!(alpha_bounds(&r, &r).unwrap(), (1.0, 1.0));
        assert_eq!(alpha_bounds(&[2.0, 4.0, 8.0], &r).unwrap(), (2.0, 2.0));
        assert_eq!(alpha_bounds(&[1.0, 4.0, 4.0], &r).unwrap(), (1.0, 2.0));
        assert!(matches!(alpha_bounds(&[1.0, 1.0], &[1.0, 0.0]), Err(Error::NonPositiveReference { node: 1 })));
    }

    #[test]
    fn all_ones_matrix() {
        let m = NonnegMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let res =
            power_iterate(|x: &[f64], o: &mut [f64]| m.apply(x, o), &[1.0, 3.0], &PowerOptions::default()).unwrap();
        assert!((res.growth - 2.0).abs() < 1e-12);
        assert!(res.fixed_point.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn records_bracket_the_orbit() {
        let m = NonnegMatrix::from_rows(&[vec![2.0, 1.0, 0.0], vec![1.0, 1.0, 1.0], vec![0.5, 0.0, 3.0]]).unwrap();
        let opts = PowerOptions { record_stride: 1, diagnostics: true, ..PowerOptions::default() };
        let res = power_iterate(|x, o| m.apply(x, o), &[1.0, 1.0, 1.0], &opts).unwrap();
        let stats = &res.stats;
        assert!(stats.records.len() > 10);
        let (du, dov) = stats.bracket_violation();
        assert!(du <= 1e-10 && dov <= 1e-10, "{du} {dov}");
        assert!(stats.p2_holds);
        assert!(stats.p1_min.unwrap() > 0.0);
        let fit = fit_exponential_rate(&stats.above_floor(1e-9)).unwrap();
        assert!(fit.contracting && fit.theta > 0.0);
    }

    #[test]
    fn stride_doubles_at_cap() {
        let m = NonnegMatrix::from_rows(&[vec![1.0, 0.1], vec![0.1, 1.0]]).unwrap();
        let opts = PowerOptions { record_stride: 1, max_records: 8, ..PowerOptions::default() };
        let res = power_iterate(|x, o| m.apply(x, o), &[1.0, 2.0], &opts).unwrap();
        assert!(res.stats.records.len() <= 9);
        assert_eq!(res.stats.records.last().unwrap().iteration, res.iterations);
    }

    #[test]
    fn nonpositive_iterate() {
        let res = power_iterate(
            |x: &[f64], o: &mut [f64]| {
                o[0] = x[0];
                o[1] = 0.0;
            },
            &[1.0, 1.0],
            &PowerOptions::default(),
        );
        assert!(matches!(res, Err(Error::NonPositiveIterate { iteration: 0 })));
    }

    #[test]
    fn synthetic_fits() {
        let fit = fit_exponential_rate(&OrbitStats::from_eta((0..20).map(|k| 0.5f64.powi(k)))).unwrap();
        assert!((fit.theta - 2f64.ln()).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        let flat = fit_exponential_rate(&OrbitStats::from_eta(vec![0.3f64; 12])).unwrap();
        assert_eq!(flat.theta, 0.0);
        assert!(!flat.contracting);
        assert!(matches!(
            fit_exponential_rate(&OrbitStats::from_eta(vec![1.0f64; 5])),
            Err(Error::InsufficientData { have: 5, need: 10 })
        ));
        assert!(matches!(
            fit_exponential_rate(&OrbitStats::from_eta((0..12).map(|k| if k == 11 { 0.0 } else { 1.0 }))),
            Err(Error::NonPositiveEta { index: 11 })
        ));
    }
}
