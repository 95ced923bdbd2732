//! Problem corpus and dense oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nisio::generator::{build_generator, DiscreteGenerator, Grid, ProblemSpec, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub name: &'static str,
    pub spec: ProblemSpec,
}

impl Case {
    pub fn gen(&self) -> DiscreteGenerator<f64> {
        build_generator(&self.spec).expect("corpus problems are valid")
    }
}

fn spec1(grid: Grid, sigma: &str, drift: &str, cost: &str, controls: &[f64]) -> ProblemSpec {
    let controls = controls.iter().map(|&v| vec![v]).collect();
    ProblemSpec::parse(grid, &[sigma], &[drift], cost, controls).unwrap()
}

pub fn torus(n: usize) -> Grid {
    Grid::torus(1, n, 1.0).unwrap()
}

pub fn interval(n: usize) -> Grid {
    Grid::interval(n, 1.0).unwrap()
}

/// Uncontrolled diffusion on the circle with a cosine potential.
pub fn torus_cosine(n: usize) -> Case {
    Case { name: "torus_cosine", spec: spec1(torus(n), "1", "0", "cos(2*pi*x1)", &[0.0]) }
}

/// Reflected diffusion on [0, 1] with a cosine potential.
pub fn interval_cosine(n: usize) -> Case {
    Case { name: "interval_cosine", spec: spec1(interval(n), "1", "0", "cos(pi*x1)", &[0.0]) }
}

/// The controller picks the drift direction; the cost ignores the control.
pub fn drift_selection(n: usize) -> Case {
    Case { name: "drift_selection", spec: spec1(torus(n), "1", "v1", "cos(2*pi*x1)", &[-1.0, 1.0]) }
}

/// Drift control with a quadratic control cost.
pub fn control_cost(n: usize) -> Case {
    Case { name: "control_cost", spec: spec1(torus(n), "1", "v1", "cos(2*pi*x1) + 0.1*v1^2", &[-1.0, 0.0, 1.0]) }
}

/// Reflected diffusion in a double-well drift with a tilted cost.
pub fn double_well(n: usize) -> Case {
    Case {
        name: "double_well",
        spec: spec1(interval(n), "0.8", "-8*(x1 - 0.5)*((x1 - 0.5)^2 - 0.0625) + 0.5*v1", "(x1 - 0.3)^2", &[-1.0, 1.0]),
    }
}

/// State-dependent noise on [0, 1], control entering both drift and cost.
pub fn interval_mixed(n: usize) -> Case {
    Case {
        name: "interval_mixed",
        spec: spec1(
            interval(n),
            "0.6 + 0.2*sin(pi*x1)",
            "v1 - 0.5*x1",
            "sin(2*pi*x1) + 0.3*v1^2 + 0.2*v1*x1",
            &[-1.0, -0.5, 0.0, 0.5, 1.0],
        ),
    }
}

pub fn corpus(n: usize) -> Vec<Case> {
    vec![torus_cosine(n), interval_cosine(n), drift_selection(n), control_cost(n), double_well(n), interval_mixed(n)]
}

/// Single-control corpus members.
pub fn linear_corpus(n: usize) -> Vec<Case> {
    vec![torus_cosine(n), interval_cosine(n)]
}

pub fn constant_cost(grid: Grid, c: f64) -> Case {
    Case { name: "constant_cost", spec: spec1(grid, "1", "v1", &format!("{c}"), &[-1.0, 1.0]) }
}

pub fn dense_matrix(gen: &DiscreteGenerator<f64>, v: usize) -> DMatrix<f64> {
    let n = gen.nodes();
    DMatrix::from_row_slice(n, n, &gen.dense(v).unwrap())
}

/// Largest real part among the eigenvalues of a dense matrix.
pub fn dense_spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Normalized left null vector of `A − λI` via a bordered solve.
pub fn left_null_vector(m: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
    let n = m.nrows();
    let mut a = m.transpose() - DMatrix::identity(n, n) * lambda;
    let mut rhs = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let x = a.lu().solve(&rhs).expect("bordered system is nonsingular");
    let s: f64 = x.iter().sum();
    x / s
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Strictly positive random grid function with values in `[lo, hi]`.
pub fn random_positive(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `1 + 0.3·Σ_k (a_k c_k + b_k s_k)/k²` over three low modes: Fourier modes
/// on the torus, Neumann cosines `cos(kπx)` on the interval.
pub fn random_smooth(rng: &mut ChaCha8Rng, grid: &Grid) -> Vec<f64> {
    use std::f64::consts::PI;
    let modes: Vec<(f64, f64)> = (1..=3).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let periodic = grid.topology() == Topology::Torus;
    let l = grid.extent();
    (0..grid.len())
        .map(|i| {
            let [x, y] = grid.coords(i);
            let mut acc = 0.0;
            for (k, &(a, b)) in modes.iter().enumerate() {
                let k1 = (k + 1) as f64;
                acc += if periodic {
                    let w = 2.0 * PI * k1 / l;
                    a * (w * x).cos() + b * (w * (x + y)).sin()
                } else {
                    let w = PI * k1 / l;
                    a * (w * x).cos() + b * (w * x).cos().powi(2)
                } / (k1 * k1);
            }
            1.0 + 0.3 * acc
        })
        .collect()
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
