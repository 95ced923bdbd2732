//! Monotone finite-difference discretization of the controlled generators.
//!
//! For each control `v` the operator `A_v = L_v + diag(r(·, v))` is stored
//! as a fixed-width stencil of nonnegative off-diagonal weights. The
//! diffusion term uses central second differences, the drift first-order
//! upwind differences. On an interval the zero-Neumann condition is imposed
//! by mirroring the ghost node; on a torus indices wrap. Cross-diffusion in
//! two dimensions uses the seven-point stencil oriented by the sign of
//! `a12`, which is monotone when `a` is diagonally dominant.
//!
//! Applications use the difference form `r_i f_i + Σ w_ij (f_j − f_i)`, so
//! constants are annihilated by `L_v` exactly.

use crate::error::{Error, Result};
use crate::expr::{self, Env, Expr, ExprError, Program};
use crate::matrix::NonnegOperator;
use crate::scalar::{min_max, sup_norm, Scalar};
use std::ops::{Deref, DerefMut};

pub const MIN_POINTS: usize = 8;
pub const MAX_CONTROLS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// `[0, extent]` with reflection at both ends; one dimension only.
    Interval,
    /// `[0, extent)^d` with periodic wrap, `d ∈ {1, 2}`.
    Torus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sense {
    #[default]
    Minimize,
    Maximize,
}

impl Sense {
    #[inline]
    pub(crate) fn better<T: Scalar>(self, a: T, b: T) -> bool {
        match self {
            Sense::Minimize => a < b,
            Sense::Maximize => a > b,
        }
    }

    #[inline]
    pub(crate) fn pick<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Sense::Minimize => a.min(b),
            Sense::Maximize => a.max(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    topology: Topology,
    dim: usize,
    n: usize,
    extent: f64,
    h: f64,
}

impl Grid {
    pub fn interval(n: usize, extent: f64) -> Result<Self> {
        Self::new(Topology::Interval, 1, n, extent)
    }

    pub fn torus(dim: usize, n: usize, extent: f64) -> Result<Self> {
        Self::new(Topology::Torus, dim, n, extent)
    }

    pub fn new(topology: Topology, dim: usize, n: usize, extent: f64) -> Result<Self> {
        if n < MIN_POINTS {
            return Err(Error::InvalidGrid(format!("n ≥ {MIN_POINTS} required, got {n}")));
        }
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(Error::InvalidGrid(format!("extent must be positive, got {extent}")));
        }
        match (topology, dim) {
            (Topology::Interval, 1) | (Topology::Torus, 1) | (Topology::Torus, 2) => {}
            (Topology::Interval, d) => {
                return Err(Error::InvalidGrid(format!("interval topology requires d = 1, got {d}")))
            }
            (Topology::Torus, d) => return Err(Error::InvalidGrid(format!("torus dimension must be 1 or 2, got {d}"))),
        }
        let h = match topology {
            Topology::Interval => extent / (n - 1) as f64,
            Topology::Torus => extent / n as f64,
        };
        Ok(Grid { topology, dim, n, extent, h })
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Points per axis.
    pub fn points_per_axis(&self) -> usize {
        self.n
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    /// Total node count, `n^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Axis indices of a node; `x1` varies fastest.
    pub fn axes(&self, node: usize) -> [usize; 2] {
        [node % self.n, node / self.n]
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        i + self.n * j
    }

    /// Coordinates of a node (unused trailing entries are zero).
    pub fn coords(&self, node: usize) -> [f64; 2] {
        let [i, j] = self.axes(node);
        if self.dim == 1 {
            [i as f64 * self.h, 0.0]
        } else {
            [i as f64 * self.h, j as f64 * self.h]
        }
    }

    /// Node closest to `x`; torus coordinates are wrapped first.
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let axis = |c: f64| -> usize {
            match self.topology {
                Topology::Interval => {
                    let k = (c.clamp(0.0, self.extent) / self.h).round() as usize;
                    k.min(self.n - 1)
                }
                Topology::Torus => {
                    let k = (c.rem_euclid(self.extent) / self.h).round() as usize;
                    k % self.n
                }
            }
        };
        if self.dim == 1 {
            axis(x[0])
        } else {
            self.node(axis(x[0]), axis(x[1]))
        }
    }

    fn step(&self, k: usize, delta: isize) -> usize {
        let n = self.n as isize;
        let k = k as isize + delta;
        match self.topology {
            Topology::Torus => k.rem_euclid(n) as usize,
            // mirror ghost nodes: −1 → 1, n → n − 2
            Topology::Interval => {
                if k < 0 {
                    (-k) as usize
                } else if k >= n {
                    (2 * (n - 1) - k) as usize
                } else {
                    k as usize
                }
            }
        }
    }

    /// Neighbor of `node` displaced by `(di, dj)` grid steps.
    pub fn neighbor(&self, node: usize, di: isize, dj: isize) -> usize {
        let [i, j] = self.axes(node);
        if self.dim == 1 {
            self.step(i, di)
        } else {
            self.node(self.step(i, di), self.step(j, dj))
        }
    }
}

/// A controlled diffusion on a grid: `σ(x)`, `b(x, v)`, `r(x, v)` and a
/// finite control set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub grid: Grid,
    /// Control values, each an `m`-vector bound to `v1..vm`.
    pub controls: Vec<Vec<f64>>,
    /// `σ(x)`, `d × d` row-major.
    pub sigma: Vec<Expr>,
    /// `b(x, v)`, length `d`.
    pub drift: Vec<Expr>,
    /// `r(x, v)`.
    pub cost: Expr,
    pub sense: Sense,
    /// Lower bound on the smallest eigenvalue of `a = σσᵀ`.
    pub eps_a: f64,
}

pub const DEFAULT_EPS_A: f64 = 1e-8;

impl ProblemSpec {
    /// Parse expression strings into a validated problem.
    pub fn parse(grid: Grid, sigma: &[&str], drift: &[&str], cost: &str, controls: Vec<Vec<f64>>) -> Result<Self> {
        let sigma = sigma.iter().map(|s| expr::parse(s)).collect::<Result<Vec<_>, _>>()?;
        let drift = drift.iter().map(|s| expr::parse(s)).collect::<Result<Vec<_>, _>>()?;
        let cost = expr::parse(cost)?;
        let spec = ProblemSpec { grid, controls, sigma, drift, cost, sense: Sense::Minimize, eps_a: DEFAULT_EPS_A };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_sense(mut self, sense: Sense) -> Self {
        self.sense = sense;
        self
    }

    pub fn control_dim(&self) -> usize {
        self.controls.first().map_or(0, Vec::len)
    }

    /// Structural checks; coefficient values are checked when sampled.
    pub fn validate(&self) -> Result<()> {
        let d = self.grid.dim();
        if self.controls.is_empty() {
            return Err(Error::InvalidProblem("control set is empty".into()));
        }
        if self.controls.len() > MAX_CONTROLS {
            return Err(Error::InvalidProblem(format!(
                "at most {MAX_CONTROLS} controls allowed, got {}",
                self.controls.len()
            )));
        }
        let m = self.control_dim();
        if self.controls.iter().any(|c| c.len() != m) {
            return Err(Error::InvalidProblem("controls must all have the same length".into()));
        }
        if self.controls.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidProblem("control values must be finite".into()));
        }
        if self.sigma.len() != d * d {
            return Err(Error::InvalidProblem(format!(
                "sigma needs {} entries for d = {d}, got {}",
                d * d,
                self.sigma.len()
            )));
        }
        if self.drift.len() != d {
            return Err(Error::InvalidProblem(format!("drift needs {d} components, got {}", self.drift.len())));
        }
        if !(self.eps_a > 0.0) {
            return Err(Error::InvalidProblem("eps_a must be positive".into()));
        }
        let check = |e: &Expr, what: &str, allow_control: bool| -> Result<()> {
            let (nx, nv) = e.arity();
            if nx > d {
                return Err(Error::InvalidProblem(format!("{what} uses x{nx} but d = {d}")));
            }
            if nv > 0 && !allow_control {
                return Err(Error::InvalidProblem(format!("{what} may not depend on the control")));
            }
            if nv > m {
                return Err(Error::InvalidProblem(format!("{what} uses v{nv} but controls have {m} components")));
            }
            Ok(())
        };
        for e in &self.sigma {
            check(e, "sigma", false)?;
        }
        for e in &self.drift {
            check(e, "drift", true)?;
        }
        check(&self.cost, "cost", true)
    }

    /// Postfix programs for pointwise evaluation off the grid.
    pub fn compile(&self) -> CompiledProblem {
        CompiledProblem {
            dim: self.grid.dim(),
            sigma: self.sigma.iter().map(Expr::compile).collect(),
            drift: self.drift.iter().map(Expr::compile).collect(),
            cost: self.cost.compile(),
        }
    }
}

/// Coefficient programs of a [`ProblemSpec`].
#[derive(Debug, Clone)]
pub struct CompiledProblem {
    dim: usize,
    sigma: Vec<Program>,
    drift: Vec<Program>,
    cost: Program,
}

impl CompiledProblem {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes `σ(x)` row-major into `out`.
    pub fn sigma(&self, x: &[f64], out: &mut [f64]) -> Result<(), ExprError> {
        let env = Env::new(x, &[]);
        for (o, p) in out.iter_mut().zip(&self.sigma) {
            *o = p.eval(&env)?;
        }
        Ok(())
    }

    pub fn drift(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> Result<(), ExprError> {
        let env = Env::new(x, v);
        for (o, p) in out.iter_mut().zip(&self.drift) {
            *o = p.eval(&env)?;
        }
        Ok(())
    }

    pub fn cost(&self, x: &[f64], v: &[f64]) -> Result<f64, ExprError> {
        self.cost.eval(&Env::new(x, v))
    }
}

/// Coefficients sampled at grid nodes, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTables {
    /// `a = σσᵀ` per node, `d × d` row-major.
    pub diffusion: Vec<f64>,
    /// Per control, per node, `d` components.
    pub drift: Vec<Vec<f64>>,
    /// Per control, per node.
    pub cost: Vec<Vec<f64>>,
}

impl CoefficientTables {
    pub fn sample(spec: &ProblemSpec) -> Result<Self> {
        spec.validate()?;
        let grid = &spec.grid;
        let d = grid.dim();
        let nodes = grid.len();
        let prog = spec.compile();
        let mut diffusion = vec![0.0; nodes * d * d];
        let mut sig = vec![0.0; d * d];
        let mut drift = vec![vec![0.0; nodes * d]; spec.controls.len()];
        let mut cost = vec![vec![0.0; nodes]; spec.controls.len()];
        let nonfinite = |what: &'static str, node: usize, control: usize| {
            move |e: ExprError| match e {
                ExprError::Eval { .. } => Error::NonFiniteCoefficient { what, node, control },
                other => Error::Expr(other),
            }
        };
        for node in 0..nodes {
            let x = &grid.coords(node)[..d];
            prog.sigma(x, &mut sig).map_err(nonfinite("sigma", node, 0))?;
            for i in 0..d {
                for j in 0..d {
                    diffusion[node * d * d + i * d + j] = (0..d).map(|k| sig[i * d + k] * sig[j * d + k]).sum();
                }
            }
            for (c, v) in spec.controls.iter().enumerate() {
                prog.drift(x, v, &mut drift[c][node * d..(node + 1) * d]).map_err(nonfinite("drift", node, c))?;
                cost[c][node] = prog.cost(x, v).map_err(nonfinite("cost", node, c))?;
            }
        }
        Ok(CoefficientTables { diffusion, drift, cost })
    }
}

/// Values over grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction<T>(pub Vec<T>);

impl<T: Scalar> GridFunction<T> {
    pub fn constant(len: usize, c: T) -> Self {
        GridFunction(vec![c; len])
    }

    pub fn ones(len: usize) -> Self {
        Self::constant(len, T::one())
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        GridFunction((0..grid.len()).map(|k| T::of(f(grid.coords(k)))).collect())
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    /// Index of the first entry that is not strictly positive and finite.
    pub fn first_nonpositive(&self) -> Option<usize> {
        self.0.iter().position(|&x| !(x > T::zero()) || !x.is_finite())
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.first_nonpositive().is_none()
    }

    pub fn sup_norm(&self) -> T {
        sup_norm(&self.0)
    }

    pub fn min_max(&self) -> (T, T) {
        min_max(&self.0)
    }

    pub fn scaled(&self, c: T) -> Self {
        GridFunction(self.0.iter().map(|&x| x * c).collect())
    }

    /// Copy rescaled to sup norm 1.
    pub fn normalized(&self) -> Self {
        self.scaled(T::one() / self.sup_norm())
    }
}

impl<T> Deref for GridFunction<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for GridFunction<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

impl<T> From<Vec<T>> for GridFunction<T> {
    fn from(v: Vec<T>) -> Self {
        GridFunction(v)
    }
}

/// Per-control monotone operators `A_v = L_v + diag(r_v)` on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteGenerator<T> {
    grid: Grid,
    sense: Sense,
    width: usize,
    cols: Vec<usize>,
    /// per control, `nodes × width` nonnegative weights
    weights: Vec<Vec<T>>,
    /// per control, `Σ_j w_ij` (so the diagonal of `L_v` is `−outflow`)
    outflow: Vec<Vec<T>>,
    cost: Vec<Vec<T>>,
    diffusion: Vec<T>,
    dt_max: T,
    cost_abs_max: T,
}

/// Sample `spec` and discretize it.
pub fn build_generator<T: Scalar>(spec: &ProblemSpec) -> Result<DiscreteGenerator<T>> {
    let tables = CoefficientTables::sample(spec)?;
    DiscreteGenerator::from_tables(spec.grid, spec.sense, &tables, spec.eps_a)
}

impl<T: Scalar> DiscreteGenerator<T> {
    pub fn from_tables(grid: Grid, sense: Sense, tables: &CoefficientTables, eps_a: f64) -> Result<Self> {
        let d = grid.dim();
        let nodes = grid.len();
        let nc = tables.cost.len();
        if nc == 0 || tables.drift.len() != nc {
            return Err(Error::InvalidProblem("tables need at least one control".into()));
        }
        if tables.diffusion.len() != nodes * d * d {
            return Err(Error::DimensionMismatch { expected: nodes * d * d, got: tables.diffusion.len() });
        }
        for c in 0..nc {
            if tables.cost[c].len() != nodes || tables.drift[c].len() != nodes * d {
                return Err(Error::DimensionMismatch { expected: nodes, got: tables.cost[c].len() });
            }
        }
        for node in 0..nodes {
            let a = &tables.diffusion[node * d * d..(node + 1) * d * d];
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteCoefficient { what: "diffusion", node, control: 0 });
            }
            let min_eig = if d == 1 {
                a[0]
            } else {
                let (p, q, s) = (a[0], a[3], 0.5 * (a[1] + a[2]));
                0.5 * (p + q) - (0.25 * (p - q) * (p - q) + s * s).sqrt()
            };
            if !(min_eig >= eps_a) {
                return Err(Error::DegenerateDiffusion { node, min_eig, eps_a });
            }
            if d == 2 {
                let s = 0.5 * (a[1] + a[2]);
                if a[0] < s.abs() || a[3] < s.abs() {
                    return Err(Error::NonMonotoneStencil { node });
                }
            }
            for c in 0..nc {
                if !tables.cost[c][node].is_finite() {
                    return Err(Error::NonFiniteCoefficient { what: "cost", node, control: c });
                }
                if tables.drift[c][node * d..(node + 1) * d].iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteCoefficient { what: "drift", node, control: c });
                }
            }
        }

        let h = grid.spacing();
        let h2 = h * h;
        let width = if d == 1 { 2 } else { 6 };
        let mut cols = vec![0usize; nodes * width];
        let mut weights = vec![vec![T::zero(); nodes * width]; nc];
        for node in 0..nodes {
            let a = &tables.diffusion[node * d * d..(node + 1) * d * d];
            let row = &mut cols[node * width..(node + 1) * width];
            if d == 1 {
                row[0] = grid.neighbor(node, -1, 0);
                row[1] = grid.neighbor(node, 1, 0);
                let diff = 0.5 * a[0] / h2;
                for c in 0..nc {
                    let b = tables.drift[c][node];
                    let w = &mut weights[c][node * width..(node + 1) * width];
                    w[0] = T::of(diff + (-b).max(0.0) / h);
                    w[1] = T::of(diff + b.max(0.0) / h);
                }
            } else {
                let a12 = 0.5 * (a[1] + a[2]);
                row[0] = grid.neighbor(node, 1, 0);
                row[1] = grid.neighbor(node, -1, 0);
                row[2] = grid.neighbor(node, 0, 1);
                row[3] = grid.neighbor(node, 0, -1);
                if a12 >= 0.0 {
                    row[4] = grid.neighbor(node, 1, 1);
                    row[5] = grid.neighbor(node, -1, -1);
                } else {
                    row[4] = grid.neighbor(node, -1, 1);
                    row[5] = grid.neighbor(node, 1, -1);
                }
                let dx = 0.5 * (a[0] - a12.abs()) / h2;
                let dy = 0.5 * (a[3] - a12.abs()) / h2;
                let dxy = 0.5 * a12.abs() / h2;
                for c in 0..nc {
                    let b = &tables.drift[c][node * 2..node * 2 + 2];
                    let w = &mut weights[c][node * width..(node + 1) * width];
                    w[0] = T::of(dx + b[0].max(0.0) / h);
                    w[1] = T::of(dx + (-b[0]).max(0.0) / h);
                    w[2] = T::of(dy + b[1].max(0.0) / h);
                    w[3] = T::of(dy + (-b[1]).max(0.0) / h);
                    w[4] = T::of(dxy);
                    w[5] = T::of(dxy);
                }
            }
        }
        let outflow: Vec<Vec<T>> =
            weights.iter().map(|w| w.chunks(width).map(|r| r.iter().copied().sum()).collect()).collect();
        let cost: Vec<Vec<T>> = tables.cost.iter().map(|r| r.iter().map(|&x| T::of(x)).collect()).collect();
        let cost_abs_max = cost.iter().flatten().fold(T::zero(), |m, x| m.max(x.abs()));
        let mut worst = T::zero();
        for c in 0..nc {
            for node in 0..nodes {
                worst = worst.max(outflow[c][node] + cost[c][node].abs());
            }
        }
        let dt_max = T::one() / worst;
        let diffusion = tables.diffusion.iter().map(|&x| T::of(x)).collect();
        Ok(DiscreteGenerator { grid, sense, width, cols, weights, outflow, cost, diffusion, dt_max, cost_abs_max })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    /// Same operators, other optimization sense.
    pub fn with_sense(&self, sense: Sense) -> Self {
        let mut g = self.clone();
        g.sense = sense;
        g
    }

    pub fn nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn num_controls(&self) -> usize {
        self.cost.len()
    }

    /// Largest explicit-Euler step that keeps `I + dt A_v` nonnegative for
    /// every control: `1 / max_{v,i} (Σ_j w_ij + |r_i|)`.
    pub fn dt_max(&self) -> T {
        self.dt_max
    }

    /// `max_{x,v} |r(x, v)|`
    pub fn cost_abs_max(&self) -> T {
        self.cost_abs_max
    }

    pub fn cost(&self, v: usize) -> &[T] {
        &self.cost[v]
    }

    /// `a(x)` at a node, `d × d` row-major.
    pub fn diffusion(&self, node: usize) -> &[T] {
        let d = self.grid.dim();
        &self.diffusion[node * d * d..(node + 1) * d * d]
    }

    /// Stencil width (neighbor slots per node).
    pub fn width(&self) -> usize {
        self.width
    }

    /// Neighbor node indices of `node`.
    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.cols[node * self.width..(node + 1) * self.width]
    }

    /// Off-diagonal weights of `L_v` at `node`, aligned with [`Self::neighbors`].
    pub fn weights(&self, v: usize, node: usize) -> &[T] {
        &self.weights[v][node * self.width..(node + 1) * self.width]
    }

    /// `Σ_j w_ij`: minus the diagonal of `L_v`.
    pub fn outflow(&self, v: usize, node: usize) -> T {
        self.outflow[v][node]
    }

    fn check_fn(&self, f: &[T]) -> Result<()> {
        if f.len() != self.nodes() {
            return Err(Error::DimensionMismatch { expected: self.nodes(), got: f.len() });
        }
        Ok(())
    }

    fn check_control(&self, v: usize) -> Result<()> {
        if v >= self.num_controls() {
            return Err(Error::IndexOutOfRange { index: v, len: self.num_controls() });
        }
        Ok(())
    }

    /// `(L_v f)(node)` without the cost term.
    #[inline]
    pub fn transport_at(&self, v: usize, f: &[T], node: usize) -> T {
        let fi = f[node];
        let base = node * self.width;
        let mut acc = T::zero();
        for k in 0..self.width {
            acc = acc + self.weights[v][base + k] * (f[self.cols[base + k]] - fi);
        }
        acc
    }

    /// `((L_v + r_v) f)(node)`
    #[inline]
    pub fn linear_at(&self, v: usize, f: &[T], node: usize) -> T {
        self.cost[v][node] * f[node] + self.transport_at(v, f, node)
    }

    /// `(L_v + diag(r_v)) f`
    pub fn apply_linear(&self, v: usize, f: &[T]) -> Result<GridFunction<T>> {
        self.check_control(v)?;
        self.check_fn(f)?;
        Ok(GridFunction((0..self.nodes()).map(|i| self.linear_at(v, f, i)).collect()))
    }

    /// `(G f)(node)` for a given sense.
    #[inline]
    pub fn envelope_at(&self, sense: Sense, f: &[T], node: usize) -> T {
        let mut best = self.linear_at(0, f, node);
        for v in 1..self.num_controls() {
            best = sense.pick(best, self.linear_at(v, f, node));
        }
        best
    }

    /// `G f`: pointwise min (or max, per the generator's sense) over controls.
    pub fn apply_g(&self, f: &[T]) -> Result<GridFunction<T>> {
        self.check_fn(f)?;
        Ok(GridFunction((0..self.nodes()).map(|i| self.envelope_at(self.sense, f, i)).collect()))
    }

    /// Per-node index of the optimizing control; ties go to the lowest index.
    pub fn argmin_policy(&self, f: &[T]) -> Result<Vec<usize>> {
        self.check_fn(f)?;
        Ok((0..self.nodes())
            .map(|i| {
                let mut best = 0;
                let mut val = self.linear_at(0, f, i);
                for v in 1..self.num_controls() {
                    let x = self.linear_at(v, f, i);
                    if self.sense.better(x, val) {
                        best = v;
                        val = x;
                    }
                }
                best
            })
            .collect())
    }

    /// Policy update that keeps the previous control unless another one
    /// improves on it by more than `rel_tol` of the row scale.
    pub fn improve_policy(&self, f: &[T], prev: &[usize], rel_tol: T) -> Result<Vec<usize>> {
        self.check_fn(f)?;
        if prev.len() != self.nodes() {
            return Err(Error::DimensionMismatch { expected: self.nodes(), got: prev.len() });
        }
        let greedy = self.argmin_policy(f)?;
        Ok((0..self.nodes())
            .map(|i| {
                let p = prev[i];
                let g = greedy[i];
                if p == g {
                    return p;
                }
                let vp = self.linear_at(p, f, i);
                let vg = self.linear_at(g, f, i);
                let scale = (self.outflow[p][i] + self.cost[p][i].abs()) * f[i].abs()
                    + self.weights(p, i).iter().zip(self.neighbors(i)).map(|(&w, &j)| w * f[j].abs()).sum::<T>();
                if (vp - vg).abs() <= rel_tol * scale {
                    p
                } else {
                    g
                }
            })
            .collect())
    }

    /// `(L_u + r_u) f` under a per-node policy.
    pub fn apply_policy(&self, policy: &[usize], f: &[T]) -> Result<GridFunction<T>> {
        self.check_fn(f)?;
        if policy.len() != self.nodes() {
            return Err(Error::DimensionMismatch { expected: self.nodes(), got: policy.len() });
        }
        if let Some(&v) = policy.iter().find(|&&v| v >= self.num_controls()) {
            return Err(Error::IndexOutOfRange { index: v, len: self.num_controls() });
        }
        Ok(GridFunction(policy.iter().enumerate().map(|(i, &v)| self.linear_at(v, f, i)).collect()))
    }

    /// Dense row-major `A_v` (for inspection and small oracles).
    pub fn dense(&self, v: usize) -> Result<Vec<T>> {
        self.check_control(v)?;
        let n = self.nodes();
        let mut m = vec![T::zero(); n * n];
        for i in 0..n {
            m[i * n + i] = self.cost[v][i] - self.outflow[v][i];
            for (k, &j) in self.neighbors(i).iter().enumerate() {
                m[i * n + j] = m[i * n + j] + self.weights(v, i)[k];
            }
        }
        Ok(m)
    }

    /// `c I + A_u` as a nonnegative operator.
    ///
    /// `c` is twice the smallest shift that makes the diagonal nonnegative.
    /// On a bipartite grid the minimal shift leaves the checkerboard mode of
    /// `c I + A_u` near `−(c + ρ)`, so power iteration nearly oscillates and
    /// rounding keeps that mode alive; doubling puts it near zero.
    pub fn shifted_policy_operator(&self, policy: &[usize]) -> Result<PolicyOperator<'_, T>> {
        if policy.len() != self.nodes() {
            return Err(Error::DimensionMismatch { expected: self.nodes(), got: policy.len() });
        }
        if let Some(&v) = policy.iter().find(|&&v| v >= self.num_controls()) {
            return Err(Error::IndexOutOfRange { index: v, len: self.num_controls() });
        }
        let diag_max = policy
            .iter()
            .enumerate()
            .map(|(i, &v)| (self.cost[v][i] - self.outflow[v][i]).abs())
            .fold(T::zero(), T::max);
        Ok(PolicyOperator { gen: self, policy: policy.to_vec(), shift: T::two() * (diag_max + self.cost_abs_max) })
    }
}

/// `shift·I + A_u` for a fixed per-node policy `u`.
#[derive(Debug, Clone)]
pub struct PolicyOperator<'a, T> {
    gen: &'a DiscreteGenerator<T>,
    policy: Vec<usize>,
    shift: T,
}

impl<T: Scalar> PolicyOperator<'_, T> {
    pub fn shift(&self) -> T {
        self.shift
    }

    pub fn policy(&self) -> &[usize] {
        &self.policy
    }

    /// Explicit transpose, for left eigenvectors.
    pub fn transpose(&self) -> SparseOperator<T> {
        let g = self.gen;
        let n = g.nodes();
        let mut rows: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        let mut diag = vec![T::zero(); n];
        for (i, &v) in self.policy.iter().enumerate() {
            diag[i] = self.shift + g.cost[v][i] - g.outflow[v][i];
            for (k, &j) in g.neighbors(i).iter().enumerate() {
                let w = g.weights(v, i)[k];
                if j == i {
                    diag[i] = diag[i] + w;
                } else if w > T::zero() {
                    rows[j].push((i, w));
                }
            }
        }
        SparseOperator { diag, rows }
    }
}

impl<T: Scalar> NonnegOperator<T> for PolicyOperator<'_, T> {
    fn dim(&self) -> usize {
        self.gen.nodes()
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.shift * x[i] + self.gen.linear_at(self.policy[i], x, i);
        }
    }

    fn row_support(&self, i: usize, f: &mut dyn FnMut(usize)) {
        let v = self.policy[i];
        for (k, &j) in self.gen.neighbors(i).iter().enumerate() {
            if self.gen.weights(v, i)[k] > T::zero() {
                f(j);
            }
        }
    }
}

/// Row-compressed nonnegative operator with an explicit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator<T> {
    diag: Vec<T>,
    rows: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> NonnegOperator<T> for SparseOperator<T> {
    fn dim(&self) -> usize {
        self.diag.len()
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.rows[i].iter().fold(self.diag[i] * x[i], |acc, &(j, w)| acc + w * x[j]);
        }
    }

    fn row_support(&self, i: usize, f: &mut dyn FnMut(usize)) {
        for &(j, w) in &self.rows[i] {
            if w > T::zero() {
                f(j);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn torus1(n: usize, sigma: &str, drift: &str, cost: &str, controls: Vec<Vec<f64>>) -> DiscreteGenerator<f64> {
        let spec = ProblemSpec::parse(Grid::torus(1, n, 1.0).unwrap(), &[sigma], &[drift], cost, controls).unwrap();
        build_generator(&spec).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(matches!(Grid::interval(4, 1.0), Err(Error::InvalidGrid(_))));
        assert!(matches!(Grid::new(Topology::Interval, 2, 16, 1.0), Err(Error::InvalidGrid(_))));
        assert!(matches!(Grid::torus(3, 16, 1.0), Err(Error::InvalidGrid(_))));
        assert_eq!(Grid::interval(11, 1.0).unwrap().spacing(), 0.1);
        assert_eq!(Grid::torus(2, 16, 1.0).unwrap().len(), 256);
    }

    #[test]
    fn interval_mirror_neighbors() {
        let g = Grid::interval(10, 1.0).unwrap();
        assert_eq!(g.neighbor(0, -1, 0), 1);
        assert_eq!(g.neighbor(9, 1, 0), 8);
        let t = Grid::torus(2, 8, 1.0).unwrap();
        assert_eq!(t.neighbor(t.node(0, 0), -1, -1), t.node(7, 7));
    }

    #[test]
    fn laplacian_rows() {
        let g = torus1(64, "1", "0", "0", vec![vec![0.0]]);
        let h = 1.0 / 64.0;
        let m = g.dense(0).unwrap();
        for i in 0..64 {
            let l = (i + 63) % 64;
            let r = (i + 1) % 64;
            assert_eq!(m[i * 64 + l], 1.0 / (2.0 * h * h));
            assert_eq!(m[i * 64 + r], 1.0 / (2.0 * h * h));
            assert_eq!(m[i * 64 + i], -1.0 / (h * h));
        }
    }

    #[test]
    fn constants_annihilated() {
        let g = torus1(32, "0.3 + 0.1*sin(2*pi*x1)", "cos(2*pi*x1)*v1", "0", vec![vec![-1.0], vec![2.0]]);
        for v in 0..2 {
            let out = g.apply_linear(v, &[3.5; 32]).unwrap();
            assert!(out.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn cosine_laplacian_second_order() {
        let err = |n: usize| {
            let g = torus1(n, "1", "0", "0", vec![vec![0.0]]);
            let f = GridFunction::<f64>::from_fn(g.grid(), |x| (2.0 * PI * x[0]).cos());
            let out = g.apply_linear(0, &f).unwrap();
            (0..n)
                .map(|i| {
                    let x = g.grid().coords(i)[0];
                    (out[i] + 2.0 * PI * PI * (2.0 * PI * x).cos()).abs()
                })
                .fold(0.0, f64::max)
        };
        let e1 = err(32);
        let e2 = err(64);
        assert!(e1 < 2.0 * PI.powi(4) / (3.0 * 32.0 * 32.0));
        let ratio = e1 / e2;
        assert!((3.8..4.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn interval_neumann_cosine() {
        let spec = ProblemSpec::parse(Grid::interval(65, 1.0).unwrap(), &["1"], &["0"], "0", vec![vec![0.0]]).unwrap();
        let g: DiscreteGenerator<f64> = build_generator(&spec).unwrap();
        let f = GridFunction::<f64>::from_fn(g.grid(), |x| (PI * x[0]).cos());
        let out = g.apply_linear(0, &f).unwrap();
        let h = g.grid().spacing();
        for i in 0..65 {
            let x = g.grid().coords(i)[0];
            let exact = -0.5 * PI * PI * (PI * x).cos();
            assert!((out[i] - exact).abs() < PI.powi(4) * h * h / 24.0 + 1e-12, "node {i}");
        }
    }

    #[test]
    fn upwind_drift_on_linear_function() {
        let spec =
            ProblemSpec::parse(Grid::interval(33, 1.0).unwrap(), &["1e-3"], &["1"], "0", vec![vec![0.0]]).unwrap();
        let g: DiscreteGenerator<f64> = build_generator(&spec).unwrap();
        let f = GridFunction::<f64>::from_fn(g.grid(), |x| x[0]);
        let out = g.apply_linear(0, &f).unwrap();
        for i in 1..32 {
            assert!((out[i] - 1.0).abs() < 1e-9, "node {i}: {}", out[i]);
        }
    }

    #[test]
    fn envelope_and_policy() {
        let spec =
            ProblemSpec::parse(Grid::interval(33, 1.0).unwrap(), &["0.01"], &["v1"], "0", vec![vec![1.0], vec![-1.0]])
                .unwrap();
        let g: DiscreteGenerator<f64> = build_generator(&spec).unwrap();
        let f = GridFunction::<f64>::from_fn(g.grid(), |x| x[0]);
        let gf = g.apply_g(&f).unwrap();
        for i in 1..32 {
            assert!((gf[i] + 1.0).abs() < 1e-9);
        }
        let pol = g.argmin_policy(&f).unwrap();
        assert!(pol[1..32].iter().all(|&p| p == 1));
        assert_eq!(g.apply_policy(&pol, &f).unwrap(), gf);
    }

    #[test]
    fn policy_prefers_cheap_control() {
        let spec = ProblemSpec::parse(
            Grid::torus(1, 16, 1.0).unwrap(),
            &["1"],
            &["sin(2*pi*x1)"],
            "v1^2",
            vec![vec![0.0], vec![1.0]],
        )
        .unwrap();
        let g: DiscreteGenerator<f64> = build_generator(&spec).unwrap();
        let ones = vec![1.0; 16];
        assert!(g.argmin_policy(&ones).unwrap().iter().all(|&p| p == 0));
        assert_eq!(g.apply_g(&ones).unwrap().0, vec![0.0; 16]);
        let single = torus1(16, "1", "0", "x1", vec![vec![0.0]]);
        assert!(single.argmin_policy(&ones).unwrap().iter().all(|&p| p == 0));
    }

    #[test]
    fn metzler_and_cfl() {
        let g = torus1(32, "0.5", "3*sin(2*pi*x1)*v1", "cos(2*pi*x1)", vec![vec![-1.0], vec![1.0]]);
        for v in 0..2 {
            let m = g.dense(v).unwrap();
            for i in 0..32 {
                for j in 0..32 {
                    if i != j {
                        assert!(m[i * 32 + j] >= 0.0);
                    }
                }
                assert!(1.0 + g.dt_max() * m[i * 32 + i] >= -1e-15);
            }
        }
    }

    #[test]
    fn degenerate_and_nonfinite() {
        let grid = Grid::torus(1, 16, 1.0).unwrap();
        let spec = ProblemSpec::parse(grid, &["x1"], &["0"], "0", vec![vec![0.0]]).unwrap();
        assert!(matches!(build_generator::<f64>(&spec), Err(Error::DegenerateDiffusion { node: 0, .. })));
        let spec = ProblemSpec::parse(grid, &["1"], &["0"], "log(x1)", vec![vec![0.0]]).unwrap();
        assert!(matches!(
            build_generator::<f64>(&spec),
            Err(Error::NonFiniteCoefficient { what: "cost", node: 0, .. })
        ));
        assert!(matches!(
            ProblemSpec::parse(grid, &["v1"], &["0"], "0", vec![vec![0.0]]),
            Err(Error::InvalidProblem(_))
        ));
        assert!(matches!(
            ProblemSpec::parse(grid, &["1"], &["0"], "x2", vec![vec![0.0]]),
            Err(Error::InvalidProblem(_))
        ));
        assert!(matches!(ProblemSpec::parse(grid, &["1"], &["0"], "0", vec![]), Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn cross_diffusion_monotonicity() {
        let grid = Grid::torus(2, 8, 1.0).unwrap();
        let ok = ProblemSpec::parse(grid, &["1", "0.3", "0.3", "1"], &["0", "0"], "0", vec![vec![0.0]]).unwrap();
        let g: DiscreteGenerator<f64> = build_generator(&ok).unwrap();
        assert!(g.apply_linear(0, &vec![2.0; 64]).unwrap().iter().all(|&x| x == 0.0));
        let bad = ProblemSpec::parse(grid, &["1", "0.9", "0", "0.5"], &["0", "0"], "0", vec![vec![0.0]]).unwrap();
        assert!(matches!(build_generator::<f64>(&bad), Err(Error::NonMonotoneStencil { .. })));
    }

    #[test]
    fn apply_errors() {
        let g = torus1(16, "1", "0", "0", vec![vec![0.0]]);
        assert!(matches!(g.apply_linear(1, &[0.0; 16]), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(g.apply_g(&[0.0; 15]), Err(Error::DimensionMismatch { .. })));
    }
}
