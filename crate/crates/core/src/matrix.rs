//! Perron–Frobenius machinery for irreducible nonnegative operators.
//!
//! [`perron`] runs sup-normalized power iteration and brackets the Perron
//! root between the Collatz–Wielandt functionals [`cw_lower`] and
//! [`cw_upper`] of the current iterate. Any [`NonnegOperator`] works; the
//! dense [`NonnegMatrix`] is the reference implementation and the eigensolver
//! supplies a sparse shifted generator.

use crate::error::{Error, Result};
use crate::scalar::{sup_norm, Scalar};
use std::collections::VecDeque;

/// A square linear map with nonnegative matrix entries.
pub trait NonnegOperator<T: Scalar> {
    fn dim(&self) -> usize;

    /// `out = Q x`
    fn apply(&self, x: &[T], out: &mut [T]);

    /// Calls `f(j)` for every column `j` with `Q[i][j] > 0`.
    fn row_support(&self, i: usize, f: &mut dyn FnMut(usize));
}

/// Dense row-major nonnegative matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NonnegMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> NonnegMatrix<T> {
    pub fn new(n: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: data.len() });
        }
        if n == 0 {
            return Err(Error::ZeroVector);
        }
        for (k, &x) in data.iter().enumerate() {
            if !(x >= T::zero()) || !x.is_finite() {
                return Err(Error::NegativeEntry { row: k / n, col: k % n });
            }
        }
        Ok(NonnegMatrix { n, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(n, data)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// `self + c I`
    pub fn shifted(&self, c: T) -> Result<Self> {
        let mut data = self.data.clone();
        for i in 0..self.n {
            data[i * self.n + i] = data[i * self.n + i] + c;
        }
        Self::new(self.n, data)
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        NonnegMatrix { n, data }
    }
}

impl<T: Scalar> NonnegOperator<T> for NonnegMatrix<T> {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            *o = row.iter().zip(x).map(|(&a, &b)| a * b).sum();
        }
    }

    fn row_support(&self, i: usize, f: &mut dyn FnMut(usize)) {
        for j in 0..self.n {
            if self.data[i * self.n + j] > T::zero() {
                f(j);
            }
        }
    }
}

/// Strong connectivity of the support graph: one forward and one backward
/// breadth-first pass from node 0.
pub fn is_irreducible<T: Scalar, Q: NonnegOperator<T> + ?Sized>(q: &Q) -> bool {
    let n = q.dim();
    if n == 1 {
        return true;
    }
    let mut fwd: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut bwd: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        q.row_support(i, &mut |j| {
            if i != j {
                fwd[i].push(j);
                bwd[j].push(i);
            }
        });
    }
    let reaches_all = |adj: &[Vec<usize>]| {
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == n
    };
    reaches_all(&fwd) && reaches_all(&bwd)
}

/// `min_{i : x_i > 0} (Qx)_i / x_i`
pub fn cw_lower<T: Scalar, Q: NonnegOperator<T> + ?Sized>(q: &Q, x: &[T]) -> Result<T> {
    check_len(q.dim(), x.len())?;
    if let Some(i) = x.iter().position(|&v| v < T::zero() || !v.is_finite()) {
        return Err(Error::NonPositiveVector { index: i });
    }
    if x.iter().all(|&v| v == T::zero()) {
        return Err(Error::ZeroVector);
    }
    let mut qx = vec![T::zero(); x.len()];
    q.apply(x, &mut qx);
    Ok(x.iter().zip(&qx).filter(|(&xi, _)| xi > T::zero()).fold(T::infinity(), |m, (&xi, &yi)| m.min(yi / xi)))
}

/// `max_i (Qx)_i / x_i` for strictly positive `x`.
pub fn cw_upper<T: Scalar, Q: NonnegOperator<T> + ?Sized>(q: &Q, x: &[T]) -> Result<T> {
    check_len(q.dim(), x.len())?;
    if let Some(i) = x.iter().position(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::NonPositiveVector { index: i });
    }
    let mut qx = vec![T::zero(); x.len()];
    q.apply(x, &mut qx);
    Ok(x.iter().zip(&qx).fold(T::neg_infinity(), |m, (&xi, &yi)| m.max(yi / xi)))
}

fn check_len(n: usize, got: usize) -> Result<()> {
    if n != got {
        Err(Error::DimensionMismatch { expected: n, got })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerronPair<T> {
    /// Perron root, taken as the Collatz–Wielandt upper bound at `vector`.
    pub lambda: T,
    /// Collatz–Wielandt lower bound at `vector`.
    pub lower: T,
    /// Strictly positive, sup norm 1.
    pub vector: Vec<T>,
    pub iterations: usize,
}

/// Perron pair of an irreducible nonnegative operator, starting from `1`.
///
/// Stops once `cw_upper - cw_lower <= tol * cw_upper`, which bounds
/// `‖Qx − λx‖∞ ≤ tol·λ`. A periodic operator never meets this; the result
/// is [`Error::NoConvergence`] and the caller should retry on `Q + I`.
pub fn perron<T: Scalar, Q: NonnegOperator<T> + ?Sized>(q: &Q, tol: T, max_iters: usize) -> Result<PerronPair<T>> {
    let start = vec![T::one(); q.dim()];
    perron_from(q, &start, tol, max_iters)
}

/// [`perron`] with a caller-supplied strictly positive start vector.
pub fn perron_from<T: Scalar, Q: NonnegOperator<T> + ?Sized>(
    q: &Q,
    start: &[T],
    tol: T,
    max_iters: usize,
) -> Result<PerronPair<T>> {
    let n = q.dim();
    check_len(n, start.len())?;
    if !(tol > T::zero()) {
        return Err(Error::InvalidOptions("tolerance must be positive".into()));
    }
    if !is_irreducible(q) {
        return Err(Error::NotIrreducible);
    }
    if let Some(i) = start.iter().position(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::NonPositiveVector { index: i });
    }
    let norm = sup_norm(start);
    let mut x: Vec<T> = start.iter().map(|&v| v / norm).collect();
    let mut qx = vec![T::zero(); n];
    for it in 0..max_iters {
        q.apply(&x, &mut qx);
        let (mut lo, mut hi) = (T::infinity(), T::neg_infinity());
        for (&a, &b) in x.iter().zip(&qx) {
            let r = b / a;
            lo = lo.min(r);
            hi = hi.max(r);
        }
        if hi - lo <= tol * hi {
            return Ok(PerronPair { lambda: hi, lower: lo, vector: x, iterations: it });
        }
        let s = sup_norm(&qx);
        if !(s > T::zero()) || !s.is_finite() {
            return Err(Error::NoConvergence { iterations: it });
        }
        // rows of an irreducible operator are nonzero, so x stays positive
        for (a, &b) in x.iter_mut().zip(&qx) {
            *a = b / s;
        }
    }
    Err(Error::NoConvergence { iterations: max_iters })
}

/// [`perron`] on `Q + I` when plain iteration does not settle; the shift is
/// subtracted from both bounds.
pub fn perron_shifted<T: Scalar>(m: &NonnegMatrix<T>, tol: T, max_iters: usize) -> Result<PerronPair<T>> {
    match perron(m, tol, max_iters) {
        Err(Error::NoConvergence { .. }) => {
            let mut p = perron(&m.shifted(T::one())?, tol, max_iters)?;
            p.lambda = p.lambda - T::one();
            p.lower = p.lower - T::one();
            Ok(p)
        }
        other => other,
    }
}
