//! Principal eigenpairs of risk-sensitive control semigroups on a grid.
//!
//! A controlled diffusion with running cost `r(x, v)` is discretized into a
//! family of Metzler matrices `A_v`, one per control. The nonlinear generator
//! takes the pointwise envelope `G f = min_v A_v f` (or `max`), and the
//! semigroup `S_t` it generates is monotone, positively homogeneous and
//! superadditive. This crate computes the principal eigenpair `G φ = ρ φ`
//! two ways, certifies it with Collatz–Wielandt and Donsker–Varadhan bounds,
//! and cross-checks `ρ` against a Monte Carlo estimate of the
//! risk-sensitive cost.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix `f64`.

// `!(x > 0)` is how NaN gets rejected alongside nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Stencil loops index several parallel arrays by node.
#![allow(clippy::needless_range_loop)]

pub mod cone;
pub mod eigensolver;
pub mod error;
pub mod expr;
pub mod generator;
pub mod matrix;
pub mod mc;
mod scalar;
pub mod semigroup;
pub mod variational;

pub use error::{Error, Result};
pub use expr::{parse, Expr, ExprError};
pub use generator::{build_generator, Grid, ProblemSpec, Sense, Topology};
pub use scalar::{sup_norm, Scalar};

pub type DiscreteGenerator = generator::DiscreteGenerator<f64>;
pub type DiscreteGeneratorF32 = generator::DiscreteGenerator<f32>;
pub type GridFunction = generator::GridFunction<f64>;
pub type NonnegMatrix = matrix::NonnegMatrix<f64>;
pub type PerronPair = matrix::PerronPair<f64>;
pub type EigenPair = eigensolver::EigenPair<f64>;
pub type EigenPairF32 = eigensolver::EigenPair<f32>;
pub type SolveOptions = eigensolver::SolveOptions<f64>;
pub type EvolveOptions = semigroup::EvolveOptions<f64>;
pub type OrbitStats = cone::OrbitStats<f64>;
pub type SandwichReport = variational::SandwichReport<f64>;
