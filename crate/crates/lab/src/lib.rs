//! Numerical laboratory for interval maps with an indifferent fixed point.
//!
//! The crate is organised around the inducing construction for maps that are
//! expanding everywhere except at a neutral fixed point at the origin:
//!
//! * [`tail`] — return-time laws `{p_n}` with optional analytic power tails;
//! * [`renewal`] — exact renewal-sequence arithmetic, generating functions,
//!   moments and ergodic-degree classification;
//! * [`fit`] — log-log exponent fitting used to turn `~ n^d` statements into
//!   measurable slopes;
//! * [`map`] — the two-branch interval map family, its inverse branches,
//!   first-passage structure and induced map;
//! * [`grid`] — piecewise-linear functions on a uniform grid and exact
//!   sub-cell quadrature;
//! * [`operator`] — truncated induced transfer operators, their leading
//!   eigendata, pressure and the sigma-finite invariant density;
//! * [`markov`] — the exactly solvable renewal Markov chain used as a
//!   cross-validation reference, with a seeded Monte Carlo simulator;
//! * [`mixing`] — return densities, scaling/mixing rates, cylinder sums and
//!   observable correlations;
//! * [`zeta`] — periodic-orbit partition functions and the two-variable zeta
//!   function.

pub mod error;
pub mod fit;
pub mod grid;
pub mod map;
pub mod markov;
pub mod mixing;
pub mod operator;
pub mod renewal;
pub mod rng;
pub mod tail;
pub mod zeta;

pub use error::{LabError, Result};
