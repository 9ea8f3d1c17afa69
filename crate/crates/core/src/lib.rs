//! Quasi-Newton solvers built on the modified BFGS update, in three flavors:
//! a full-memory dense method, a limited-memory method, and a limited-memory
//! method with displacement aggregation that reproduces the full-memory
//! matrix whenever a stored iterate displacement becomes linearly dependent
//! on newer ones.
//!
//! The crate is organized around the pieces of that scheme:
//!
//! - [`linalg`]: dense triangular/SPD kernels, the Gram-factor maintenance
//!   that detects dependent displacements via Cholesky rank-one downdates,
//!   and QR-based null-space utilities.
//! - [`qn`]: curvature pairs with the modified gradient displacement,
//!   iterative and compact inverse-Hessian forms, the two-loop recursion,
//!   and dense direct-Hessian updates.
//! - [`aggregation`]: the displacement-aggregation transform that rewrites
//!   stored gradient displacements when a pair is dropped.
//! - [`solver`]: the Armijo backtracking outer loop and the three variants.
//! - [`problems`]: native test problems with analytic gradients.
//! - [`verify`]: randomized equivalence suites used by the CLI and tests.

pub mod aggregation;
pub mod linalg;
pub mod problems;
pub mod qn;
pub mod solver;
pub mod verify;

pub use problems::Problem;
pub use solver::{minimize, Objective, SolveResult, SolveStatus, SolverConfig, Variant};

