//! Hierarchical planning over ordered sub-goal tasks.
//!
//! The crate composes goal-conditioned, linearly-solvable control policies
//! through *jump operators*: every low-level policy is summarised by the
//! probability that it eventually reaches its goal state-action, and a task
//! policy is optimised over the small *grounded subspace* of
//! `(task state, current sub-goal location, next policy)` triples.
//!
//! The pieces, bottom-up:
//!
//! * [`base_space`]: finite deterministic worlds, passive dynamics and costs.
//! * [`salmdp`]: state-action LMDP solvers (power iteration and the
//!   nonlinear fixed-point map for stochastic state dynamics).
//! * [`jump_operator`]: absorption probabilities of policy-induced chains.
//! * [`ensemble`]: goal-conditioned policy ensembles and re-indexing.
//! * [`og_task`]: ordered-goal tasks, their transition and cost structure.
//! * [`feasibility`]: groundings, the feasibility matrix and the sparse
//!   grounded-subspace operator.
//! * [`tlmdp`]: the task-level solve, desirability-to-enter and rollouts.
//! * [`transfer`]: regrounding and grounding-invariance checks.
//! * [`baseline_oracle`]: brute-force reference solvers used for validation.
//! * [`bench`], [`render`], [`io`]: benchmark harness, trajectory rendering
//!   and file formats.
//!
//! Desirability values are carried in log space throughout (`log z = -v`).
//! Far-away state-actions on large grids have desirabilities far below the
//! smallest positive `f64`; the log representation keeps their values exact
//! while the iterations remain the linear power iterations they describe.

pub mod base_space;
pub mod baseline_oracle;
pub mod bench;
pub mod ensemble;
mod error;
pub mod feasibility;
pub mod instrument;
pub mod io;
pub mod jump_operator;
mod logspace;
pub mod og_task;
pub mod render;
pub mod salmdp;
pub mod sparse;
pub mod tlmdp;
pub mod transfer;

pub use error::{Error, Result};

/// Default interior state-action cost `c`.
pub const DEFAULT_COST: f64 = 10.0;

/// Default convergence tolerance of the iterative solvers.
pub const DEFAULT_EPS: f64 = 1e-10;
