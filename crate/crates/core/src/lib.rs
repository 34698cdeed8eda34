//! Network utility maximization: maximize `sum_i u_i(x_i)` over vertex
//! rates `x >= 0` subject to connection capacities `C x <= b`.
//!
//! Two solvers are provided. [`fgm`] runs an accelerated gradient method on
//! the smoothed dual (connection prices) and averages the vertices' best
//! responses. [`mirror`] runs randomized switching mirror descent on the
//! rates directly. [`simnet`] executes both as message-passing protocols
//! between vertex, connection and center agents, and [`harness`] generates
//! instances and drives experiments.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fgm;
pub mod harness;
pub mod mirror;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod simnet;
pub mod trace;

pub use error::{Error, Result};
pub use model::{IncidenceMatrix, Norm, ProblemInstance, QuadraticUtility, Utility};
pub use trace::{SolverTrace, StepType, TraceRow};
