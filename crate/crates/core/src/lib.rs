//! Matrix-free cone programming with solvers expressed as computation graphs.
//!
//! - [`graph`]: DAG engine with a while-loop construct.
//! - [`linop`]: structured linear operators and their derived adjoints.
//! - [`cones`]: zero, nonnegative and second-order cones with projections.
//! - [`cg`]: conjugate gradient emitted as a graph.
//! - [`scs`]: operator-splitting cone solver built on the CG graph.
//! - [`canon`]: problem builders and data generators for regularized least
//!   squares, lasso and nonnegative deconvolution.

pub mod canon;
pub mod cg;
pub mod cones;
pub mod graph;
pub mod linop;
pub mod scs;

pub use cones::{Cone, ConeProduct};
pub use graph::{EvalOptions, Graph, GraphBuilder, GraphError, NodeId};
pub use linop::{LinOpExpr, OperatorHandle};
