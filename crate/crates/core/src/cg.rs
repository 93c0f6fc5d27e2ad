//! Conjugate gradient, emitted as a computation graph.
//!
//! [`emit_cg`] appends the method to any [`GraphBuilder`] given a recipe that
//! emits the operator application, so the same loop serves standalone linear
//! solves and the subspace step of the splitting solver.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::graph::{Graph, GraphBuilder, GraphError, NodeId, DEFAULT_MAX_LOOP_ITERS};
use crate::linop::OperatorHandle;

pub const DEFAULT_TOL: f64 = 1e-8;

/// Extends a graph with an operator applied to the given node.
pub type OperatorRecipe =
    Arc<dyn Fn(&mut GraphBuilder, NodeId) -> Result<NodeId, GraphError> + Send + Sync>;

/// Recipe applying `op` itself; `op` is expected to be symmetric.
pub fn operator_recipe(op: &OperatorHandle) -> OperatorRecipe {
    let op = op.clone();
    Arc::new(move |b, x| b.linop(&op, x))
}

/// Recipe for `x ↦ λx + Aᵀ(Ax)`.
pub fn make_normal_operator(a: &OperatorHandle, lam: f64) -> OperatorRecipe {
    let a = a.clone();
    let at = a.adjoint();
    Arc::new(move |b, x| {
        let ax = b.linop(&a, x)?;
        let atax = b.linop(&at, ax)?;
        if lam == 0.0 {
            return Ok(atax);
        }
        let lx = b.scale(lam, x)?;
        b.add(lx, atax)
    })
}

#[derive(Clone)]
pub struct CgSpec {
    pub apply: OperatorRecipe,
    pub b: Vec<f64>,
    pub x_init: Vec<f64>,
    /// Relative tolerance: stop once `‖r‖ ≤ tol·‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
}

impl fmt::Debug for CgSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CgSpec")
            .field("dim", &self.b.len())
            .field("tol", &self.tol)
            .field("max_iter", &self.max_iter)
            .finish_non_exhaustive()
    }
}

impl CgSpec {
    /// Zero initial guess, tolerance 1e-8 and an iteration cap of `10·n`.
    pub fn new(apply: OperatorRecipe, b: Vec<f64>) -> Self {
        let n = b.len();
        Self {
            apply,
            x_init: vec![0.0; n],
            b,
            tol: DEFAULT_TOL,
            max_iter: 10 * n.max(1),
        }
    }

    pub fn with_x_init(mut self, x_init: Vec<f64>) -> Self {
        self.x_init = x_init;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `√r_norm_sq` as carried by the recurrence.
    pub final_residual_norm: f64,
    pub converged: bool,
}

/// Nodes produced by [`emit_cg`].
#[derive(Debug, Clone, Copy)]
pub struct CgNodes {
    pub x: NodeId,
    pub iterations: NodeId,
    pub r_norm_sq: NodeId,
    /// Absolute stopping threshold `tol·‖b‖`.
    pub delta: NodeId,
}

/// Appends a CG loop solving `A x = rhs` from `x_init`.
///
/// `tol` is a scalar node so callers can vary it per solve. The loop runs while
/// `√r_norm_sq > tol·‖rhs‖` and fewer than `max_iter` steps have been taken.
/// When `tol·‖rhs‖ = 0` it also stops once `r_norm_sq ≤ ε·n`, since rounding
/// may keep the residual from reaching exactly zero.
pub fn emit_cg(
    b: &mut GraphBuilder,
    apply: &OperatorRecipe,
    rhs: NodeId,
    x_init: NodeId,
    tol: NodeId,
    max_iter: usize,
) -> Result<CgNodes, GraphError> {
    let dim = b.shape(rhs);
    let rhs_norm = b.norm(rhs)?;
    let delta = b.mul(tol, rhs_norm)?;

    let zero = b.scalar(0.0);
    let delta_positive = b.greater(delta, zero)?;
    let delta_zero = b.not(delta_positive)?;
    let floor = b.scale(f64::EPSILON * dim as f64, delta_zero)?;
    let cap = b.scalar(max_iter as f64);

    let ax = apply(b, x_init)?;
    let r = b.sub(rhs, ax)?;
    let rr = b.dot(r, r)?;
    let k0 = b.scalar(0.0);

    let apply = apply.clone();
    let out = b.while_loop(
        &[x_init, k0, rr, r, r],
        &[delta, floor, cap],
        DEFAULT_MAX_LOOP_ITERS,
        |b, v, c| {
            let (k, rr) = (v[1], v[2]);
            let (delta, floor, cap) = (c[0], c[1], c[2]);
            let res = b.sqrt(rr)?;
            let above_tol = b.greater(res, delta)?;
            let above_floor = b.greater(rr, floor)?;
            let under_cap = b.greater(cap, k)?;
            let go = b.minimum(above_tol, above_floor)?;
            b.minimum(go, under_cap)
        },
        move |b, v, _| {
            let (x, k, rr, r, p) = (v[0], v[1], v[2], v[3], v[4]);
            let ap = apply(b, p)?;
            let p_ap = b.dot(p, ap)?;
            let alpha = b.div(rr, p_ap)?;
            let step = b.scalar_mul(alpha, p)?;
            let x = b.add(x, step)?;
            let step = b.scalar_mul(alpha, ap)?;
            let r = b.sub(r, step)?;
            let rr_next = b.dot(r, r)?;
            let beta = b.div(rr_next, rr)?;
            let bp = b.scalar_mul(beta, p)?;
            let p = b.add(r, bp)?;
            let one = b.scalar(1.0);
            let k = b.add(k, one)?;
            Ok(vec![x, k, rr_next, r, p])
        },
    )?;
    Ok(CgNodes {
        x: out[0],
        iterations: out[1],
        r_norm_sq: out[2],
        delta,
    })
}

/// Builds a graph with no inputs and outputs `(x, k, r_norm_sq)`.
pub fn build_cg_graph(spec: &CgSpec) -> Result<Graph, GraphError> {
    let mut b = GraphBuilder::new();
    let rhs = b.constant(spec.b.clone());
    let x_init = b.constant(spec.x_init.clone());
    let tol = b.scalar(spec.tol);
    let nodes = emit_cg(&mut b, &spec.apply, rhs, x_init, tol, spec.max_iter)?;
    b.finish(&[nodes.x, nodes.iterations, nodes.r_norm_sq])
}

/// Builds and evaluates the CG graph.
pub fn cg_solve(spec: &CgSpec) -> Result<CgResult, GraphError> {
    let graph = build_cg_graph(spec)?;
    run_cg_graph(&graph, spec)
}

/// Evaluates a graph produced by [`build_cg_graph`] for `spec`.
pub fn run_cg_graph(graph: &Graph, spec: &CgSpec) -> Result<CgResult, GraphError> {
    let result = graph.evaluate(&HashMap::new())?;
    let outs = result.outputs();
    let final_residual_norm = outs[2][0].sqrt();
    let b_norm = spec.b.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(CgResult {
        x: outs[0].to_vec(),
        iterations: outs[1][0] as usize,
        final_residual_norm,
        converged: final_residual_norm <= spec.tol * b_norm,
    })
}
