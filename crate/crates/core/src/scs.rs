//! Operator-splitting cone solver on the homogeneous self-dual embedding.
//!
//! Problems are stored as `minimize cᵀx s.t. Ãx + s = b̃, s ∈ K`. With
//! `u = (x, y, τ)`, `v = (r, s, κ)` and the skew-symmetric
//!
//! ```text
//!     ⎡  0   Ãᵀ  c ⎤
//! Q = ⎢ -Ã   0   b̃ ⎥
//!     ⎣ -cᵀ -b̃ᵀ  0 ⎦
//! ```
//!
//! each iteration performs
//!
//! ```text
//! ũ ← (I + Q)⁻¹ (u + v)
//! u ← Π_C(ũ − v),   C = Rⁿ × K* × R₊
//! v ← v − ũ + u
//! ```
//!
//! The linear system is reduced to one CG solve on `I + ÃᵀÃ` per iteration
//! plus a rank-one correction with the cached `g = M⁻¹h`, where `M` is the
//! leading `(n+m)` block of `I + Q` and `h = (c, b̃)`. All of this, including
//! the residual checks, is emitted as one graph; [`residuals`] recomputes the
//! termination measures outside the graph for verification.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cg::{emit_cg, make_normal_operator, OperatorRecipe};
use crate::cones::ConeProduct;
use crate::graph::{EvalOptions, Graph, GraphBuilder, GraphError, NodeId, DEFAULT_MAX_LOOP_ITERS};
use crate::linop::{dot, LinOpError, OperatorHandle};

/// `τ` below this fraction of `‖(u, v)‖` is treated as zero when unscaling.
pub const TAU_FLOOR: f64 = 1e-12;

/// Certificates are only accepted once `τ < CERT_TAU_RATIO · max(κ, 1)`.
pub const CERT_TAU_RATIO: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScsError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    LinOp(#[from] LinOpError),
    #[error("{what} has length {actual}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid settings: {0}")]
    Settings(String),
}

/// `minimize cᵀx s.t. Ãx + s = b̃, s ∈ K`.
#[derive(Debug, Clone)]
pub struct ConeProblem {
    a: OperatorHandle,
    b: Vec<f64>,
    c: Vec<f64>,
    cones: Arc<ConeProduct>,
}

impl ConeProblem {
    /// Builds a problem already in slack form `Ãx + s = b̃`.
    pub fn new(
        a_tilde: OperatorHandle,
        b_tilde: Vec<f64>,
        c: Vec<f64>,
        cones: ConeProduct,
    ) -> Result<Self, ScsError> {
        let (m, n) = (a_tilde.rows(), a_tilde.cols());
        if b_tilde.len() != m {
            return Err(ScsError::Dimension {
                what: "b",
                expected: m,
                actual: b_tilde.len(),
            });
        }
        if c.len() != n {
            return Err(ScsError::Dimension {
                what: "c",
                expected: n,
                actual: c.len(),
            });
        }
        if cones.total_dim() != m {
            return Err(ScsError::Dimension {
                what: "cone product",
                expected: m,
                actual: cones.total_dim(),
            });
        }
        Ok(Self {
            a: a_tilde,
            b: b_tilde,
            c,
            cones: Arc::new(cones),
        })
    }

    /// Converts `minimize cᵀx s.t. Ax + b ∈ K` into slack form (`Ã = -A`, `b̃ = b`).
    pub fn from_affine(a: &OperatorHandle, b: Vec<f64>, c: Vec<f64>, cones: ConeProduct) -> Result<Self, ScsError> {
        Self::new(OperatorHandle::scale(-1.0, a), b, c, cones)
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    /// The slack-form operator `Ã`.
    pub fn a(&self) -> &OperatorHandle {
        &self.a
    }

    /// The slack-form offset `b̃`.
    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn cones(&self) -> &ConeProduct {
        &self.cones
    }

    fn h(&self) -> Vec<f64> {
        [self.c.as_slice(), self.b.as_slice()].concat()
    }
}

/// Per-iteration relative CG tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CgTolSchedule {
    /// `max(base, min(ceiling, 1/(k+1)^exponent))`.
    Decreasing { ceiling: f64, exponent: f64 },
    /// Always `base`.
    Fixed,
}

impl Default for CgTolSchedule {
    fn default() -> Self {
        CgTolSchedule::Decreasing {
            ceiling: 0.1,
            exponent: 1.5,
        }
    }
}

impl CgTolSchedule {
    pub fn tolerance(&self, iteration: usize, base: f64) -> f64 {
        match *self {
            CgTolSchedule::Decreasing { ceiling, exponent } => {
                base.max(ceiling.min((iteration as f64 + 1.0).powf(-exponent)))
            }
            CgTolSchedule::Fixed => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScsSettings {
    pub eps: f64,
    pub max_iters: usize,
    pub cg_tol_schedule: CgTolSchedule,
    /// Floor of the per-iteration CG tolerance.
    pub cg_base_tol: f64,
    /// Relative tolerance of the one-time solve for the cached `g`.
    pub setup_cg_tol: f64,
    /// Residuals are checked every this many iterations.
    pub check_interval: usize,
}

impl Default for ScsSettings {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_iters: 5000,
            cg_tol_schedule: CgTolSchedule::default(),
            cg_base_tol: 1e-9,
            setup_cg_tol: 1e-10,
            check_interval: 20,
        }
    }
}

impl ScsSettings {
    fn validate(&self) -> Result<(), ScsError> {
        if !(self.eps > 0.0) {
            return Err(ScsError::Settings("eps must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(ScsError::Settings("max_iters must be at least 1".into()));
        }
        if self.check_interval == 0 {
            return Err(ScsError::Settings("check_interval must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScsStatus {
    Solved,
    Inaccurate,
    MaxIters,
    Infeasible,
    Unbounded,
}

impl ScsStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScsStatus::Solved => "solved",
            ScsStatus::Inaccurate => "inaccurate",
            ScsStatus::MaxIters => "max-iters",
            ScsStatus::Infeasible => "infeasible",
            ScsStatus::Unbounded => "unbounded",
        }
    }
}

/// Embedding iterate `u = (x, y, τ)`, `v = (r, s, κ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScsIterate {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    n: usize,
    m: usize,
}

impl ScsIterate {
    pub fn new(u: Vec<f64>, v: Vec<f64>, n: usize, m: usize) -> Self {
        assert_eq!(u.len(), n + m + 1);
        assert_eq!(v.len(), n + m + 1);
        Self { u, v, n, m }
    }

    /// `u = v = (0, 0, 1)`.
    pub fn initial(n: usize, m: usize) -> Self {
        let mut u = vec![0.0; n + m + 1];
        u[n + m] = 1.0;
        Self::new(u.clone(), u, n, m)
    }

    pub fn x(&self) -> &[f64] {
        &self.u[..self.n]
    }

    pub fn y(&self) -> &[f64] {
        &self.u[self.n..self.n + self.m]
    }

    pub fn tau(&self) -> f64 {
        self.u[self.n + self.m]
    }

    pub fn r(&self) -> &[f64] {
        &self.v[..self.n]
    }

    pub fn s(&self) -> &[f64] {
        &self.v[self.n..self.n + self.m]
    }

    pub fn kappa(&self) -> f64 {
        self.v[self.n + self.m]
    }
}

/// Termination measures for an iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `‖Ãx + s − b̃‖ / (1 + ‖b̃‖)` at `x = u_x/τ`, `s = v_s/τ`.
    pub primal: f64,
    /// `‖Ãᵀy + c‖ / (1 + ‖c‖)` at `y = u_y/τ`.
    pub dual: f64,
    /// `|cᵀx + b̃ᵀy| / (1 + |cᵀx| + |b̃ᵀy|)`.
    pub gap: f64,
    /// `‖Ãᵀy‖ / (−b̃ᵀy)` when `b̃ᵀy < 0`, else infinite.
    pub infeasibility: f64,
    /// `‖Ãx + s‖ / (−cᵀx)` when `cᵀx < 0`, else infinite.
    pub unboundedness: f64,
    pub tau: f64,
    pub kappa: f64,
}

impl Residuals {
    pub fn converged(&self, eps: f64) -> bool {
        self.primal <= eps && self.dual <= eps && self.gap <= eps
    }

    fn certificate_regime(&self) -> bool {
        self.tau < CERT_TAU_RATIO * self.kappa.max(1.0)
    }

    pub fn infeasible(&self, eps: f64) -> bool {
        self.certificate_regime() && self.infeasibility <= eps
    }

    pub fn unbounded(&self, eps: f64) -> bool {
        self.certificate_regime() && self.unboundedness <= eps
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Computes [`Residuals`] with matrix-free applications of `Ã` and `Ãᵀ`.
///
/// When `τ` is negligible relative to the iterate, the scaled measures are
/// reported as infinite and only the certificate measures are meaningful.
pub fn residuals(iterate: &ScsIterate, problem: &ConeProblem) -> Residuals {
    let (x, y, s) = (iterate.x(), iterate.y(), iterate.s());
    let (tau, kappa) = (iterate.tau(), iterate.kappa());
    let ax = problem.a.forward(x).expect("iterate matches problem");
    let aty = problem.a.adjoint_apply(y).expect("iterate matches problem");
    let cx = dot(&problem.c, x);
    let by = dot(&problem.b, y);

    let scale = norm(&iterate.u).max(norm(&iterate.v));
    let (primal, dual, gap) = if tau > TAU_FLOOR * scale {
        let pr: Vec<f64> = ax
            .iter()
            .zip(s)
            .zip(&problem.b)
            .map(|((a, s), b)| a + s - b * tau)
            .collect();
        let du: Vec<f64> = aty.iter().zip(&problem.c).map(|(a, c)| a + c * tau).collect();
        (
            norm(&pr) / (tau * (1.0 + norm(&problem.b))),
            norm(&du) / (tau * (1.0 + norm(&problem.c))),
            (cx + by).abs() / (tau + cx.abs() + by.abs()),
        )
    } else {
        (f64::INFINITY, f64::INFINITY, f64::INFINITY)
    };
    let infeasibility = if by < 0.0 {
        norm(&aty) / -by
    } else {
        f64::INFINITY
    };
    let unboundedness = if cx < 0.0 {
        let r: Vec<f64> = ax.iter().zip(s).map(|(a, s)| a + s).collect();
        norm(&r) / -cx
    } else {
        f64::INFINITY
    };
    Residuals {
        primal,
        dual,
        gap,
        infeasibility,
        unboundedness,
        tau,
        kappa,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScsSolution {
    pub status: ScsStatus,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub pobj: f64,
    pub dobj: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    pub iterations: usize,
    pub avg_cg_iterations: f64,
    /// CG iterations spent on the one-time solve for `g`.
    pub setup_cg_iterations: usize,
    /// Final embedding iterate.
    pub iterate: ScsIterate,
}

/// One line of the solver trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
    /// Cumulative CG iterations so far.
    pub cg_iters: usize,
}

/// Writes trace records as line-delimited JSON.
pub fn write_trace<W: std::io::Write>(mut out: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace(text: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

const TRACE_LABEL: &str = "trace";

/// Graph emission shared by the full solver, the single-step graph and the
/// standalone subspace projection.
struct Emitter<'p> {
    problem: &'p ConeProblem,
    a: OperatorHandle,
    at: OperatorHandle,
    normal: OperatorRecipe,
    h: Arc<[f64]>,
    cones: Arc<ConeProduct>,
}

struct StepNodes {
    u: NodeId,
    v: NodeId,
    x_warm: NodeId,
    cg_iters: NodeId,
    cg_converged: NodeId,
}

struct CheckNodes {
    primal: NodeId,
    dual: NodeId,
    gap: NodeId,
    code: NodeId,
}

impl<'p> Emitter<'p> {
    fn new(problem: &'p ConeProblem) -> Self {
        Self {
            problem,
            a: problem.a.clone(),
            at: problem.a.adjoint(),
            normal: make_normal_operator(&problem.a, 1.0),
            h: problem.h().into(),
            cones: problem.cones.clone(),
        }
    }

    fn n(&self) -> usize {
        self.problem.n()
    }

    fn m(&self) -> usize {
        self.problem.m()
    }

    /// Solves `M z = (w_x, w_y)` by eliminating `y`:
    /// `(I + ÃᵀÃ) x = w_x − Ãᵀw_y`, then `y = w_y + Ãx`.
    fn solve_m(
        &self,
        b: &mut GraphBuilder,
        wx: NodeId,
        wy: NodeId,
        x_init: NodeId,
        tol: NodeId,
    ) -> Result<(NodeId, NodeId, crate::cg::CgNodes), GraphError> {
        let aty = b.linop(&self.at, wy)?;
        let rhs = b.sub(wx, aty)?;
        let cg = emit_cg(b, &self.normal, rhs, x_init, tol, 10 * self.n().max(1))?;
        let ax = b.linop(&self.a, cg.x)?;
        let y = b.add(wy, ax)?;
        Ok((cg.x, y, cg))
    }

    /// Emits `g = M⁻¹h` and `1 + hᵀg`; returns `(g, denom, cg_iterations)`.
    fn emit_setup(&self, b: &mut GraphBuilder, tol: f64) -> Result<(NodeId, NodeId, NodeId), GraphError> {
        let c = b.constant(self.problem.c.clone());
        let bt = b.constant(self.problem.b.clone());
        let x0 = b.constant(vec![0.0; self.n()]);
        let tol = b.scalar(tol);
        let (gx, gy, cg) = self.solve_m(b, c, bt, x0, tol)?;
        let g = b.concat(&[gx, gy])?;
        let h = b.constant(self.h.clone());
        let hg = b.dot(h, g)?;
        let one = b.scalar(1.0);
        let denom = b.add(one, hg)?;
        Ok((g, denom, cg.iterations))
    }

    /// `(I + Q)⁻¹ w`; returns `(ũ, x-part used for warm starts, cg nodes)`.
    fn emit_subspace(
        &self,
        b: &mut GraphBuilder,
        w: NodeId,
        x_init: NodeId,
        tol: NodeId,
        g: NodeId,
        denom: NodeId,
    ) -> Result<(NodeId, NodeId, crate::cg::CgNodes), GraphError> {
        let (n, m) = (self.n(), self.m());
        let wx = b.slice(w, 0, n)?;
        let wy = b.slice(w, n, m)?;
        let wt = b.slice(w, n + m, 1)?;
        let (x, y, cg) = self.solve_m(b, wx, wy, x_init, tol)?;
        let z = b.concat(&[x, y])?;
        let h = b.constant(self.h.clone());
        let hz = b.dot(h, z)?;
        let num = b.add(wt, hz)?;
        let tau = b.div(num, denom)?;
        let tg = b.scalar_mul(tau, g)?;
        let z = b.sub(z, tg)?;
        let ut = b.concat(&[z, tau])?;
        Ok((ut, x, cg))
    }

    fn emit_cg_tol(&self, b: &mut GraphBuilder, k: NodeId, settings: &ScsSettings) -> Result<NodeId, GraphError> {
        match settings.cg_tol_schedule {
            CgTolSchedule::Fixed => Ok(b.scalar(settings.cg_base_tol)),
            CgTolSchedule::Decreasing { ceiling, exponent } => {
                let one = b.scalar(1.0);
                let k1 = b.add(k, one)?;
                let decay = b.pow(k1, -exponent)?;
                let ceiling = b.scalar(ceiling);
                let t = b.minimum(ceiling, decay)?;
                let base = b.scalar(settings.cg_base_tol);
                b.maximum(base, t)
            }
        }
    }

    fn emit_step(
        &self,
        b: &mut GraphBuilder,
        u: NodeId,
        v: NodeId,
        x_warm: NodeId,
        k: NodeId,
        g: NodeId,
        denom: NodeId,
        settings: &ScsSettings,
    ) -> Result<StepNodes, GraphError> {
        let (n, m) = (self.n(), self.m());
        let w = b.add(u, v)?;
        let tol = self.emit_cg_tol(b, k, settings)?;
        let (ut, x_warm_next, cg) = self.emit_subspace(b, w, x_warm, tol, g, denom)?;

        let d = b.sub(ut, v)?;
        let dx = b.slice(d, 0, n)?;
        let dy = b.slice(d, n, m)?;
        let dt = b.slice(d, n + m, 1)?;
        let py = b.dual_cone_project(&self.cones, dy)?;
        let pt = b.relu(dt)?;
        let u_next = b.concat(&[dx, py, pt])?;

        let t = b.sub(v, ut)?;
        let v_next = b.add(t, u_next)?;

        let res = b.sqrt(cg.r_norm_sq)?;
        let failed = b.greater(res, cg.delta)?;
        let converged = b.not(failed)?;
        Ok(StepNodes {
            u: u_next,
            v: v_next,
            x_warm: x_warm_next,
            cg_iters: cg.iterations,
            cg_converged: converged,
        })
    }

    /// In-graph termination test. `code` is 0 (continue), 1 (solved),
    /// 2 (infeasible) or 3 (unbounded).
    fn emit_checks(&self, b: &mut GraphBuilder, u: NodeId, v: NodeId, eps: f64) -> Result<CheckNodes, GraphError> {
        let (n, m) = (self.n(), self.m());
        let ux = b.slice(u, 0, n)?;
        let uy = b.slice(u, n, m)?;
        let tau = b.slice(u, n + m, 1)?;
        let vs = b.slice(v, n, m)?;
        let kappa = b.slice(v, n + m, 1)?;
        let cn = b.constant(self.problem.c.clone());
        let bn = b.constant(self.problem.b.clone());

        let ax = b.linop(&self.a, ux)?;
        let aty = b.linop(&self.at, uy)?;
        let cx = b.dot(cn, ux)?;
        let by = b.dot(bn, uy)?;
        let tiny = b.scalar(f64::MIN_POSITIVE);
        let tau_safe = b.maximum(tau, tiny)?;

        let ax_s = b.add(ax, vs)?;
        let btau = b.scalar_mul(tau, bn)?;
        let pr = b.sub(ax_s, btau)?;
        let pr = b.norm(pr)?;
        let pr_den = b.scale(1.0 + norm(&self.problem.b), tau_safe)?;
        let primal = b.div(pr, pr_den)?;

        let ctau = b.scalar_mul(tau, cn)?;
        let du = b.add(aty, ctau)?;
        let du = b.norm(du)?;
        let du_den = b.scale(1.0 + norm(&self.problem.c), tau_safe)?;
        let dual = b.div(du, du_den)?;

        let sum = b.add(cx, by)?;
        let gap_num = b.abs(sum)?;
        let acx = b.abs(cx)?;
        let aby = b.abs(by)?;
        let gap_den = b.add(tau_safe, acx)?;
        let gap_den = b.add(gap_den, aby)?;
        let gap = b.div(gap_num, gap_den)?;

        let eps_n = b.scalar(eps);
        let worst = b.maximum(primal, dual)?;
        let worst = b.maximum(worst, gap)?;
        let not_solved = b.greater(worst, eps_n)?;
        let solved = b.not(not_solved)?;
        let floor = b.scale(TAU_FLOOR, tau_safe)?;
        let tau_ok = b.greater(tau, floor)?;
        let solved = b.minimum(solved, tau_ok)?;

        let one = b.scalar(1.0);
        let kappa1 = b.maximum(kappa, one)?;
        let limit = b.scale(CERT_TAU_RATIO, kappa1)?;
        let tau_small = b.greater(limit, tau)?;
        let zero = b.scalar(0.0);

        let by_neg = b.greater(zero, by)?;
        let aty_norm = b.norm(aty)?;
        let neg_by = b.sub(zero, by)?;
        let infeas_bound = b.scale(eps, neg_by)?;
        let infeas_far = b.greater(aty_norm, infeas_bound)?;
        let infeas_close = b.not(infeas_far)?;
        let infeas = b.minimum(by_neg, infeas_close)?;
        let infeas = b.minimum(infeas, tau_small)?;

        let cx_neg = b.greater(zero, cx)?;
        let unb_norm = b.norm(ax_s)?;
        let neg_cx = b.sub(zero, cx)?;
        let unb_bound = b.scale(eps, neg_cx)?;
        let unb_far = b.greater(unb_norm, unb_bound)?;
        let unb_close = b.not(unb_far)?;
        let unb = b.minimum(cx_neg, unb_close)?;
        let unb = b.minimum(unb, tau_small)?;

        // code = solved + (1 − solved)·(2·infeas + (1 − infeas)·3·unb)
        let not_solved = b.not(solved)?;
        let not_infeas = b.not(infeas)?;
        let unb3 = b.scale(3.0, unb)?;
        let unb_part = b.mul(not_infeas, unb3)?;
        let infeas2 = b.scale(2.0, infeas)?;
        let cert = b.add(infeas2, unb_part)?;
        let cert = b.mul(not_solved, cert)?;
        let code = b.add(solved, cert)?;
        Ok(CheckNodes {
            primal,
            dual,
            gap,
            code,
        })
    }
}

/// The cached solve `g = M⁻¹h` and the scalar `1 + hᵀg`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedSolve {
    pub g: Vec<f64>,
    pub denom: f64,
    pub cg_iterations: usize,
}

impl PrecomputedSolve {
    pub fn compute(problem: &ConeProblem, tol: f64) -> Result<Self, ScsError> {
        let emitter = Emitter::new(problem);
        let mut b = GraphBuilder::new();
        let (g, denom, iters) = emitter.emit_setup(&mut b, tol)?;
        let graph = b.finish(&[g, denom, iters])?;
        let r = graph.evaluate(&HashMap::new())?;
        let outs = r.outputs();
        Ok(Self {
            g: outs[0].to_vec(),
            denom: outs[1][0],
            cg_iterations: outs[2][0] as usize,
        })
    }
}

/// `(I + Q)⁻¹ w` via the cached solve and one CG solve at relative tolerance `cg_tol`.
pub fn subspace_project(
    problem: &ConeProblem,
    cached: &PrecomputedSolve,
    w: &[f64],
    cg_tol: f64,
) -> Result<Vec<f64>, ScsError> {
    let dim = problem.n() + problem.m() + 1;
    if w.len() != dim {
        return Err(ScsError::Dimension {
            what: "w",
            expected: dim,
            actual: w.len(),
        });
    }
    let emitter = Emitter::new(problem);
    let mut b = GraphBuilder::new();
    let wn = b.constant(w.to_vec());
    let x0 = b.constant(vec![0.0; problem.n()]);
    let tol = b.scalar(cg_tol);
    let g = b.constant(cached.g.clone());
    let denom = b.scalar(cached.denom);
    let (ut, _, _) = emitter.emit_subspace(&mut b, wn, x0, tol, g, denom)?;
    let graph = b.finish(&[ut])?;
    Ok(graph.evaluate(&HashMap::new())?.outputs()[0].to_vec())
}

/// Graph of a single splitting iteration.
///
/// Inputs, in order: `u`, `v`, `x_warm` (CG warm start), `k` (iteration
/// index), `g`, `1 + hᵀg`. Outputs: `u⁺`, `v⁺`, `x_warm⁺`, CG iterations.
pub fn build_step_graph(problem: &ConeProblem, settings: &ScsSettings) -> Result<Graph, ScsError> {
    settings.validate()?;
    let emitter = Emitter::new(problem);
    let (n, m) = (problem.n(), problem.m());
    let mut b = GraphBuilder::new();
    let u = b.input(n + m + 1);
    let v = b.input(n + m + 1);
    let xw = b.input(n);
    let k = b.input(1);
    let g = b.input(n + m);
    let denom = b.input(1);
    let step = emitter.emit_step(&mut b, u, v, xw, k, g, denom, settings)?;
    Ok(b.finish(&[step.u, step.v, step.x_warm, step.cg_iters])?)
}

/// Drives [`build_step_graph`] one iteration at a time.
pub struct ScsStepper {
    graph: Graph,
    cached: PrecomputedSolve,
    iterate: ScsIterate,
    x_warm: Vec<f64>,
    k: usize,
}

impl ScsStepper {
    pub fn new(problem: &ConeProblem, settings: &ScsSettings) -> Result<Self, ScsError> {
        let graph = build_step_graph(problem, settings)?;
        let cached = PrecomputedSolve::compute(problem, settings.setup_cg_tol)?;
        Ok(Self {
            graph,
            cached,
            iterate: ScsIterate::initial(problem.n(), problem.m()),
            x_warm: vec![0.0; problem.n()],
            k: 0,
        })
    }

    pub fn iterate(&self) -> &ScsIterate {
        &self.iterate
    }

    /// Runs one iteration and returns the number of CG iterations it used.
    pub fn step(&mut self) -> Result<usize, ScsError> {
        let k = [self.k as f64];
        let denom = [self.cached.denom];
        let args: [&[f64]; 6] = [
            &self.iterate.u,
            &self.iterate.v,
            &self.x_warm,
            &k,
            &self.cached.g,
            &denom,
        ];
        let r = self.graph.evaluate_positional(&args, &EvalOptions::default())?;
        let outs = r.outputs();
        self.iterate.u = outs[0].to_vec();
        self.iterate.v = outs[1].to_vec();
        self.x_warm = outs[2].to_vec();
        self.k += 1;
        Ok(outs[3][0] as usize)
    }
}

/// A solver graph for one problem instance.
#[derive(Debug, Clone)]
pub struct ScsGraph {
    graph: Graph,
    n: usize,
    m: usize,
}

impl ScsGraph {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }
}

/// Emits the full solver: setup solve for `g`, then an outer loop that runs
/// up to `check_interval` splitting iterations in an inner loop and checks
/// termination after each batch.
///
/// Outputs: `u`, `v`, iterations, total CG iterations, status code, number
/// of CG solves that missed their tolerance, setup CG iterations.
pub fn build_scs_graph(problem: &ConeProblem, settings: &ScsSettings) -> Result<ScsGraph, ScsError> {
    settings.validate()?;
    let emitter = Emitter::new(problem);
    let (n, m) = (problem.n(), problem.m());
    let mut b = GraphBuilder::new();
    let (g, denom, setup_iters) = emitter.emit_setup(&mut b, settings.setup_cg_tol)?;

    let mut start = vec![0.0; n + m + 1];
    start[n + m] = 1.0;
    let u0 = b.constant(start.clone());
    let v0 = b.constant(start);
    let xw0 = b.constant(vec![0.0; n]);
    let k0 = b.scalar(0.0);
    let cg_total0 = b.scalar(0.0);
    let code0 = b.scalar(0.0);
    let cg_fail0 = b.scalar(0.0);

    let max_iters = settings.max_iters as f64;
    let interval = settings.check_interval as f64;
    let eps = settings.eps;
    let emitter_ref = &emitter;

    let outer = b.while_loop(
        &[u0, v0, xw0, k0, cg_total0, code0, cg_fail0],
        &[g, denom],
        DEFAULT_MAX_LOOP_ITERS,
        |b, v, _| {
            let half = b.scalar(0.5);
            let running = b.greater(half, v[5])?;
            let cap = b.scalar(max_iters);
            let under = b.greater(cap, v[3])?;
            b.minimum(running, under)
        },
        |b, v, c| {
            let zero = b.scalar(0.0);
            let inner = b.while_loop(
                &[v[0], v[1], v[2], v[3], zero, v[4], v[6]],
                c,
                DEFAULT_MAX_LOOP_ITERS,
                |b, iv, _| {
                    let batch = b.scalar(interval);
                    let in_batch = b.greater(batch, iv[4])?;
                    let cap = b.scalar(max_iters);
                    let under = b.greater(cap, iv[3])?;
                    b.minimum(in_batch, under)
                },
                |b, iv, ic| {
                    let (u, v, xw, k, j, cg_total, cg_fail) =
                        (iv[0], iv[1], iv[2], iv[3], iv[4], iv[5], iv[6]);
                    let step = emitter_ref.emit_step(b, u, v, xw, k, ic[0], ic[1], settings)?;
                    let one = b.scalar(1.0);
                    let k = b.add(k, one)?;
                    let j = b.add(j, one)?;
                    let cg_total = b.add(cg_total, step.cg_iters)?;
                    let missed = b.not(step.cg_converged)?;
                    let cg_fail = b.add(cg_fail, missed)?;
                    Ok(vec![step.u, step.v, step.x_warm, k, j, cg_total, cg_fail])
                },
            )?;
            let (u, vv, xw, k, cg_total, cg_fail) =
                (inner[0], inner[1], inner[2], inner[3], inner[5], inner[6]);
            let checks = emitter_ref.emit_checks(b, u, vv, eps)?;
            let record = b.concat(&[k, checks.primal, checks.dual, checks.gap, cg_total])?;
            b.tap(TRACE_LABEL, record)?;
            Ok(vec![u, vv, xw, k, cg_total, checks.code, cg_fail])
        },
    )?;
    let graph = b.finish(&[
        outer[0],
        outer[1],
        outer[3],
        outer[4],
        outer[5],
        outer[6],
        setup_iters,
    ])?;
    Ok(ScsGraph { graph, n, m })
}

/// Evaluates a solver graph and extracts the solution, re-verifying the
/// termination measures outside the graph.
pub fn run_scs_graph(
    scs: &ScsGraph,
    problem: &ConeProblem,
    settings: &ScsSettings,
    trace: Option<&mut Vec<TraceRecord>>,
) -> Result<ScsSolution, ScsError> {
    let records = Mutex::new(Vec::new());
    let observer = |label: &str, v: &[f64]| {
        if label == TRACE_LABEL {
            records.lock().unwrap().push(TraceRecord {
                iteration: v[0] as usize,
                primal: v[1],
                dual: v[2],
                gap: v[3],
                cg_iters: v[4] as usize,
            });
        }
    };
    let opts = EvalOptions {
        strict_finite: false,
        observer: trace.is_some().then_some(&observer as _),
    };
    let result = scs.graph.evaluate_with(&HashMap::new(), &opts)?;
    if let Some(out) = trace {
        out.extend(records.into_inner().unwrap());
    }
    let outs = result.outputs();
    let iterate = ScsIterate::new(outs[0].to_vec(), outs[1].to_vec(), scs.n, scs.m);
    let iterations = outs[2][0] as usize;
    let cg_total = outs[3][0];
    let code = outs[4][0] as i64;
    let cg_failures = outs[5][0] as usize;
    let setup_cg_iterations = outs[6][0] as usize;
    Ok(extract_solution(
        problem,
        settings,
        iterate,
        iterations,
        cg_total,
        code,
        cg_failures,
        setup_cg_iterations,
    ))
}

#[allow(clippy::too_many_arguments)]
fn extract_solution(
    problem: &ConeProblem,
    settings: &ScsSettings,
    iterate: ScsIterate,
    iterations: usize,
    cg_total: f64,
    code: i64,
    cg_failures: usize,
    setup_cg_iterations: usize,
) -> ScsSolution {
    let res = residuals(&iterate, problem);
    let eps = settings.eps;
    let (n, m) = (problem.n(), problem.m());
    let status = match code {
        1 if res.converged(eps) => ScsStatus::Solved,
        1 => ScsStatus::Inaccurate,
        2 => ScsStatus::Infeasible,
        3 => ScsStatus::Unbounded,
        _ if res.converged(eps) => ScsStatus::Solved,
        _ if cg_failures > 0 => ScsStatus::Inaccurate,
        _ => ScsStatus::MaxIters,
    };
    let nan = |len: usize| vec![f64::NAN; len];
    let (x, y, s, pobj, dobj) = match status {
        ScsStatus::Infeasible => {
            let scale = -dot(problem.b(), iterate.y());
            let y: Vec<f64> = iterate.y().iter().map(|v| v / scale).collect();
            (nan(n), y, nan(m), f64::INFINITY, f64::INFINITY)
        }
        ScsStatus::Unbounded => {
            let scale = -dot(problem.c(), iterate.x());
            let x: Vec<f64> = iterate.x().iter().map(|v| v / scale).collect();
            let s: Vec<f64> = iterate.s().iter().map(|v| v / scale).collect();
            (x, nan(m), s, f64::NEG_INFINITY, f64::NEG_INFINITY)
        }
        _ => {
            let tau = iterate.tau();
            let unscale = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x / tau).collect() };
            let (x, y, s) = (unscale(iterate.x()), unscale(iterate.y()), unscale(iterate.s()));
            let pobj = dot(problem.c(), &x);
            let dobj = -dot(problem.b(), &y);
            (x, y, s, pobj, dobj)
        }
    };
    let avg_cg_iterations = if iterations > 0 {
        cg_total / iterations as f64
    } else {
        0.0
    };
    ScsSolution {
        status,
        x,
        y,
        s,
        pobj,
        dobj,
        primal_residual: res.primal,
        dual_residual: res.dual,
        gap: res.gap,
        iterations,
        avg_cg_iterations,
        setup_cg_iterations,
        iterate,
    }
}

/// Builds and runs the solver graph.
pub fn solve(problem: &ConeProblem, settings: &ScsSettings) -> Result<ScsSolution, ScsError> {
    let graph = build_scs_graph(problem, settings)?;
    run_scs_graph(&graph, problem, settings, None)
}

/// Like [`solve`], also collecting one trace record per termination check.
pub fn solve_with_trace(
    problem: &ConeProblem,
    settings: &ScsSettings,
) -> Result<(ScsSolution, Vec<TraceRecord>), ScsError> {
    let graph = build_scs_graph(problem, settings)?;
    let mut trace = Vec::new();
    let sol = run_scs_graph(&graph, problem, settings, Some(&mut trace))?;
    Ok((sol, trace))
}
