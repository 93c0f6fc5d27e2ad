//! A small computation-graph engine over `f64` vectors.
//!
//! Graphs are built with a [`GraphBuilder`], which only lets a node reference
//! nodes created before it, so every finished [`Graph`] is acyclic and its
//! insertion order is already a topological order. Scalars are length-1
//! vectors. Iteration is expressed with [`GraphBuilder::while_loop`], which
//! embeds a condition graph and a body graph into a single loop node.

use std::borrow::Cow;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::{self, Write as _};
use std::sync::Arc;

use thiserror::Error;

use crate::cones::ConeProduct;
use crate::linop::OperatorHandle;

/// Default hard cap on the number of iterations of a loop node.
pub const DEFAULT_MAX_LOOP_ITERS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("node {node}: shape mismatch in {op}: {detail}")]
    ShapeMismatch {
        node: NodeId,
        op: &'static str,
        detail: String,
    },
    #[error("node {node}: {op} expects {expected} inputs, got {actual}")]
    Arity {
        node: NodeId,
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("node {node}: unknown input {input}")]
    UnknownInput { node: NodeId, input: NodeId },
    #[error("no binding for input node {0}")]
    MissingBinding(NodeId),
    #[error("node {0} is not an input node")]
    NotAnInput(NodeId),
    #[error("binding for {node} has length {actual}, expected {expected}")]
    BindingShape {
        node: NodeId,
        expected: usize,
        actual: usize,
    },
    #[error("node {node}: non-finite value produced by {op}")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("graph takes {expected} inputs, got {actual}")]
    InputCount { expected: usize, actual: usize },
    #[error("invalid loop: {0}")]
    InvalidLoop(String),
}

/// Operation carried by a node, with its payload.
#[derive(Debug, Clone)]
pub enum Op {
    Input { shape: usize },
    Constant(Arc<[f64]>),
    Add,
    Subtract,
    /// Inputs `[scalar, vector]`.
    ScalarMultiply,
    ElementwiseMultiply,
    Divide,
    DotProduct,
    EuclideanNorm,
    SquareRoot,
    MaximumWithZero,
    Abs,
    Power(f64),
    Maximum,
    Minimum,
    /// Elementwise `a > b` as 1.0 / 0.0.
    CompareGreater,
    LinOpApply(OperatorHandle),
    Slice { start: usize, len: usize },
    Concat,
    ConeProject(Arc<ConeProduct>),
    /// Projection onto the product of the dual cones.
    DualConeProject(Arc<ConeProduct>),
    /// Inputs are the initial loop variables followed by the captured values.
    /// The node's value is the concatenation of the final loop variables.
    WhileLoop(Arc<LoopSpec>),
    /// Identity that reports its value to the evaluation observer.
    Tap(String),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Subtract => "subtract",
            Op::ScalarMultiply => "scalar-multiply",
            Op::ElementwiseMultiply => "elementwise-multiply",
            Op::Divide => "divide",
            Op::DotProduct => "dot-product",
            Op::EuclideanNorm => "euclidean-norm",
            Op::SquareRoot => "square-root",
            Op::MaximumWithZero => "maximum-with-zero",
            Op::Abs => "abs",
            Op::Power(_) => "power",
            Op::Maximum => "maximum",
            Op::Minimum => "minimum",
            Op::CompareGreater => "compare-greater",
            Op::LinOpApply(_) => "linop-apply",
            Op::Slice { .. } => "slice",
            Op::Concat => "concat",
            Op::ConeProject(_) => "cone-project",
            Op::DualConeProject(_) => "dual-cone-project",
            Op::WhileLoop(_) => "while-loop",
            Op::Tap(_) => "tap",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    id: NodeId,
    op: Op,
    inputs: Vec<NodeId>,
    shape: usize,
}

impl Node {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn shape(&self) -> usize {
        self.shape
    }
}

/// Condition and body of a loop node.
///
/// Both graphs take the same inputs: the loop variables followed by the
/// captured values. `cond` yields one scalar (the loop continues while it is
/// positive); `body` yields the updated loop variables.
#[derive(Debug, Clone)]
pub struct LoopSpec {
    cond: Graph,
    body: Graph,
    num_vars: usize,
    max_iters: usize,
}

impl LoopSpec {
    pub fn new(cond: Graph, body: Graph, num_vars: usize, max_iters: usize) -> Result<Self, GraphError> {
        let shapes = cond.input_shapes();
        if body.input_shapes() != shapes {
            return Err(GraphError::InvalidLoop(
                "cond and body take different inputs".into(),
            ));
        }
        if num_vars > shapes.len() {
            return Err(GraphError::InvalidLoop(format!(
                "{num_vars} loop variables but only {} inputs",
                shapes.len()
            )));
        }
        if cond.output_shapes() != [1] {
            return Err(GraphError::InvalidLoop(
                "cond must produce exactly one scalar".into(),
            ));
        }
        if body.output_shapes() != shapes[..num_vars] {
            return Err(GraphError::InvalidLoop(format!(
                "body outputs {:?} do not match loop variable shapes {:?}",
                body.output_shapes(),
                &shapes[..num_vars]
            )));
        }
        Ok(Self {
            cond,
            body,
            num_vars,
            max_iters,
        })
    }

    pub fn cond(&self) -> &Graph {
        &self.cond
    }

    pub fn body(&self) -> &Graph {
        &self.body
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn max_iters(&self) -> usize {
        self.max_iters
    }

    fn var_shapes(&self) -> Vec<usize> {
        self.cond.input_shapes()[..self.num_vars].to_vec()
    }
}

/// Result of running a loop to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub vars: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Set when the iteration cap stopped the loop before `cond` turned false.
    pub capped: bool,
}

/// Runs a loop spec directly on concrete values (loop variables then captures).
pub fn while_loop(spec: &LoopSpec, init: &[&[f64]], opts: &EvalOptions<'_>) -> Result<LoopOutcome, GraphError> {
    let shapes = spec.cond.input_shapes();
    if init.len() != shapes.len() {
        return Err(GraphError::InputCount {
            expected: shapes.len(),
            actual: init.len(),
        });
    }
    for ((value, expected), &id) in init.iter().zip(&shapes).zip(&spec.cond.inputs) {
        if value.len() != *expected {
            return Err(GraphError::BindingShape {
                node: id,
                expected: *expected,
                actual: value.len(),
            });
        }
    }
    run_loop(spec, init, opts)
}

fn run_loop(spec: &LoopSpec, init: &[&[f64]], opts: &EvalOptions<'_>) -> Result<LoopOutcome, GraphError> {
    let (vars, captures) = init.split_at(spec.num_vars);
    let mut vars: Vec<Vec<f64>> = vars.iter().map(|v| v.to_vec()).collect();
    let mut iterations = 0;
    let mut capped = false;
    let mut stats = EvalStats::default();
    loop {
        let args: Vec<&[f64]> = vars
            .iter()
            .map(Vec::as_slice)
            .chain(captures.iter().copied())
            .collect();
        let keep_going = spec.cond.run(&args, opts, &mut stats)?[0][0] > 0.0;
        if !keep_going {
            break;
        }
        if iterations >= spec.max_iters {
            capped = true;
            break;
        }
        let next = spec.body.run(&args, opts, &mut stats)?;
        vars = next;
        iterations += 1;
    }
    Ok(LoopOutcome {
        vars,
        iterations,
        capped,
    })
}

/// An immutable, acyclic computation graph.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    needed: Vec<bool>,
    last_use: Vec<usize>,
}

/// Observer receiving `(label, value)` from tap nodes.
pub type Observer<'a> = &'a (dyn Fn(&str, &[f64]) + Sync);

#[derive(Clone, Copy, Default)]
pub struct EvalOptions<'a> {
    /// Fail with [`GraphError::NonFinite`] as soon as a node produces NaN or ±inf.
    pub strict_finite: bool,
    pub observer: Option<Observer<'a>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct EvalStats {
    nodes_evaluated: usize,
    loops: Vec<LoopReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopReport {
    pub node: NodeId,
    pub iterations: usize,
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    values: HashMap<NodeId, Vec<f64>>,
    outputs: Vec<NodeId>,
    /// Nodes of the top-level graph evaluated in this call.
    pub nodes_evaluated: usize,
    /// Iteration counts of the top-level loop nodes.
    pub loops: Vec<LoopReport>,
}

impl EvalResult {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.values.get(&id).map(Vec::as_slice)
    }

    pub fn values(&self) -> &HashMap<NodeId, Vec<f64>> {
        &self.values
    }

    /// Output values in declaration order.
    pub fn outputs(&self) -> Vec<&[f64]> {
        self.outputs.iter().map(|id| self.values[id].as_slice()).collect()
    }

    pub fn scalar(&self, id: NodeId) -> Option<f64> {
        self.get(id).and_then(|v| v.first().copied())
    }
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input_shapes(&self) -> Vec<usize> {
        self.inputs.iter().map(|id| self.nodes[id.0].shape).collect()
    }

    pub fn output_shapes(&self) -> Vec<usize> {
        self.outputs.iter().map(|id| self.nodes[id.0].shape).collect()
    }

    /// Kahn's algorithm; ties go to the earliest inserted node.
    pub fn topological_order(&self) -> Vec<NodeId> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for node in &self.nodes {
            for inp in &node.inputs {
                indegree[node.id.0] += 1;
                consumers[inp.0].push(node.id.0);
            }
        }
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(NodeId(i));
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        order
    }

    /// Evaluates the graph outputs for the given input bindings.
    pub fn evaluate(&self, bindings: &HashMap<NodeId, Vec<f64>>) -> Result<EvalResult, GraphError> {
        self.evaluate_with(bindings, &EvalOptions::default())
    }

    pub fn evaluate_with(
        &self,
        bindings: &HashMap<NodeId, Vec<f64>>,
        opts: &EvalOptions<'_>,
    ) -> Result<EvalResult, GraphError> {
        if let Some(id) = bindings.keys().find(|id| !self.inputs.contains(id)) {
            return Err(GraphError::NotAnInput(*id));
        }
        let args = self
            .inputs
            .iter()
            .map(|id| {
                bindings
                    .get(id)
                    .map(Vec::as_slice)
                    .ok_or(GraphError::MissingBinding(*id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        self.evaluate_positional(&args, opts)
    }

    /// Like [`Graph::evaluate_with`], with inputs given in declaration order.
    pub fn evaluate_positional(&self, args: &[&[f64]], opts: &EvalOptions<'_>) -> Result<EvalResult, GraphError> {
        if args.len() != self.inputs.len() {
            return Err(GraphError::InputCount {
                expected: self.inputs.len(),
                actual: args.len(),
            });
        }
        for (&id, arg) in self.inputs.iter().zip(args) {
            let expected = self.nodes[id.0].shape;
            if arg.len() != expected {
                return Err(GraphError::BindingShape {
                    node: id,
                    expected,
                    actual: arg.len(),
                });
            }
        }
        let mut stats = EvalStats::default();
        let outs = self.run_top(args, opts, &mut stats)?;
        let values = self.outputs.iter().copied().zip(outs).collect();
        Ok(EvalResult {
            values,
            outputs: self.outputs.clone(),
            nodes_evaluated: stats.nodes_evaluated,
            loops: stats.loops,
        })
    }

    fn run(&self, args: &[&[f64]], opts: &EvalOptions<'_>, stats: &mut EvalStats) -> Result<Vec<Vec<f64>>, GraphError> {
        self.run_inner(args, opts, stats, false)
    }

    fn run_top(&self, args: &[&[f64]], opts: &EvalOptions<'_>, stats: &mut EvalStats) -> Result<Vec<Vec<f64>>, GraphError> {
        self.run_inner(args, opts, stats, true)
    }

    fn run_inner<'a>(
        &'a self,
        args: &[&'a [f64]],
        opts: &EvalOptions<'_>,
        stats: &mut EvalStats,
        top: bool,
    ) -> Result<Vec<Vec<f64>>, GraphError> {
        let mut values: Vec<Option<Cow<'a, [f64]>>> = vec![None; self.nodes.len()];
        let mut next_input = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input { .. } = node.op {
                next_input += 1;
            }
            if !self.needed[i] {
                continue;
            }
            let value = match &node.op {
                Op::Input { .. } => Cow::Borrowed(args[next_input - 1]),
                Op::Constant(data) => Cow::Borrowed(&data[..]),
                Op::WhileLoop(spec) => {
                    let init: Vec<&[f64]> = node
                        .inputs
                        .iter()
                        .map(|id| values[id.0].as_deref().expect("input evaluated"))
                        .collect();
                    let outcome = run_loop(spec, &init, opts)?;
                    if top {
                        stats.loops.push(LoopReport {
                            node: node.id,
                            iterations: outcome.iterations,
                            capped: outcome.capped,
                        });
                    }
                    Cow::Owned(outcome.vars.concat())
                }
                op => {
                    let ins: Vec<&[f64]> = node
                        .inputs
                        .iter()
                        .map(|id| values[id.0].as_deref().expect("input evaluated"))
                        .collect();
                    Cow::Owned(eval_op(op, &ins, opts))
                }
            };
            stats.nodes_evaluated += top as usize;
            if opts.strict_finite && value.iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFinite {
                    node: node.id,
                    op: node.op.name(),
                });
            }
            if self.last_use[i] != 0 {
                values[i] = Some(value);
            }
            for inp in &node.inputs {
                if self.last_use[inp.0] == i {
                    values[inp.0] = None;
                }
            }
        }
        Ok(self
            .outputs
            .iter()
            .map(|id| values[id.0].as_deref().expect("output evaluated").to_vec())
            .collect())
    }

    /// Text adjacency listing: one node per line with id, kind, inputs, shape.
    /// Loop nodes list their condition and body graphs indented below them.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        self.dump_into(&mut out, 0);
        out
    }

    fn dump_into(&self, out: &mut String, indent: usize) {
        let pad = "  ".repeat(indent);
        for node in &self.nodes {
            let inputs: Vec<String> = node.inputs.iter().map(|i| i.0.to_string()).collect();
            let kind = match &node.op {
                Op::Power(p) => format!("power({p})"),
                Op::LinOpApply(op) => format!("linop-apply({op})"),
                Op::Slice { start, len } => format!("slice({start}..{})", start + len),
                Op::ConeProject(k) => format!("cone-project({:?})", k.factors()),
                Op::DualConeProject(k) => format!("dual-cone-project({:?})", k.factors()),
                Op::WhileLoop(spec) => format!("while-loop(max_iters={})", spec.max_iters),
                Op::Tap(label) => format!("tap({label})"),
                op => op.name().to_string(),
            };
            let _ = writeln!(
                out,
                "{pad}{} {} [{}] {}",
                node.id.0,
                kind,
                inputs.join(","),
                node.shape
            );
            if let Op::WhileLoop(spec) = &node.op {
                let _ = writeln!(out, "{pad}  cond:");
                spec.cond.dump_into(out, indent + 2);
                let _ = writeln!(out, "{pad}  body:");
                spec.body.dump_into(out, indent + 2);
            }
        }
        let outputs: Vec<String> = self.outputs.iter().map(|i| i.0.to_string()).collect();
        let _ = writeln!(out, "{pad}outputs [{}]", outputs.join(","));
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn eval_op(op: &Op, ins: &[&[f64]], _opts: &EvalOptions<'_>) -> Vec<f64> {
    match op {
        Op::Add => zip_map(ins[0], ins[1], |x, y| x + y),
        Op::Subtract => zip_map(ins[0], ins[1], |x, y| x - y),
        Op::ScalarMultiply => {
            let s = ins[0][0];
            ins[1].iter().map(|x| s * x).collect()
        }
        Op::ElementwiseMultiply => zip_map(ins[0], ins[1], |x, y| x * y),
        Op::Divide => zip_map(ins[0], ins[1], |x, y| x / y),
        Op::DotProduct => vec![crate::linop::dot(ins[0], ins[1])],
        Op::EuclideanNorm => vec![ins[0].iter().map(|x| x * x).sum::<f64>().sqrt()],
        Op::SquareRoot => ins[0].iter().map(|x| x.sqrt()).collect(),
        Op::MaximumWithZero => ins[0].iter().map(|x| x.max(0.0)).collect(),
        Op::Abs => ins[0].iter().map(|x| x.abs()).collect(),
        Op::Power(p) => ins[0].iter().map(|x| x.powf(*p)).collect(),
        Op::Maximum => zip_map(ins[0], ins[1], f64::max),
        Op::Minimum => zip_map(ins[0], ins[1], f64::min),
        Op::CompareGreater => zip_map(ins[0], ins[1], |x, y| if x > y { 1.0 } else { 0.0 }),
        Op::LinOpApply(a) => a.forward(ins[0]).expect("shape checked at build time"),
        Op::Slice { start, len } => ins[0][*start..start + len].to_vec(),
        Op::Concat => ins.concat(),
        Op::ConeProject(k) => {
            let mut v = ins[0].to_vec();
            k.project_in_place(&mut v);
            v
        }
        Op::DualConeProject(k) => {
            let mut v = ins[0].to_vec();
            k.project_dual_in_place(&mut v);
            v
        }
        Op::Tap(label) => {
            if let Some(observer) = _opts.observer {
                observer(label, ins[0]);
            }
            ins[0].to_vec()
        }
        Op::Input { .. } | Op::Constant(_) | Op::WhileLoop(_) => {
            unreachable!("handled by the evaluator")
        }
    }
}

/// Incremental constructor for a [`Graph`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
}

macro_rules! binary {
    ($($(#[$doc:meta])* $name:ident => $op:expr;)*) => {$(
        $(#[$doc])*
        pub fn $name(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
            self.add_node($op, &[a, b])
        }
    )*};
}

macro_rules! unary {
    ($($(#[$doc:meta])* $name:ident => $op:expr;)*) => {$(
        $(#[$doc])*
        pub fn $name(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
            self.add_node($op, &[a])
        }
    )*};
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape
    }

    /// Appends a node after validating its inputs and inferring its shape.
    pub fn add_node(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        let id = NodeId(self.nodes.len());
        if let Some(&bad) = inputs.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(GraphError::UnknownInput { node: id, input: bad });
        }
        let shapes: Vec<usize> = inputs.iter().map(|i| self.nodes[i.0].shape).collect();
        let shape = infer_shape(id, &op, &shapes)?;
        if let Op::Input { .. } = op {
            self.inputs.push(id);
        }
        self.nodes.push(Node {
            id,
            op,
            inputs: inputs.to_vec(),
            shape,
        });
        Ok(id)
    }

    pub fn input(&mut self, shape: usize) -> NodeId {
        self.add_node(Op::Input { shape }, &[]).expect("inputs have no preconditions")
    }

    pub fn constant(&mut self, values: impl Into<Arc<[f64]>>) -> NodeId {
        self.add_node(Op::Constant(values.into()), &[])
            .expect("constants have no preconditions")
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(vec![value])
    }

    binary! {
        add => Op::Add;
        sub => Op::Subtract;
        mul => Op::ElementwiseMultiply;
        div => Op::Divide;
        dot => Op::DotProduct;
        maximum => Op::Maximum;
        minimum => Op::Minimum;
        /// `1.0` where `a > b`, else `0.0`.
        greater => Op::CompareGreater;
    }

    unary! {
        norm => Op::EuclideanNorm;
        sqrt => Op::SquareRoot;
        relu => Op::MaximumWithZero;
        abs => Op::Abs;
    }

    /// Scalar node `s` times vector `x`.
    pub fn scalar_mul(&mut self, s: NodeId, x: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(Op::ScalarMultiply, &[s, x])
    }

    /// Constant `alpha` times `x`.
    pub fn scale(&mut self, alpha: f64, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.scalar(alpha);
        self.scalar_mul(s, x)
    }

    pub fn pow(&mut self, x: NodeId, exponent: f64) -> Result<NodeId, GraphError> {
        self.add_node(Op::Power(exponent), &[x])
    }

    pub fn linop(&mut self, op: &OperatorHandle, x: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(Op::LinOpApply(op.clone()), &[x])
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        self.add_node(Op::Slice { start, len }, &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        self.add_node(Op::Concat, parts)
    }

    pub fn cone_project(&mut self, cones: &Arc<ConeProduct>, x: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(Op::ConeProject(cones.clone()), &[x])
    }

    pub fn dual_cone_project(&mut self, cones: &Arc<ConeProduct>, x: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(Op::DualConeProject(cones.clone()), &[x])
    }

    pub fn tap(&mut self, label: &str, x: NodeId) -> Result<NodeId, GraphError> {
        self.add_node(Op::Tap(label.to_string()), &[x])
    }

    /// `1 - x`, logical negation of a 0/1 flag.
    pub fn not(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let one = self.constant(vec![1.0; self.shape(x)]);
        self.sub(one, x)
    }

    /// Adds a loop node.
    ///
    /// `cond` and `body` receive fresh builders whose inputs mirror `init`
    /// followed by `captures`. Captured values are passed unchanged to every
    /// iteration. Returns one node per loop variable holding its final value.
    pub fn while_loop<C, B>(
        &mut self,
        init: &[NodeId],
        captures: &[NodeId],
        max_iters: usize,
        cond: C,
        body: B,
    ) -> Result<Vec<NodeId>, GraphError>
    where
        C: FnOnce(&mut GraphBuilder, &[NodeId], &[NodeId]) -> Result<NodeId, GraphError>,
        B: FnOnce(&mut GraphBuilder, &[NodeId], &[NodeId]) -> Result<Vec<NodeId>, GraphError>,
    {
        let all: Vec<NodeId> = init.iter().chain(captures).copied().collect();
        if let Some(&bad) = all.iter().find(|i| i.0 >= self.nodes.len()) {
            return Err(GraphError::UnknownInput {
                node: NodeId(self.nodes.len()),
                input: bad,
            });
        }
        let shapes: Vec<usize> = all.iter().map(|&i| self.shape(i)).collect();
        let sub = |f: &mut dyn FnMut(&mut GraphBuilder, &[NodeId], &[NodeId]) -> Result<Vec<NodeId>, GraphError>|
         -> Result<Graph, GraphError> {
            let mut b = GraphBuilder::new();
            let ins: Vec<NodeId> = shapes.iter().map(|&s| b.input(s)).collect();
            let (vars, caps) = ins.split_at(init.len());
            let outs = f(&mut b, vars, caps)?;
            b.finish(&outs)
        };
        let mut cond = Some(cond);
        let cond_graph = sub(&mut |b, v, c| Ok(vec![(cond.take().unwrap())(b, v, c)?]))?;
        let mut body = Some(body);
        let body_graph = sub(&mut |b, v, c| (body.take().unwrap())(b, v, c))?;
        let spec = LoopSpec::new(cond_graph, body_graph, init.len(), max_iters)?;
        let var_shapes = spec.var_shapes();
        let node = self.add_node(Op::WhileLoop(Arc::new(spec)), &all)?;
        let mut offset = 0;
        var_shapes
            .into_iter()
            .map(|s| {
                let id = self.slice(node, offset, s);
                offset += s;
                id
            })
            .collect()
    }

    /// Declares outputs and freezes the graph.
    pub fn finish(self, outputs: &[NodeId]) -> Result<Graph, GraphError> {
        let n = self.nodes.len();
        if let Some(&bad) = outputs.iter().find(|o| o.0 >= n) {
            return Err(GraphError::UnknownInput {
                node: NodeId(n),
                input: bad,
            });
        }
        let mut needed = vec![false; n];
        let mut last_use = vec![0usize; n];
        for o in outputs {
            needed[o.0] = true;
            last_use[o.0] = usize::MAX;
        }
        // taps are kept for their observer side effect even when unused
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Tap(_)) {
                needed[i] = true;
            }
        }
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            for inp in &self.nodes[i].inputs {
                needed[inp.0] = true;
                if last_use[inp.0] != usize::MAX {
                    last_use[inp.0] = last_use[inp.0].max(i);
                }
            }
        }
        // inputs are counted positionally, so they stay marked
        for id in &self.inputs {
            needed[id.0] = true;
        }
        Ok(Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            outputs: outputs.to_vec(),
            needed,
            last_use,
        })
    }
}

fn infer_shape(id: NodeId, op: &Op, shapes: &[usize]) -> Result<usize, GraphError> {
    let name = op.name();
    let arity = |expected: usize| {
        if shapes.len() != expected {
            Err(GraphError::Arity {
                node: id,
                op: name,
                expected,
                actual: shapes.len(),
            })
        } else {
            Ok(())
        }
    };
    let mismatch = |detail: String| GraphError::ShapeMismatch { node: id, op: name, detail };
    let same = || -> Result<usize, GraphError> {
        arity(2)?;
        if shapes[0] != shapes[1] {
            return Err(mismatch(format!("{} vs {}", shapes[0], shapes[1])));
        }
        Ok(shapes[0])
    };
    match op {
        Op::Input { shape } => {
            arity(0)?;
            Ok(*shape)
        }
        Op::Constant(data) => {
            arity(0)?;
            Ok(data.len())
        }
        Op::Add
        | Op::Subtract
        | Op::ElementwiseMultiply
        | Op::Divide
        | Op::Maximum
        | Op::Minimum
        | Op::CompareGreater => same(),
        Op::DotProduct => same().map(|_| 1),
        Op::ScalarMultiply => {
            arity(2)?;
            if shapes[0] != 1 {
                return Err(mismatch(format!("scalar operand has shape {}", shapes[0])));
            }
            Ok(shapes[1])
        }
        Op::EuclideanNorm => arity(1).map(|_| 1),
        Op::SquareRoot | Op::MaximumWithZero | Op::Abs | Op::Power(_) | Op::Tap(_) => {
            arity(1).map(|_| shapes[0])
        }
        Op::LinOpApply(a) => {
            arity(1)?;
            if shapes[0] != a.cols() {
                return Err(mismatch(format!(
                    "operator {a} has {} columns, input has shape {}",
                    a.cols(),
                    shapes[0]
                )));
            }
            Ok(a.rows())
        }
        Op::Slice { start, len } => {
            arity(1)?;
            if start + len > shapes[0] {
                return Err(mismatch(format!(
                    "slice {start}..{} of shape {}",
                    start + len,
                    shapes[0]
                )));
            }
            Ok(*len)
        }
        Op::Concat => {
            if shapes.is_empty() {
                return Err(GraphError::Arity {
                    node: id,
                    op: name,
                    expected: 1,
                    actual: 0,
                });
            }
            Ok(shapes.iter().sum())
        }
        Op::ConeProject(k) | Op::DualConeProject(k) => {
            arity(1)?;
            if shapes[0] != k.total_dim() {
                return Err(mismatch(format!(
                    "cone dimension {} vs input shape {}",
                    k.total_dim(),
                    shapes[0]
                )));
            }
            Ok(shapes[0])
        }
        Op::WhileLoop(spec) => {
            let expected = spec.cond.input_shapes();
            arity(expected.len())?;
            if shapes != expected {
                return Err(mismatch(format!(
                    "loop expects inputs {expected:?}, got {shapes:?}"
                )));
            }
            Ok(spec.var_shapes().iter().sum())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f(x, y) = x² + 2x + y
    fn quadratic() -> (Graph, NodeId, NodeId) {
        let mut b = GraphBuilder::new();
        let x = b.input(1);
        let y = b.input(1);
        let sq = b.mul(x, x).unwrap();
        let two_x = b.scale(2.0, x).unwrap();
        let s = b.add(sq, two_x).unwrap();
        let f = b.add(s, y).unwrap();
        (b.finish(&[f]).unwrap(), x, y)
    }

    fn eval1(g: &Graph, x: NodeId, y: NodeId, xv: f64, yv: f64) -> f64 {
        let bindings = HashMap::from([(x, vec![xv]), (y, vec![yv])]);
        g.evaluate(&bindings).unwrap().outputs()[0][0]
    }

    #[test]
    fn add_and_dot_constants() {
        let mut b = GraphBuilder::new();
        let a = b.constant(vec![1.0, 2.0]);
        let c = b.constant(vec![3.0, 4.0]);
        let s = b.add(a, c).unwrap();
        let v = b.constant(vec![1.0, 2.0, 3.0]);
        let d = b.dot(v, v).unwrap();
        let g = b.finish(&[s, d]).unwrap();
        let r = g.evaluate(&HashMap::new()).unwrap();
        assert_eq!(r.get(s).unwrap(), &[4.0, 6.0]);
        assert_eq!(r.scalar(d), Some(14.0));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut b = GraphBuilder::new();
        let a = b.constant(vec![1.0, 2.0]);
        let c = b.constant(vec![1.0, 2.0, 3.0]);
        match b.add(a, c) {
            Err(GraphError::ShapeMismatch { node, op, .. }) => {
                assert_eq!(node, NodeId(2));
                assert_eq!(op, "add");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_input_rejected() {
        let mut b = GraphBuilder::new();
        let a = b.constant(vec![1.0]);
        assert!(matches!(
            b.add(a, NodeId(7)),
            Err(GraphError::UnknownInput { .. })
        ));
    }

    #[test]
    fn quadratic_values() {
        let (g, x, y) = quadratic();
        assert_eq!(eval1(&g, x, y, 2.0, 3.0), 11.0);
        assert_eq!(eval1(&g, x, y, 0.0, 0.0), 0.0);
    }

    #[test]
    fn quadratic_topological_order() {
        let (g, x, y) = quadratic();
        let order = g.topological_order();
        let pos = |id: NodeId| order.iter().position(|o| *o == id).unwrap();
        for node in g.nodes() {
            for inp in node.inputs() {
                assert!(pos(*inp) < pos(node.id()));
            }
        }
        assert!(pos(x) < pos(NodeId(2)) && pos(y) < pos(*g.outputs().last().unwrap()));
    }

    #[test]
    fn identity_graph() {
        let mut b = GraphBuilder::new();
        let x = b.input(2);
        let g = b.finish(&[x]).unwrap();
        let r = g.evaluate(&HashMap::from([(x, vec![5.0, -1.0])])).unwrap();
        assert_eq!(r.get(x).unwrap(), &[5.0, -1.0]);
        assert_eq!(g.topological_order(), vec![x]);
    }

    #[test]
    fn chain_order() {
        let mut b = GraphBuilder::new();
        let a = b.input(1);
        let c = b.abs(a).unwrap();
        let d = b.sqrt(c).unwrap();
        let g = b.finish(&[d]).unwrap();
        assert_eq!(g.topological_order(), vec![a, c, d]);
    }

    #[test]
    fn missing_and_bad_bindings() {
        let (g, x, y) = quadratic();
        assert_eq!(
            g.evaluate(&HashMap::from([(x, vec![1.0])])).unwrap_err(),
            GraphError::MissingBinding(y)
        );
        assert!(matches!(
            g.evaluate(&HashMap::from([(x, vec![1.0, 2.0]), (y, vec![1.0])])),
            Err(GraphError::BindingShape { .. })
        ));
        assert!(matches!(
            g.evaluate(&HashMap::from([(x, vec![1.0]), (y, vec![1.0]), (NodeId(2), vec![0.0])])),
            Err(GraphError::NotAnInput(_))
        ));
    }

    #[test]
    fn strict_finite_reports_node() {
        let mut b = GraphBuilder::new();
        let x = b.input(1);
        let zero = b.scalar(0.0);
        let q = b.div(x, zero).unwrap();
        let g = b.finish(&[q]).unwrap();
        let bindings = HashMap::from([(x, vec![1.0])]);
        assert_eq!(g.evaluate(&bindings).unwrap().scalar(q), Some(f64::INFINITY));
        let strict = EvalOptions {
            strict_finite: true,
            ..Default::default()
        };
        assert_eq!(
            g.evaluate_with(&bindings, &strict).unwrap_err(),
            GraphError::NonFinite { node: q, op: "divide" }
        );
    }

    fn counter_loop(limit: f64, cap: usize) -> (Graph, NodeId) {
        let mut b = GraphBuilder::new();
        let k0 = b.input(1);
        let out = b
            .while_loop(
                &[k0],
                &[],
                cap,
                |b, v, _| {
                    let lim = b.scalar(limit);
                    b.greater(lim, v[0])
                },
                |b, v, _| {
                    let one = b.scalar(1.0);
                    Ok(vec![b.add(v[0], one)?])
                },
            )
            .unwrap();
        (b.finish(&out).unwrap(), k0)
    }

    #[test]
    fn counter_loop_runs_five_times() {
        let (g, k0) = counter_loop(5.0, DEFAULT_MAX_LOOP_ITERS);
        let r = g.evaluate(&HashMap::from([(k0, vec![0.0])])).unwrap();
        assert_eq!(r.outputs()[0], &[5.0]);
        assert_eq!(r.loops[0].iterations, 5);
        assert!(!r.loops[0].capped);
    }

    #[test]
    fn zero_iteration_loop() {
        let (g, k0) = counter_loop(5.0, DEFAULT_MAX_LOOP_ITERS);
        let r = g.evaluate(&HashMap::from([(k0, vec![9.0])])).unwrap();
        assert_eq!(r.outputs()[0], &[9.0]);
        assert_eq!(r.loops[0].iterations, 0);
    }

    #[test]
    fn loop_cap_flags_overflow() {
        let (g, k0) = counter_loop(100.0, 10);
        let r = g.evaluate(&HashMap::from([(k0, vec![0.0])])).unwrap();
        assert_eq!(r.outputs()[0], &[10.0]);
        assert!(r.loops[0].capped);
    }

    #[test]
    fn halving_loop() {
        let mut b = GraphBuilder::new();
        let x0 = b.constant(vec![16.0]);
        let out = b
            .while_loop(
                &[x0],
                &[],
                DEFAULT_MAX_LOOP_ITERS,
                |b, v, _| {
                    let one = b.scalar(1.0);
                    b.greater(v[0], one)
                },
                |b, v, _| Ok(vec![b.scale(0.5, v[0])?]),
            )
            .unwrap();
        let g = b.finish(&out).unwrap();
        let r = g.evaluate(&HashMap::new()).unwrap();
        assert_eq!(r.outputs()[0], &[1.0]);
        assert_eq!(r.loops[0].iterations, 4);
    }

    #[test]
    fn loop_body_shape_checked() {
        let mut b = GraphBuilder::new();
        let x0 = b.constant(vec![1.0, 2.0]);
        let err = b
            .while_loop(
                &[x0],
                &[],
                10,
                |b, v, _| {
                    let n = b.norm(v[0])?;
                    let one = b.scalar(1.0);
                    b.greater(n, one)
                },
                |b, v, _| Ok(vec![b.norm(v[0])?]),
            )
            .unwrap_err();
        assert!(matches!(err, GraphError::InvalidLoop(_)));
    }

    #[test]
    fn fan_out_evaluated_once() {
        let mut b = GraphBuilder::new();
        let x = b.input(3);
        let shared = b.abs(x).unwrap();
        let consumers: Vec<NodeId> = (0..4).map(|_| b.relu(shared).unwrap()).collect();
        let total = b.concat(&consumers).unwrap();
        let unused = b.sqrt(x).unwrap();
        let _ = unused;
        let g = b.finish(&[total]).unwrap();
        let r = g.evaluate(&HashMap::from([(x, vec![-1.0, 2.0, -3.0])])).unwrap();
        // x, shared, four consumers, concat; the unused sqrt is skipped
        assert_eq!(r.nodes_evaluated, 7);
        assert_eq!(r.outputs()[0], [1.0, 2.0, 3.0].repeat(4).as_slice());
    }

    #[test]
    fn tap_reports_to_observer() {
        use std::sync::Mutex;
        let mut b = GraphBuilder::new();
        let x = b.input(2);
        let t = b.tap("x", x).unwrap();
        let g = b.finish(&[t]).unwrap();
        let seen = Mutex::new(Vec::new());
        let observer = |label: &str, v: &[f64]| seen.lock().unwrap().push((label.to_string(), v.to_vec()));
        let opts = EvalOptions {
            observer: Some(&observer),
            ..Default::default()
        };
        g.evaluate_with(&HashMap::from([(x, vec![1.0, 2.0])]), &opts).unwrap();
        assert_eq!(seen.into_inner().unwrap(), vec![("x".to_string(), vec![1.0, 2.0])]);
    }

    #[test]
    fn dump_lists_nodes() {
        let (g, _, _) = quadratic();
        let dump = g.dump();
        assert_eq!(
            dump,
            "0 input [] 1\n1 input [] 1\n2 elementwise-multiply [0,0] 1\n3 constant [] 1\n\
             4 scalar-multiply [3,0] 1\n5 add [2,4] 1\n6 add [5,1] 1\noutputs [6]\n"
        );
    }

    #[test]
    fn graph_is_shareable() {
        fn assert_sync<T: Send + Sync>() {}
        assert_sync::<Graph>();
    }
}
