//! Structured linear operators.
//!
//! An operator is an immutable expression tree ([`LinOpExpr`]) over a small set
//! of leaves (dense, compressed-column sparse, 1-D convolution, identity, zero)
//! and combinators (scaling, sums, composition, vertical stacking). Forward
//! application walks the tree; the adjoint is obtained by rewriting the tree
//! (`adj(L∘R) = adj(R)∘adj(L)`, `adj(L+R) = adj(L)+adj(R)`, ...) and applying
//! the rewritten expression forward. No leaf is ever expanded into a matrix
//! unless [`OperatorHandle::materialize_dense`] is called explicitly.

use std::fmt;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Convolutions with both kernel and input at least this long use the FFT path.
pub const DEFAULT_CONV_CROSSOVER: usize = 512;

/// Default entry cap for [`OperatorHandle::materialize_dense`].
pub const DEFAULT_MATERIALIZE_CAP: usize = 4_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinOpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid sparse matrix: {0}")]
    InvalidSparse(String),
    #[error("dense data has {actual} entries, expected {rows}x{cols}")]
    DenseShape {
        rows: usize,
        cols: usize,
        actual: usize,
    },
    #[error("convolution needs a nonempty kernel and input length >= 1")]
    EmptyConvolution,
    #[error("cannot stack an empty list of operators")]
    EmptyStack,
    #[error("materializing a {rows}x{cols} operator exceeds the cap of {cap} entries")]
    CapExceeded { rows: usize, cols: usize, cap: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Arc<[f64]>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinOpError> {
        if data.len() != rows * cols {
            return Err(LinOpError::DenseShape {
                rows,
                cols,
                actual: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data: data.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, x))
            .collect()
    }

    fn matvec_transposed(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        if self.cols == 0 {
            return out;
        }
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            if yi != 0.0 {
                axpy(yi, row, &mut out);
            }
        }
        out
    }
}

/// Compressed sparse column storage.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    rows: usize,
    cols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, LinOpError> {
        if col_ptr.len() != cols + 1 {
            return Err(LinOpError::InvalidSparse(format!(
                "column pointer array has length {}, expected {}",
                col_ptr.len(),
                cols + 1
            )));
        }
        if col_ptr[0] != 0 {
            return Err(LinOpError::InvalidSparse(
                "first column pointer must be 0".into(),
            ));
        }
        if col_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(LinOpError::InvalidSparse(
                "column pointers are not monotone".into(),
            ));
        }
        let nnz = col_ptr[cols];
        if row_idx.len() != nnz || values.len() != nnz {
            return Err(LinOpError::InvalidSparse(format!(
                "expected {nnz} entries, got {} row indices and {} values",
                row_idx.len(),
                values.len()
            )));
        }
        if let Some(&bad) = row_idx.iter().find(|&&r| r >= rows) {
            return Err(LinOpError::InvalidSparse(format!(
                "row index {bad} out of range for {rows} rows"
            )));
        }
        Ok(Self {
            rows,
            cols,
            col_ptr,
            row_idx,
            values,
        })
    }

    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, LinOpError> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(LinOpError::InvalidSparse(format!(
                    "entry ({r}, {c}) out of range for {rows}x{cols}"
                )));
            }
        }
        sorted.sort_by_key(|&(r, c, _)| (c, r));
        let mut col_ptr = vec![0usize; cols + 1];
        let mut row_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_idx.push(r);
            values.push(v);
            col_ptr[c + 1] += 1;
            last = Some((r, c));
        }
        for j in 0..cols {
            col_ptr[j + 1] += col_ptr[j];
        }
        Self::new(rows, cols, col_ptr, row_idx, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            let range = self.col_ptr[j]..self.col_ptr[j + 1];
            for (&r, &v) in self.row_idx[range.clone()].iter().zip(&self.values[range]) {
                out[r] += v * xj;
            }
        }
        out
    }

    fn matvec_transposed(&self, y: &[f64]) -> Vec<f64> {
        (0..self.cols)
            .map(|j| {
                let range = self.col_ptr[j]..self.col_ptr[j + 1];
                self.row_idx[range.clone()]
                    .iter()
                    .zip(&self.values[range])
                    .map(|(&r, &v)| v * y[r])
                    .sum()
            })
            .collect()
    }
}

struct FftCache {
    size: usize,
    spectrum: Vec<Complex<f64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FftCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftCache").field("size", &self.size).finish()
    }
}

/// Full 1-D convolution `x ↦ c * x` of a length-`n` input with a length-`k`
/// kernel; the output has length `k + n - 1`.
#[derive(Debug, Clone)]
pub struct Conv1D {
    kernel: Arc<[f64]>,
    n: usize,
    crossover: usize,
    fft: OnceLock<Arc<FftCache>>,
}

impl PartialEq for Conv1D {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.crossover == other.crossover && self.kernel == other.kernel
    }
}

impl Conv1D {
    pub fn new(kernel: Vec<f64>, n: usize) -> Result<Self, LinOpError> {
        Self::with_crossover(kernel, n, DEFAULT_CONV_CROSSOVER)
    }

    /// Like [`Conv1D::new`], with an explicit direct/FFT crossover length.
    /// A crossover of 0 forces the FFT path; `usize::MAX` forces direct summation.
    pub fn with_crossover(kernel: Vec<f64>, n: usize, crossover: usize) -> Result<Self, LinOpError> {
        if kernel.is_empty() || n == 0 {
            return Err(LinOpError::EmptyConvolution);
        }
        Ok(Self {
            kernel: kernel.into(),
            n,
            crossover,
            fft: OnceLock::new(),
        })
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.n
    }

    pub fn output_len(&self) -> usize {
        self.kernel.len() + self.n - 1
    }

    pub fn uses_fft(&self) -> bool {
        self.kernel.len().min(self.n) >= self.crossover
    }

    fn fft_cache(&self) -> &FftCache {
        self.fft.get_or_init(|| {
            let size = self.output_len().next_power_of_two();
            let mut planner = FftPlanner::<f64>::new();
            let forward = planner.plan_fft_forward(size);
            let inverse = planner.plan_fft_inverse(size);
            let mut spectrum = vec![Complex::new(0.0, 0.0); size];
            for (s, &c) in spectrum.iter_mut().zip(self.kernel.iter()) {
                s.re = c;
            }
            forward.process(&mut spectrum);
            Arc::new(FftCache {
                size,
                spectrum,
                forward,
                inverse,
            })
        })
    }

    fn fft_apply(&self, input: &[f64], out_len: usize, conjugate: bool) -> Vec<f64> {
        let cache = self.fft_cache();
        let mut buf = vec![Complex::new(0.0, 0.0); cache.size];
        for (b, &v) in buf.iter_mut().zip(input) {
            b.re = v;
        }
        cache.forward.process(&mut buf);
        for (b, s) in buf.iter_mut().zip(&cache.spectrum) {
            *b *= if conjugate { s.conj() } else { *s };
        }
        cache.inverse.process(&mut buf);
        let scale = 1.0 / cache.size as f64;
        buf[..out_len].iter().map(|c| c.re * scale).collect()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        if self.uses_fft() {
            return self.fft_apply(x, self.output_len(), false);
        }
        let mut out = vec![0.0; self.output_len()];
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(xj, &self.kernel, &mut out[j..j + self.kernel.len()]);
            }
        }
        out
    }

    /// Correlation with the kernel: `out[j] = Σ_i c[i] y[i + j]`.
    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        if self.uses_fft() {
            // circular correlation of size >= k + n - 1 never wraps for j < n
            return self.fft_apply(y, self.n, true);
        }
        let k = self.kernel.len();
        (0..self.n).map(|j| dot(&self.kernel, &y[j..j + k])).collect()
    }
}

/// Expression tree for a structured linear operator.
#[derive(Debug, Clone, PartialEq)]
pub enum LinOpExpr {
    Dense(DenseMatrix),
    Sparse(CscMatrix),
    Conv1D(Conv1D),
    Identity(usize),
    Zero { rows: usize, cols: usize },
    Scale(f64, Arc<LinOpExpr>),
    Sum(Arc<LinOpExpr>, Arc<LinOpExpr>),
    /// `Compose(L, R)` applies `R` first, then `L`.
    Compose(Arc<LinOpExpr>, Arc<LinOpExpr>),
    VStack(Vec<Arc<LinOpExpr>>),
    AdjointOf(Arc<LinOpExpr>),
}

impl LinOpExpr {
    pub fn rows(&self) -> usize {
        match self {
            LinOpExpr::Dense(d) => d.rows,
            LinOpExpr::Sparse(s) => s.rows,
            LinOpExpr::Conv1D(c) => c.output_len(),
            LinOpExpr::Identity(n) => *n,
            LinOpExpr::Zero { rows, .. } => *rows,
            LinOpExpr::Scale(_, c) => c.rows(),
            LinOpExpr::Sum(l, _) => l.rows(),
            LinOpExpr::Compose(l, _) => l.rows(),
            LinOpExpr::VStack(children) => children.iter().map(|c| c.rows()).sum(),
            LinOpExpr::AdjointOf(c) => c.cols(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            LinOpExpr::Dense(d) => d.cols,
            LinOpExpr::Sparse(s) => s.cols,
            LinOpExpr::Conv1D(c) => c.n,
            LinOpExpr::Identity(n) => *n,
            LinOpExpr::Zero { cols, .. } => *cols,
            LinOpExpr::Scale(_, c) => c.cols(),
            LinOpExpr::Sum(l, _) => l.cols(),
            LinOpExpr::Compose(_, r) => r.cols(),
            LinOpExpr::VStack(children) => children[0].cols(),
            LinOpExpr::AdjointOf(c) => c.rows(),
        }
    }

    /// Depth of the expression tree (leaves have depth 1).
    pub fn depth(&self) -> usize {
        match self {
            LinOpExpr::Scale(_, c) | LinOpExpr::AdjointOf(c) => 1 + c.depth(),
            LinOpExpr::Sum(l, r) | LinOpExpr::Compose(l, r) => 1 + l.depth().max(r.depth()),
            LinOpExpr::VStack(cs) => 1 + cs.iter().map(|c| c.depth()).max().unwrap_or(0),
            _ => 1,
        }
    }
}

fn apply(expr: &LinOpExpr, x: &[f64]) -> Vec<f64> {
    match expr {
        LinOpExpr::Dense(d) => d.matvec(x),
        LinOpExpr::Sparse(s) => s.matvec(x),
        LinOpExpr::Conv1D(c) => c.forward(x),
        LinOpExpr::Identity(_) => x.to_vec(),
        LinOpExpr::Zero { rows, .. } => vec![0.0; *rows],
        LinOpExpr::Scale(alpha, c) => {
            let mut out = apply(c, x);
            out.iter_mut().for_each(|v| *v *= alpha);
            out
        }
        LinOpExpr::Sum(l, r) => {
            let mut out = apply(l, x);
            axpy(1.0, &apply(r, x), &mut out);
            out
        }
        LinOpExpr::Compose(l, r) => apply(l, &apply(r, x)),
        LinOpExpr::VStack(children) => {
            let mut out = Vec::with_capacity(expr.rows());
            for c in children {
                out.extend(apply(c, x));
            }
            out
        }
        LinOpExpr::AdjointOf(c) => apply_transposed(c, x),
    }
}

/// Applies the transpose of `expr` by recursion on the tree, without building
/// the adjoint expression. Used for leaves under `AdjointOf`.
fn apply_transposed(expr: &LinOpExpr, y: &[f64]) -> Vec<f64> {
    match expr {
        LinOpExpr::Dense(d) => d.matvec_transposed(y),
        LinOpExpr::Sparse(s) => s.matvec_transposed(y),
        LinOpExpr::Conv1D(c) => c.adjoint(y),
        LinOpExpr::Identity(_) => y.to_vec(),
        LinOpExpr::Zero { cols, .. } => vec![0.0; *cols],
        LinOpExpr::Scale(alpha, c) => {
            let mut out = apply_transposed(c, y);
            out.iter_mut().for_each(|v| *v *= alpha);
            out
        }
        LinOpExpr::Sum(l, r) => {
            let mut out = apply_transposed(l, y);
            axpy(1.0, &apply_transposed(r, y), &mut out);
            out
        }
        LinOpExpr::Compose(l, r) => apply_transposed(r, &apply_transposed(l, y)),
        LinOpExpr::VStack(children) => {
            let mut out = vec![0.0; expr.cols()];
            let mut offset = 0;
            for c in children {
                let rows = c.rows();
                axpy(1.0, &apply_transposed(c, &y[offset..offset + rows]), &mut out);
                offset += rows;
            }
            out
        }
        LinOpExpr::AdjointOf(c) => apply(c, y),
    }
}

/// Rewrites `expr` into an expression for its adjoint.
pub fn derive_adjoint(expr: &Arc<LinOpExpr>) -> Arc<LinOpExpr> {
    match expr.as_ref() {
        LinOpExpr::Dense(_) | LinOpExpr::Sparse(_) | LinOpExpr::Conv1D(_) | LinOpExpr::VStack(_) => {
            Arc::new(LinOpExpr::AdjointOf(expr.clone()))
        }
        LinOpExpr::Identity(_) => expr.clone(),
        LinOpExpr::Zero { rows, cols } => Arc::new(LinOpExpr::Zero {
            rows: *cols,
            cols: *rows,
        }),
        LinOpExpr::Scale(alpha, c) => Arc::new(LinOpExpr::Scale(*alpha, derive_adjoint(c))),
        LinOpExpr::Sum(l, r) => Arc::new(LinOpExpr::Sum(derive_adjoint(l), derive_adjoint(r))),
        LinOpExpr::Compose(l, r) => {
            Arc::new(LinOpExpr::Compose(derive_adjoint(r), derive_adjoint(l)))
        }
        LinOpExpr::AdjointOf(c) => c.clone(),
    }
}

fn nnz(expr: &LinOpExpr) -> usize {
    match expr {
        LinOpExpr::Dense(d) => d.rows * d.cols,
        LinOpExpr::Sparse(s) => s.values.iter().filter(|v| **v != 0.0).count(),
        LinOpExpr::Conv1D(c) => c.n * c.kernel.iter().filter(|v| **v != 0.0).count(),
        LinOpExpr::Identity(n) => *n,
        LinOpExpr::Zero { .. } => 0,
        LinOpExpr::Scale(alpha, c) => {
            if *alpha == 0.0 {
                0
            } else {
                nnz(c)
            }
        }
        LinOpExpr::Sum(l, r) => (nnz(l) + nnz(r)).min(expr.rows() * expr.cols()),
        LinOpExpr::Compose(l, r) => match (l.as_ref(), r.as_ref()) {
            (LinOpExpr::Identity(_), other) | (other, LinOpExpr::Identity(_)) => nnz(other),
            _ => nnz(l).saturating_mul(nnz(r)).min(expr.rows() * expr.cols()),
        },
        LinOpExpr::VStack(children) => children.iter().map(|c| nnz(c)).sum(),
        LinOpExpr::AdjointOf(c) => nnz(c),
    }
}

impl fmt::Display for LinOpExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinOpExpr::Dense(d) => write!(f, "dense({}x{})", d.rows, d.cols),
            LinOpExpr::Sparse(s) => write!(f, "sparse({}x{}, nnz={})", s.rows, s.cols, s.nnz()),
            LinOpExpr::Conv1D(c) => write!(f, "conv1d(k={}, n={})", c.kernel.len(), c.n),
            LinOpExpr::Identity(n) => write!(f, "identity({n})"),
            LinOpExpr::Zero { rows, cols } => write!(f, "zero({rows}x{cols})"),
            LinOpExpr::Scale(a, c) => write!(f, "scale({a}, {c})"),
            LinOpExpr::Sum(l, r) => write!(f, "sum({l}, {r})"),
            LinOpExpr::Compose(l, r) => write!(f, "compose({l}, {r})"),
            LinOpExpr::VStack(cs) => {
                write!(f, "vstack(")?;
                for (i, c) in cs.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, ")")
            }
            LinOpExpr::AdjointOf(c) => write!(f, "adjoint({c})"),
        }
    }
}

/// Shareable handle to an operator expression with a lazily derived adjoint.
#[derive(Debug, Clone)]
pub struct OperatorHandle {
    expr: Arc<LinOpExpr>,
    adjoint: Arc<OnceLock<Arc<LinOpExpr>>>,
}

impl PartialEq for OperatorHandle {
    fn eq(&self, other: &Self) -> bool {
        self.expr == other.expr
    }
}

impl From<LinOpExpr> for OperatorHandle {
    fn from(expr: LinOpExpr) -> Self {
        Self::from_expr(Arc::new(expr))
    }
}

impl OperatorHandle {
    pub fn from_expr(expr: Arc<LinOpExpr>) -> Self {
        Self {
            expr,
            adjoint: Arc::new(OnceLock::new()),
        }
    }

    pub fn dense(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinOpError> {
        Ok(LinOpExpr::Dense(DenseMatrix::new(rows, cols, data)?).into())
    }

    pub fn sparse(matrix: CscMatrix) -> Self {
        LinOpExpr::Sparse(matrix).into()
    }

    pub fn conv1d(kernel: Vec<f64>, n: usize) -> Result<Self, LinOpError> {
        Ok(LinOpExpr::Conv1D(Conv1D::new(kernel, n)?).into())
    }

    pub fn conv1d_with_crossover(
        kernel: Vec<f64>,
        n: usize,
        crossover: usize,
    ) -> Result<Self, LinOpError> {
        Ok(LinOpExpr::Conv1D(Conv1D::with_crossover(kernel, n, crossover)?).into())
    }

    pub fn identity(n: usize) -> Self {
        LinOpExpr::Identity(n).into()
    }

    pub fn zero(rows: usize, cols: usize) -> Self {
        LinOpExpr::Zero { rows, cols }.into()
    }

    pub fn scale(alpha: f64, op: &OperatorHandle) -> Self {
        LinOpExpr::Scale(alpha, op.expr.clone()).into()
    }

    pub fn sum(left: &OperatorHandle, right: &OperatorHandle) -> Result<Self, LinOpError> {
        if left.rows() != right.rows() {
            return Err(LinOpError::DimensionMismatch {
                context: "sum rows",
                expected: left.rows(),
                actual: right.rows(),
            });
        }
        if left.cols() != right.cols() {
            return Err(LinOpError::DimensionMismatch {
                context: "sum cols",
                expected: left.cols(),
                actual: right.cols(),
            });
        }
        Ok(LinOpExpr::Sum(left.expr.clone(), right.expr.clone()).into())
    }

    /// `left ∘ right`: applies `right` first.
    pub fn compose(left: &OperatorHandle, right: &OperatorHandle) -> Result<Self, LinOpError> {
        if left.cols() != right.rows() {
            return Err(LinOpError::DimensionMismatch {
                context: "compose inner dimension",
                expected: left.cols(),
                actual: right.rows(),
            });
        }
        Ok(LinOpExpr::Compose(left.expr.clone(), right.expr.clone()).into())
    }

    pub fn vstack(children: &[OperatorHandle]) -> Result<Self, LinOpError> {
        let first = children.first().ok_or(LinOpError::EmptyStack)?;
        for c in &children[1..] {
            if c.cols() != first.cols() {
                return Err(LinOpError::DimensionMismatch {
                    context: "vstack column count",
                    expected: first.cols(),
                    actual: c.cols(),
                });
            }
        }
        Ok(LinOpExpr::VStack(children.iter().map(|c| c.expr.clone()).collect()).into())
    }

    /// Horizontal concatenation, expressed as `adjoint(vstack(adjoints))`.
    pub fn hstack(children: &[OperatorHandle]) -> Result<Self, LinOpError> {
        let first = children.first().ok_or(LinOpError::EmptyStack)?;
        for c in &children[1..] {
            if c.rows() != first.rows() {
                return Err(LinOpError::DimensionMismatch {
                    context: "hstack row count",
                    expected: first.rows(),
                    actual: c.rows(),
                });
            }
        }
        let adjoints: Vec<_> = children.iter().map(|c| c.adjoint()).collect();
        Ok(Self::vstack(&adjoints)?.adjoint())
    }

    pub fn expr(&self) -> &Arc<LinOpExpr> {
        &self.expr
    }

    pub fn rows(&self) -> usize {
        self.expr.rows()
    }

    pub fn cols(&self) -> usize {
        self.expr.cols()
    }

    fn adjoint_expr(&self) -> &Arc<LinOpExpr> {
        self.adjoint.get_or_init(|| derive_adjoint(&self.expr))
    }

    /// Handle to the structurally derived adjoint.
    pub fn adjoint(&self) -> OperatorHandle {
        OperatorHandle::from_expr(self.adjoint_expr().clone())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, LinOpError> {
        if x.len() != self.cols() {
            return Err(LinOpError::DimensionMismatch {
                context: "forward input",
                expected: self.cols(),
                actual: x.len(),
            });
        }
        Ok(apply(&self.expr, x))
    }

    /// `Aᵀy`, evaluated by applying the derived adjoint expression forward.
    pub fn adjoint_apply(&self, y: &[f64]) -> Result<Vec<f64>, LinOpError> {
        if y.len() != self.rows() {
            return Err(LinOpError::DimensionMismatch {
                context: "adjoint input",
                expected: self.rows(),
                actual: y.len(),
            });
        }
        Ok(apply(self.adjoint_expr(), y))
    }

    /// Dense row-major copy of the operator; column `j` is `forward(e_j)`.
    pub fn materialize_dense(&self) -> Result<DenseMatrix, LinOpError> {
        self.materialize_dense_with_cap(DEFAULT_MATERIALIZE_CAP)
    }

    pub fn materialize_dense_with_cap(&self, cap: usize) -> Result<DenseMatrix, LinOpError> {
        let (rows, cols) = (self.rows(), self.cols());
        if rows.saturating_mul(cols) > cap {
            return Err(LinOpError::CapExceeded { rows, cols, cap });
        }
        let mut data = vec![0.0; rows * cols];
        let mut unit = vec![0.0; cols];
        for j in 0..cols {
            unit[j] = 1.0;
            for (i, v) in apply(&self.expr, &unit).into_iter().enumerate() {
                data[i * cols + j] = v;
            }
            unit[j] = 0.0;
        }
        DenseMatrix::new(rows, cols, data)
    }

    /// Nonzero count of the equivalent matrix. Exact for block structures built
    /// from leaves; sums and general compositions report an upper bound. A
    /// convolution counts `n` times the number of nonzero kernel taps.
    pub fn nnz_estimate(&self) -> usize {
        nnz(&self.expr)
    }
}

impl fmt::Display for OperatorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.expr.fmt(f)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
