//! Builders and data generators for the benchmark problem families:
//! regularized least squares, lasso and nonnegative deconvolution.
//!
//! Cone-form builders stuff the problem with operator expressions only; no
//! block matrix is ever materialized.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cg::{make_normal_operator, CgSpec, DEFAULT_TOL};
use crate::cones::{Cone, ConeProduct};
use crate::linop::{dot, CscMatrix, LinOpError, OperatorHandle};
use crate::scs::{ConeProblem, ScsError};

pub const NOISE_STD: f64 = 0.01;
pub const SPARSE_DENSITY: f64 = 0.01;
/// Nonzeros in the deconvolution ground truth.
pub const DECONV_SPIKES: usize = 5;

#[derive(Debug, Error)]
pub enum CanonError {
    #[error(transparent)]
    LinOp(#[from] LinOpError),
    #[error(transparent)]
    Scs(#[from] ScsError),
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, CanonError> {
    Err(CanonError::Invalid(msg.into()))
}

/// `minimize (1/2)‖Ax − b‖² + (λ/2)‖x‖²`, solved by `(λI + AᵀA)x = Aᵀb`.
#[derive(Debug, Clone)]
pub struct RegLsProblem {
    pub a: OperatorHandle,
    pub b: Vec<f64>,
    pub lam: f64,
}

impl RegLsProblem {
    pub fn new(a: OperatorHandle, b: Vec<f64>, lam: f64) -> Result<Self, CanonError> {
        if b.len() != a.rows() {
            return invalid(format!("b has length {}, A has {} rows", b.len(), a.rows()));
        }
        if !(lam > 0.0) {
            return invalid("lambda must be positive");
        }
        Ok(Self { a, b, lam })
    }

    pub fn objective(&self, x: &[f64]) -> Result<f64, CanonError> {
        let r = residual(&self.a, x, &self.b)?;
        Ok(0.5 * dot(&r, &r) + 0.5 * self.lam * dot(x, x))
    }
}

/// `minimize (1/2)‖Ax − b‖² + λ‖x‖₁`.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    pub a: OperatorHandle,
    pub b: Vec<f64>,
    pub lam: f64,
}

impl LassoProblem {
    pub fn new(a: OperatorHandle, b: Vec<f64>, lam: f64) -> Result<Self, CanonError> {
        if b.len() != a.rows() {
            return invalid(format!("b has length {}, A has {} rows", b.len(), a.rows()));
        }
        if !(lam > 0.0) {
            return invalid("lambda must be positive");
        }
        Ok(Self { a, b, lam })
    }

    /// Uses `λ = 0.1·‖Aᵀb‖∞`.
    pub fn with_default_lambda(a: OperatorHandle, b: Vec<f64>) -> Result<Self, CanonError> {
        let lam = 0.1 * lambda_max(&a, &b)?;
        Self::new(a, b, lam)
    }

    pub fn objective(&self, x: &[f64]) -> Result<f64, CanonError> {
        let r = residual(&self.a, x, &self.b)?;
        Ok(0.5 * dot(&r, &r) + self.lam * x.iter().map(|v| v.abs()).sum::<f64>())
    }
}

/// `minimize ‖c ∗ x − b‖ s.t. x ≥ 0` with `c ∈ Rⁿ`, `b ∈ R²ⁿ⁻¹`.
#[derive(Debug, Clone)]
pub struct DeconvProblem {
    pub c: Vec<f64>,
    pub b: Vec<f64>,
}

impl DeconvProblem {
    pub fn new(c: Vec<f64>, b: Vec<f64>) -> Result<Self, CanonError> {
        if c.is_empty() {
            return invalid("kernel is empty");
        }
        if b.len() != 2 * c.len() - 1 {
            return invalid(format!("b has length {}, expected {}", b.len(), 2 * c.len() - 1));
        }
        Ok(Self { c, b })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn operator(&self) -> Result<OperatorHandle, CanonError> {
        Ok(OperatorHandle::conv1d(self.c.clone(), self.n())?)
    }

    pub fn objective(&self, x: &[f64]) -> Result<f64, CanonError> {
        let r = residual(&self.operator()?, x, &self.b)?;
        Ok(dot(&r, &r).sqrt())
    }
}

fn residual(a: &OperatorHandle, x: &[f64], b: &[f64]) -> Result<Vec<f64>, CanonError> {
    let mut r = a.forward(x)?;
    r.iter_mut().zip(b).for_each(|(r, b)| *r -= b);
    Ok(r)
}

/// `‖Aᵀb‖∞`, the smallest `λ` for which the lasso solution is zero.
pub fn lambda_max(a: &OperatorHandle, b: &[f64]) -> Result<f64, CanonError> {
    Ok(a.adjoint_apply(b)?.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// CG spec for `(λI + AᵀA)x = Aᵀb` from zero at tolerance 1e-8.
pub fn build_regls(p: &RegLsProblem) -> Result<CgSpec, CanonError> {
    let rhs = p.a.adjoint_apply(&p.b)?;
    Ok(CgSpec::new(make_normal_operator(&p.a, p.lam), rhs).with_tol(DEFAULT_TOL))
}

/// Stuffs the lasso over `z = (x, w, q)`:
///
/// ```text
/// minimize  λ·1ᵀw + q
/// s.t.      (w − x, w + x) ≥ 0
///           (1 + 2q, 2(Ax − b), 1 − 2q) ∈ SOC(m + 2)
/// ```
///
/// The cone constraint is `(1/2)‖Ax − b‖² ≤ q`.
pub fn build_lasso(p: &LassoProblem) -> Result<ConeProblem, CanonError> {
    let (m, n) = (p.a.rows(), p.a.cols());
    let id = OperatorHandle::identity(n);
    let neg_id = OperatorHandle::scale(-1.0, &id);
    let zn = |rows| OperatorHandle::zero(rows, n);
    let zq = |rows| OperatorHandle::zero(rows, 1);
    let q = |alpha| OperatorHandle::scale(alpha, &OperatorHandle::identity(1));

    let rows = [
        OperatorHandle::hstack(&[neg_id, id.clone(), zq(n)])?,
        OperatorHandle::hstack(&[id, OperatorHandle::identity(n), zq(n)])?,
        OperatorHandle::hstack(&[zn(1), zn(1), q(2.0)])?,
        OperatorHandle::hstack(&[OperatorHandle::scale(2.0, &p.a), zn(m), zq(m)])?,
        OperatorHandle::hstack(&[zn(1), zn(1), q(-2.0)])?,
    ];
    let a = OperatorHandle::vstack(&rows)?;

    let mut b = vec![0.0; 2 * n];
    b.push(1.0);
    b.extend(p.b.iter().map(|v| -2.0 * v));
    b.push(1.0);

    let mut c = vec![0.0; n];
    c.extend(std::iter::repeat_n(p.lam, n));
    c.push(1.0);

    let cones = ConeProduct::new(vec![Cone::NonNeg(2 * n), Cone::SecondOrder(m + 2)])
        .expect("nonempty cones");
    Ok(ConeProblem::from_affine(&a, b, c, cones)?)
}

/// Stuffs deconvolution over `(x, t)`: minimize `t` s.t. `x ≥ 0`,
/// `(t, c ∗ x − b) ∈ SOC(2n)`.
pub fn build_deconv(p: &DeconvProblem) -> Result<ConeProblem, CanonError> {
    let n = p.n();
    let conv = p.operator()?;
    let rows = [
        OperatorHandle::hstack(&[OperatorHandle::identity(n), OperatorHandle::zero(n, 1)])?,
        OperatorHandle::hstack(&[OperatorHandle::zero(1, n), OperatorHandle::identity(1)])?,
        OperatorHandle::hstack(&[conv, OperatorHandle::zero(2 * n - 1, 1)])?,
    ];
    let a = OperatorHandle::vstack(&rows)?;
    let mut b = vec![0.0; n + 1];
    b.extend(p.b.iter().map(|v| -v));
    let mut c = vec![0.0; n];
    c.push(1.0);
    let cones = ConeProduct::new(vec![Cone::NonNeg(n), Cone::SecondOrder(2 * n)]).expect("nonempty cones");
    Ok(ConeProblem::from_affine(&a, b, c, cones)?)
}

/// Stuffed `(variables, constraints)` for the lasso with `A ∈ R^{m×n}`.
pub fn lasso_dims(m: usize, n: usize) -> (usize, usize) {
    (2 * n + 1, 2 * n + m + 2)
}

/// Stuffed `(variables, constraints)` for deconvolution of length `n`.
pub fn deconv_dims(n: usize) -> (usize, usize) {
    (n + 1, 3 * n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dense,
    Sparse,
    Conv,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Dense => "dense",
            Family::Sparse => "sparse",
            Family::Conv => "conv",
        }
    }

    /// Rows of the generated operator for `n` columns.
    pub fn rows(&self, n: usize) -> usize {
        match self {
            Family::Dense | Family::Sparse => 2 * n,
            Family::Conv => 2 * n - 1,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = CanonError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(Family::Dense),
            "sparse" => Ok(Family::Sparse),
            "conv" => Ok(Family::Conv),
            other => invalid(format!("unknown family '{other}'")),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

// Independent streams so the operator can be regenerated without the rest.
const STREAM_OPERATOR: u64 = 0;
const STREAM_TRUTH: u64 = 1;
const STREAM_NOISE: u64 = 2;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normals(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gaussian kernel `k_i ∝ exp(−(i − n/2)² / (2(n/10)²))`, summing to one.
pub fn gaussian_kernel(n: usize) -> Vec<f64> {
    let center = n as f64 / 2.0;
    let sigma = n as f64 / 10.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// The random operator of a family, determined by `(n, seed)`.
pub fn gen_operator(family: Family, n: usize, seed: u64) -> Result<OperatorHandle, CanonError> {
    if n < 2 {
        return invalid("n must be at least 2");
    }
    let m = family.rows(n);
    let mut r = rng(seed, STREAM_OPERATOR);
    Ok(match family {
        Family::Dense => OperatorHandle::dense(m, n, normals(&mut r, m * n, 1.0))?,
        Family::Sparse => {
            let per_col = Binomial::new(m as u64, SPARSE_DENSITY).expect("valid binomial");
            let mut col_ptr = Vec::with_capacity(n + 1);
            let mut row_idx = Vec::new();
            let mut values = Vec::new();
            col_ptr.push(0);
            for _ in 0..n {
                let count = per_col.sample(&mut r) as usize;
                let mut rows = sample(&mut r, m, count).into_vec();
                rows.sort_unstable();
                for row in rows {
                    row_idx.push(row);
                    values.push(r.sample::<f64, _>(StandardNormal));
                }
                col_ptr.push(row_idx.len());
            }
            OperatorHandle::sparse(CscMatrix::new(m, n, col_ptr, row_idx, values)?)
        }
        Family::Conv => OperatorHandle::conv1d(gaussian_kernel(n), n)?,
    })
}

/// Generates `(A, b, x̂)` with `b = A x̂ + v`, `x̂ ~ N(0, 1)`, `v ~ N(0, 0.01²)`.
pub fn gen_data(family: Family, n: usize, seed: u64) -> Result<(OperatorHandle, Vec<f64>, Vec<f64>), CanonError> {
    let a = gen_operator(family, n, seed)?;
    let x_hat = normals(&mut rng(seed, STREAM_TRUTH), n, 1.0);
    let mut b = a.forward(&x_hat)?;
    let noise = normals(&mut rng(seed, STREAM_NOISE), b.len(), NOISE_STD);
    b.iter_mut().zip(noise).for_each(|(b, v)| *b += v);
    Ok((a, b, x_hat))
}

/// Generates a deconvolution instance with a Gaussian kernel and a ground
/// truth of five nonnegative spikes uniform on `[0, n/10]`. Noise is added
/// to `b` unless `noiseless`.
pub fn gen_deconv(n: usize, seed: u64, noiseless: bool) -> Result<(DeconvProblem, Vec<f64>), CanonError> {
    if n < 2 {
        return invalid("n must be at least 2");
    }
    let mut r = rng(seed, STREAM_TRUTH);
    let mut x_hat = vec![0.0; n];
    let hi = n as f64 / 10.0;
    for i in sample(&mut r, n, DECONV_SPIKES.min(n)) {
        x_hat[i] = r.random_range(0.0..=hi);
    }
    let c = gaussian_kernel(n);
    let mut b = OperatorHandle::conv1d(c.clone(), n)?.forward(&x_hat)?;
    if !noiseless {
        let noise = normals(&mut rng(seed, STREAM_NOISE), b.len(), NOISE_STD);
        b.iter_mut().zip(noise).for_each(|(b, v)| *b += v);
    }
    Ok((DeconvProblem::new(c, b)?, x_hat))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Regls,
    Lasso,
    Deconv,
}

impl ProblemKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProblemKind::Regls => "regls",
            ProblemKind::Lasso => "lasso",
            ProblemKind::Deconv => "deconv",
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = CanonError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regls" => Ok(ProblemKind::Regls),
            "lasso" => Ok(ProblemKind::Lasso),
            "deconv" => Ok(ProblemKind::Deconv),
            other => invalid(format!("unknown problem '{other}'")),
        }
    }
}

/// A replayable instance. The operator is regenerated from `(family, n,
/// seed)`; `b` and `x_hat` are stored as generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub problem: ProblemKind,
    pub family: Family,
    pub n: usize,
    pub seed: u64,
    pub lam: Option<f64>,
    pub b: Vec<f64>,
    pub x_hat: Vec<f64>,
}

/// Default weight for regularized least squares.
pub const REGLS_DEFAULT_LAMBDA: f64 = 1.0;

pub enum Built {
    Regls(RegLsProblem),
    Lasso(LassoProblem),
    Deconv(DeconvProblem),
}

impl ProblemInstance {
    /// Generates an instance; deconvolution always uses the convolution family.
    pub fn generate(problem: ProblemKind, family: Family, n: usize, seed: u64) -> Result<Self, CanonError> {
        Ok(match problem {
            ProblemKind::Deconv => {
                let (p, x_hat) = gen_deconv(n, seed, false)?;
                Self {
                    problem,
                    family: Family::Conv,
                    n,
                    seed,
                    lam: None,
                    b: p.b,
                    x_hat,
                }
            }
            ProblemKind::Regls | ProblemKind::Lasso => {
                let (a, b, x_hat) = gen_data(family, n, seed)?;
                let lam = match problem {
                    ProblemKind::Regls => REGLS_DEFAULT_LAMBDA,
                    _ => 0.1 * lambda_max(&a, &b)?,
                };
                if lam == 0.0 {
                    return invalid("Aᵀb is zero, so the default lambda is zero; use a larger n or another seed");
                }
                Self {
                    problem,
                    family,
                    n,
                    seed,
                    lam: Some(lam),
                    b,
                    x_hat,
                }
            }
        })
    }

    pub fn build(&self) -> Result<Built, CanonError> {
        let lam = || self.lam.ok_or_else(|| CanonError::Invalid("instance has no lambda".into()));
        Ok(match self.problem {
            ProblemKind::Regls => Built::Regls(RegLsProblem::new(
                gen_operator(self.family, self.n, self.seed)?,
                self.b.clone(),
                lam()?,
            )?),
            ProblemKind::Lasso => Built::Lasso(LassoProblem::new(
                gen_operator(self.family, self.n, self.seed)?,
                self.b.clone(),
                lam()?,
            )?),
            ProblemKind::Deconv => Built::Deconv(DeconvProblem::new(gaussian_kernel(self.n), self.b.clone())?),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("instance serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CanonError> {
        serde_json::from_str(s).map_err(|e| CanonError::Invalid(e.to_string()))
    }
}
