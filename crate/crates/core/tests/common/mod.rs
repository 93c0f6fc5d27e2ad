#![allow(dead_code)]

use conegraph::scs::ConeProblem;
use conegraph::{Cone, ConeProduct, OperatorHandle};
use nalgebra::{DMatrix, DVector};
use conegraph::linop::CscMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn to_dense(op: &OperatorHandle) -> DMatrix<f64> {
    let d = op.materialize_dense().unwrap();
    DMatrix::from_row_slice(d.rows(), d.cols(), d.data())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-300)
}

fn lipschitz(a: &DMatrix<f64>) -> f64 {
    let s = a.clone().svd(false, false).singular_values;
    s.max().powi(2)
}

/// Accelerated proximal gradient on `½‖Ax − b‖² + g(x)` with `prox` the
/// proximal map of `step·g`; stops when successive iterates differ by at most
/// `tol·max(1, ‖x‖)`.
fn fista(
    a: &DMatrix<f64>,
    b: &[f64],
    prox: impl Fn(&mut DVector<f64>, f64),
    tol: f64,
    max_iter: usize,
) -> Vec<f64> {
    let b = DVector::from_column_slice(b);
    let step = 1.0 / lipschitz(a);
    let at = a.transpose();
    let mut x = DVector::zeros(a.ncols());
    let mut y = x.clone();
    let mut t: f64 = 1.0;
    for _ in 0..max_iter {
        let grad = &at * (a * &y - &b);
        let mut next = &y - grad * step;
        prox(&mut next, step);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let diff = (&next - &x).norm();
        // gradient restart keeps the momentum monotone on ill-conditioned data
        let restart = (&next - &x).dot(&(&y - &next)) > 0.0;
        y = if restart {
            t = 1.0;
            next.clone()
        } else {
            &next + (&next - &x) * ((t - 1.0) / t_next)
        };
        if !restart {
            t = t_next;
        }
        x = next;
        if diff <= tol * x.norm().max(1.0) {
            break;
        }
    }
    x.as_slice().to_vec()
}

pub fn lasso_oracle(a: &DMatrix<f64>, b: &[f64], lam: f64) -> Vec<f64> {
    fista(
        a,
        b,
        |x, step| {
            x.apply(|v| *v = v.signum() * (v.abs() - lam * step).max(0.0));
        },
        1e-8,
        1_000_000,
    )
}

pub fn nonneg_ls_oracle(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    fista(a, b, |x, _| x.apply(|v| *v = v.max(0.0)), 1e-10, 2_000_000)
}

pub fn dense_solve(m: &DMatrix<f64>, rhs: &[f64]) -> Vec<f64> {
    m.clone()
        .lu()
        .solve(&DVector::from_column_slice(rhs))
        .expect("nonsingular")
        .as_slice()
        .to_vec()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_leaf(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> OperatorHandle {
    loop {
        match rng.random_range(0..5) {
            0 => return OperatorHandle::dense(rows, cols, randn(rng, rows * cols)).unwrap(),
            1 => {
                let mut t = Vec::new();
                for r in 0..rows {
                    for c in 0..cols {
                        if rng.random_bool(0.3) {
                            t.push((r, c, rng.sample(StandardNormal)));
                        }
                    }
                }
                return OperatorHandle::sparse(CscMatrix::from_triplets(rows, cols, &t).unwrap());
            }
            2 if rows == cols => return OperatorHandle::identity(rows),
            3 => return OperatorHandle::zero(rows, cols),
            4 if rows >= cols => {
                let k = rows - cols + 1;
                let crossover = if rng.random_bool(0.5) { 0 } else { usize::MAX };
                return OperatorHandle::conv1d_with_crossover(randn(rng, k), cols, crossover).unwrap();
            }
            _ => {}
        }
    }
}

/// Random operator expression of the given shape using every expression kind.
pub fn random_operator(rng: &mut ChaCha8Rng, rows: usize, cols: usize, depth: usize) -> OperatorHandle {
    if depth == 0 || rng.random_bool(0.25) {
        return random_leaf(rng, rows, cols);
    }
    let d = depth - 1;
    loop {
        match rng.random_range(0..6) {
            0 => {
                let alpha = rng.random_range(-2.0..2.0);
                return OperatorHandle::scale(alpha, &random_operator(rng, rows, cols, d));
            }
            1 => {
                let l = random_operator(rng, rows, cols, d);
                let r = random_operator(rng, rows, cols, d);
                return OperatorHandle::sum(&l, &r).unwrap();
            }
            2 => {
                let inner = rng.random_range(1..=8);
                let l = random_operator(rng, rows, inner, d);
                let r = random_operator(rng, inner, cols, d);
                return OperatorHandle::compose(&l, &r).unwrap();
            }
            3 if rows >= 2 => {
                let split = rng.random_range(1..rows);
                let top = random_operator(rng, split, cols, d);
                let bottom = random_operator(rng, rows - split, cols, d);
                return OperatorHandle::vstack(&[top, bottom]).unwrap();
            }
            4 if cols >= 2 => {
                let split = rng.random_range(1..cols);
                let left = random_operator(rng, rows, split, d);
                let right = random_operator(rng, rows, cols - split, d);
                return OperatorHandle::hstack(&[left, right]).unwrap();
            }
            5 => return random_operator(rng, cols, rows, d).adjoint(),
            _ => {}
        }
    }
}

/// `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / (1 + ‖Ax‖‖y‖)` at random `x`, `y`.
pub fn adjoint_defect(op: &OperatorHandle, rng: &mut ChaCha8Rng) -> f64 {
    let x = randn(rng, op.cols());
    let y = randn(rng, op.rows());
    let ax = op.forward(&x).unwrap();
    let aty = op.adjoint_apply(&y).unwrap();
    (dot(&ax, &y) - dot(&x, &aty)).abs() / (1.0 + norm(&ax) * norm(&y))
}

/// Random SPD matrix `BᵀB + shift·I`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let b = DMatrix::from_row_slice(n, n, &randn(rng, n * n));
    b.transpose() * &b + DMatrix::identity(n, n) * shift
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Materialized `I + Q` for a slack-form problem.
pub fn dense_embedding(p: &ConeProblem) -> DMatrix<f64> {
    let (n, m) = (p.n(), p.m());
    let a = to_dense(p.a());
    let d = n + m + 1;
    let mut q = DMatrix::<f64>::identity(d, d);
    for i in 0..m {
        for j in 0..n {
            q[(j, n + i)] += a[(i, j)];
            q[(n + i, j)] -= a[(i, j)];
        }
    }
    for j in 0..n {
        q[(j, d - 1)] += p.c()[j];
        q[(d - 1, j)] -= p.c()[j];
    }
    for i in 0..m {
        q[(n + i, d - 1)] += p.b()[i];
        q[(d - 1, n + i)] -= p.b()[i];
    }
    q
}

pub fn random_cone_problem(r: &mut ChaCha8Rng, n: usize, m: usize) -> ConeProblem {
    let a = OperatorHandle::dense(m, n, randn(r, m * n)).unwrap();
    ConeProblem::new(a, randn(r, m), randn(r, n), ConeProduct::new(vec![Cone::NonNeg(m)]).unwrap()).unwrap()
}
