mod common;

use common::*;
use conegraph::linop::derive_adjoint;
use conegraph::OperatorHandle;
use proptest::prelude::*;

fn shaped_operator() -> impl Strategy<Value = (u64, usize, usize)> {
    (any::<u64>(), 1usize..=50, 1usize..=50)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn adjoint_identity((seed, rows, cols) in shaped_operator()) {
        let mut r = rng(seed);
        let op = random_operator(&mut r, rows, cols, 4);
        prop_assert_eq!((op.rows(), op.cols()), (rows, cols));
        let defect = adjoint_defect(&op, &mut r);
        prop_assert!(defect <= 1e-10, "{} on {}", defect, op);
    }

    #[test]
    fn matches_materialized((seed, rows, cols) in (any::<u64>(), 1usize..=12, 1usize..=12)) {
        let mut r = rng(seed);
        let op = random_operator(&mut r, rows, cols, 3);
        let dense = to_dense(&op);
        let x = randn(&mut r, cols);
        let y = randn(&mut r, rows);
        let want = (&dense * nalgebra::DVector::from_column_slice(&x)).as_slice().to_vec();
        let want_t = (dense.transpose() * nalgebra::DVector::from_column_slice(&y)).as_slice().to_vec();
        let got = op.forward(&x).unwrap();
        let got_t = op.adjoint_apply(&y).unwrap();
        let scale = 1.0 + norm(&want);
        prop_assert!(rel_err(&got, &want) * norm(&want) <= 1e-10 * scale);
        prop_assert!(rel_err(&got_t, &want_t) * norm(&want_t) <= 1e-10 * (1.0 + norm(&want_t)));
    }

    #[test]
    fn double_adjoint_is_exact((seed, rows, cols) in shaped_operator()) {
        let mut r = rng(seed);
        let op = random_operator(&mut r, rows, cols, 4);
        let x = randn(&mut r, cols);
        prop_assert_eq!(op.adjoint().adjoint_apply(&x).unwrap(), op.forward(&x).unwrap());
        let twice = derive_adjoint(&derive_adjoint(op.expr()));
        prop_assert_eq!(twice.rows(), rows);
        prop_assert_eq!(twice.cols(), cols);
    }

    #[test]
    fn linearity((seed, rows, cols) in shaped_operator(), alpha in -3.0f64..3.0) {
        let mut r = rng(seed);
        let op = random_operator(&mut r, rows, cols, 3);
        let x = randn(&mut r, cols);
        let y = randn(&mut r, cols);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + b).collect();
        let lhs = op.forward(&combo).unwrap();
        let ax = op.forward(&x).unwrap();
        let ay = op.forward(&y).unwrap();
        let rhs: Vec<f64> = ax.iter().zip(&ay).map(|(a, b)| alpha * a + b).collect();
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        prop_assert!(norm(&diff) <= 1e-10 * (1.0 + norm(&rhs)));
    }

    #[test]
    fn fft_matches_direct(seed in any::<u64>(), k in 1usize..=80, n in 1usize..=80) {
        let mut r = rng(seed);
        let kernel = randn(&mut r, k);
        let fft = OperatorHandle::conv1d_with_crossover(kernel.clone(), n, 0).unwrap();
        let direct = OperatorHandle::conv1d_with_crossover(kernel, n, usize::MAX).unwrap();
        let x = randn(&mut r, n);
        let y = randn(&mut r, k + n - 1);
        let (a, b) = (fft.forward(&x).unwrap(), direct.forward(&x).unwrap());
        prop_assert!(rel_err(&a, &b) <= 1e-10 || norm(&b) < 1e-300);
        let (a, b) = (fft.adjoint_apply(&y).unwrap(), direct.adjoint_apply(&y).unwrap());
        prop_assert!(rel_err(&a, &b) <= 1e-10 || norm(&b) < 1e-300);
    }

    #[test]
    fn nnz_bounded_by_size((seed, rows, cols) in shaped_operator()) {
        let mut r = rng(seed);
        let op = random_operator(&mut r, rows, cols, 4);
        prop_assert!(op.nnz_estimate() <= rows * cols);
    }
}

#[test]
fn large_convolution_is_matrix_free() {
    let n = 100_000;
    let op = OperatorHandle::conv1d(vec![1.0; 64], n).unwrap();
    // a dense form would need (n + 63)·n entries
    assert!(op.materialize_dense().is_err());
    let y = op.forward(&vec![1.0; n]).unwrap();
    assert_eq!(y.len(), n + 63);
    assert_eq!(y[100], 64.0);
}
