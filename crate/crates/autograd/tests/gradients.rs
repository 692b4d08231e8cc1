//! Finite-difference oracles for the backward pass.

use foleyflow_autograd::check::{builtin_cases, grad_check, run_cases, PointStream};
use foleyflow_autograd::{Axis, Tape, Tensor, Var};
use proptest::prelude::*;

/// f(x) = x^2 at x = 3: analytic and numeric derivatives agree to 1e-9.
#[test]
fn grad_check_quadratic_is_tight() {
    let point = Tensor::matrix(1, 1, vec![3.0]).unwrap();
    let res = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let zero = t.input(Tensor::matrix(1, 1, vec![0.0]).unwrap());
            t.mse(v[0], zero)
        },
        &[point],
        1e-6,
    )
    .unwrap();
    assert!(res.max_rel_err <= 1e-9, "err {}", res.max_rel_err);
}

/// A random 3-layer MLP: every leaf gradient matches central differences
/// within 1e-5 relative at 64-bit.
#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut s = PointStream::new(41);
    let points = vec![
        s.tensor(6, 5),          // input
        s.tensor(5, 8),          // w1
        s.vector(8),             // b1
        s.tensor(8, 8),          // w2
        s.vector(8),             // b2
        s.tensor(8, 3),          // w3
        s.vector(3),             // b3
        s.tensor(6, 3),          // target
    ];
    let res = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let h1 = t.matmul(v[0], v[1])?;
            let h1 = t.add_bias(h1, v[2])?;
            let h1 = t.gelu(h1)?;
            let h2 = t.matmul(h1, v[3])?;
            let h2 = t.add_bias(h2, v[4])?;
            let h2 = t.gelu(h2)?;
            let h3 = t.matmul(h2, v[5])?;
            let h3 = t.add_bias(h3, v[6])?;
            t.mse(h3, v[7])
        },
        &points,
        1e-6,
    )
    .unwrap();
    assert!(res.max_rel_err <= 1e-5, "err {}", res.max_rel_err);
}

#[test]
fn builtin_suite_passes() {
    let outcomes = run_cases(&builtin_cases(7));
    for o in &outcomes {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
    assert!(outcomes.len() >= 15);
}

#[test]
fn injected_bad_gradient_fails_by_name() {
    let case = foleyflow_autograd::check::injected_bad_gradient_case();
    let outcomes = run_cases(&[case]);
    assert_eq!(outcomes[0].name, "injected_bad_gradient");
    assert!(!outcomes[0].passed);
}

#[test]
fn grad_check_reports_non_finite_coordinate() {
    let mut bad = Tensor::matrix(1, 3, vec![0.0, f64::NAN, 1.0]).unwrap();
    bad.data_mut()[1] = f64::NAN;
    let err = grad_check(
        |t: &mut Tape<f64>, v: &[Var]| {
            let zero = t.input(Tensor::zeros(vec![1, 3]));
            t.mse(v[0], zero)
        },
        &[bad],
        1e-6,
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("non-finite"), "{msg}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 120, ..ProptestConfig::default() })]

    /// Every forward op passes a randomized finite-difference check.
    #[test]
    fn all_ops_match_finite_differences(seed in any::<u64>()) {
        for outcome in run_cases(&builtin_cases(seed)) {
            prop_assert!(outcome.passed, "{}: {}", outcome.name, outcome.detail);
        }
    }

    /// concat then split is the identity on values and routes gradients
    /// back losslessly, bit-exact at 64-bit.
    #[test]
    fn concat_split_identity_and_gradient_routing(
        rows in 1usize..6,
        w1 in 1usize..5,
        w2 in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut s = PointStream::new(seed);
        let a = s.tensor(rows, w1);
        let b = s.tensor(rows, w2);

        let mut t = Tape::<f64>::new();
        let av = t.param(a.clone().with_grad());
        let bv = t.param(b.clone().with_grad());
        let joined = t.concat(Axis::Cols, &[av, bv]).unwrap();
        let parts = t.split(Axis::Cols, joined, &[w1, w2]).unwrap();
        prop_assert_eq!(t.value(parts[0]).data(), a.data());
        prop_assert_eq!(t.value(parts[1]).data(), b.data());

        // Loss touches only the second part: its gradient must land solely
        // on `b`, element for element.
        let target = t.input(Tensor::zeros(vec![rows, w2]));
        let loss = t.mse(parts[1], target).unwrap();
        let grads = t.backward(loss).unwrap();
        let gb = grads.wrt(bv).unwrap();
        let expected: Vec<f64> = b
            .data()
            .iter()
            .map(|&v| 2.0 * v / (rows * w2) as f64)
            .collect();
        prop_assert_eq!(gb.data(), &expected[..]);
        let ga = grads.wrt(av).unwrap();
        prop_assert!(ga.data().iter().all(|&g| g == 0.0));
    }
}
