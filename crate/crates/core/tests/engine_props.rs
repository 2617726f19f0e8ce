use dgsml::engine::{grad, EngineError, Graph, Tensor};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize, range: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-range..range, r * c).prop_map(move |v| Tensor::new(&[r, c], v).unwrap())
    })
}

/// `x: [m, k]` and `w: [k, n]`.
fn conforming_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1..=4usize, 1..=5usize, 1..=3usize).prop_flat_map(|(m, k, n)| {
        (
            prop::collection::vec(-2.0..2.0, m * k),
            prop::collection::vec(-1.0..1.0, k * n),
        )
            .prop_map(move |(a, b)| (Tensor::new(&[m, k], a).unwrap(), Tensor::new(&[k, n], b).unwrap()))
    })
}

fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let base = x.to_vec();
    (0..base.len())
        .map(|i| {
            let mut up = base.clone();
            let mut down = base.clone();
            up[i] += h;
            down[i] -= h;
            let up = Tensor::new(x.shape(), up).unwrap();
            let down = Tensor::new(x.shape(), down).unwrap();
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let s = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    d / s.max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(x in matrix(5, 7, 1e4)) {
        let p = x.softmax(1).unwrap();
        let cols = x.cols();
        for row in p.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        prop_assert!(x.log_softmax(1).unwrap().all_finite());
    }

    #[test]
    fn softmax_is_shift_invariant(x in matrix(3, 5, 5.0), shift in -50.0f64..50.0) {
        let a = x.softmax(1).unwrap();
        let b = x.add(&Tensor::scalar(shift)).unwrap().softmax(1).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_gradient_is_exactly_zero(x in matrix(3, 4, 2.0), y in matrix(3, 4, 2.0)) {
        let g = Graph::new();
        let x = g.leaf(&x);
        let y = g.leaf(&y);
        let out = x.exp().unwrap().sum().unwrap();
        let grads = grad(&out, &[&y], true).unwrap();
        prop_assert!(grads[0].data().iter().all(|&v| v == 0.0));
        prop_assert_eq!(grads[0].shape(), y.shape());
    }

    #[test]
    fn composite_matches_finite_differences((x, w) in conforming_pair()) {
        let f = |x: &Tensor| -> Tensor {
            x.matmul(&w).unwrap().relu().unwrap().log_softmax(1).unwrap().exp().unwrap()
                .squared_l2_norm().unwrap()
        };
        // keep clear of relu kinks
        let pre = x.matmul(&w).unwrap();
        prop_assume!(pre.data().iter().all(|v| v.abs() > 1e-3));
        let g = Graph::new();
        let xl = g.leaf(&x);
        let analytic = grad(&f(&xl), &[&xl], false).unwrap()[0].to_vec();
        let numeric = numeric_grad(&x, |t| f(t).item());
        prop_assert!(rel_err(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn second_derivative_of_cross_term(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        // f = x^2 y^3; d/dy (df/dx) = 6 x y^2
        let g = Graph::new();
        let x = g.leaf(&Tensor::scalar(a));
        let y = g.leaf(&Tensor::scalar(b));
        let f = x.mul(&x).unwrap().mul(&y.mul(&y).unwrap().mul(&y).unwrap()).unwrap();
        let dx = grad(&f, &[&x], true).unwrap().remove(0);
        let dxy = grad(&dx, &[&y], false).unwrap()[0].item();
        prop_assert!((dxy - 6.0 * a * b * b).abs() < 1e-10);
    }

    #[test]
    fn broadcast_add_matches_loop(x in matrix(4, 5, 3.0), seed in 0u64..1000) {
        let cols = x.cols();
        let row: Vec<f64> = (0..cols).map(|k| ((seed + k as u64) % 7) as f64 - 3.0).collect();
        let r = Tensor::new(&[1, cols], row.clone()).unwrap();
        let out = x.add(&r).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            prop_assert_eq!(*v, x.data()[i] + row[i % cols]);
        }
        prop_assert_eq!(r.add(&x).unwrap().to_vec(), out.to_vec());
    }

    #[test]
    fn concat_then_select_is_identity(a in matrix(3, 4, 2.0)) {
        let b = a.scale(2.0).unwrap();
        let both = Tensor::concat_rows(&[&a, &b]).unwrap();
        let back: Vec<usize> = (0..a.rows()).collect();
        prop_assert_eq!(both.select_rows(&back).unwrap().to_vec(), a.to_vec());
    }
}

#[test]
fn spec_examples() {
    let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
    let b = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    let r = Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap().relu().unwrap();
    assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    assert_eq!(
        Tensor::vector(vec![3.0, 4.0])
            .unwrap()
            .squared_l2_norm()
            .unwrap()
            .item(),
        25.0
    );
    let s = Tensor::from_rows(&[[1.0f64.ln(), 3.0f64.ln()]])
        .unwrap()
        .softmax(1)
        .unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    let s = Tensor::from_rows(&[[1000.0, 1000.0]]).unwrap().softmax(1).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn error_contracts() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 2]);
    assert!(matches!(a.matmul(&b), Err(EngineError::Dimension { .. })));
    assert!(matches!(a.add(&b), Err(EngineError::Dimension { .. })));
    assert!(matches!(
        Tensor::vector(vec![1.0, 0.0]).unwrap().log(),
        Err(EngineError::Domain { .. })
    ));
    let g = Graph::new();
    let x = g.leaf(&a);
    assert!(matches!(grad(&x, &[&x], false), Err(EngineError::Contract(_))));
}

#[test]
fn backward_visits_each_node_once() {
    // a long chain: repeated reuse of the same node must not blow up
    let g = Graph::new();
    let x = g.leaf(&Tensor::scalar(1.0001));
    let mut y = x.clone();
    for _ in 0..60 {
        y = y.add(&y).unwrap().scale(0.5).unwrap().mul(&x).unwrap();
    }
    let d = grad(&y, &[&x], false).unwrap()[0].item();
    // y = x^61, dy/dx = 61 x^60
    assert!((d - 61.0 * 1.0001f64.powi(60)).abs() < 1e-9);
}
