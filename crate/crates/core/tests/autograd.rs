use proptest::prelude::*;

use fedprompt::autograd::{gelu_scalar, Graph, L2_EPS, LAYER_NORM_EPS};
use fedprompt::tensor::Tensor;
use fedprompt::ParameterSet;

fn row_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, n)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions_and_shift_free(x in row_strategy(5), shift in -50.0f64..50.0) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&x)).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let b = g.constant(Tensor::row(&shifted)).unwrap();
        let sa = g.softmax(a).unwrap();
        let sb = g.softmax(b).unwrap();
        let (pa, pb) = (g.value(sa).clone(), g.value(sb).clone());
        prop_assert!((pa.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(pa.data().iter().all(|&p| p >= 0.0));
        prop_assert!(pa.max_abs_diff(&pb) < 1e-12);
    }

    #[test]
    fn l2_normalize_is_unit_and_idempotent(x in row_strategy(6)) {
        prop_assume!(x.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&x)).unwrap();
        let n1 = g.l2_normalize(a, L2_EPS).unwrap();
        let n2 = g.l2_normalize(n1, L2_EPS).unwrap();
        prop_assert!((g.value(n1).norm() - 1.0).abs() < 1e-12);
        prop_assert!(g.value(n1).max_abs_diff(g.value(n2)) < 1e-12);
    }

    #[test]
    fn layer_norm_centers_and_scales(x in row_strategy(8)) {
        let mean = x.iter().sum::<f64>() / 8.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        prop_assume!(var > 1e-3);
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(&x)).unwrap();
        let gain = g.constant(Tensor::row(&[1.0; 8])).unwrap();
        let bias = g.constant(Tensor::row(&[0.0; 8])).unwrap();
        let y = g.layer_norm(a, gain, bias, LAYER_NORM_EPS).unwrap();
        let out = g.value(y).data().to_vec();
        prop_assert!(out.iter().sum::<f64>().abs() < 1e-9);
        let second = out.iter().map(|v| v * v).sum::<f64>() / 8.0;
        prop_assert!((second - var / (var + LAYER_NORM_EPS)).abs() < 1e-9);
    }

    #[test]
    fn matmul_is_linear(a in row_strategy(6), b in row_strategy(6), w in row_strategy(6), s in -3.0f64..3.0) {
        let mut g = Graph::new();
        let wv = g.constant(Tensor::new(vec![3, 2], w).unwrap()).unwrap();
        let av = g.constant(Tensor::new(vec![2, 3], a).unwrap()).unwrap();
        let bv = g.constant(Tensor::new(vec![2, 3], b).unwrap()).unwrap();
        let scaled = g.scale(bv, s).unwrap();
        let combo = g.add(av, scaled).unwrap();
        let lhs = g.matmul(combo, wv).unwrap();
        let aw = g.matmul(av, wv).unwrap();
        let bw = g.matmul(bv, wv).unwrap();
        let sbw = g.scale(bw, s).unwrap();
        let rhs = g.add(aw, sbw).unwrap();
        prop_assert!(g.value(lhs).max_abs_diff(g.value(rhs)) < 1e-9);
    }

    #[test]
    fn gelu_derivative_matches_differences(x in -6.0f64..6.0) {
        // The derivative crosses zero near -0.75, so compare absolutely.
        let mut params = ParameterSet::new();
        params.insert("x", Tensor::scalar(x)).unwrap();
        let mut g = Graph::new();
        let v = g.param(&params, "x").unwrap();
        let y = g.gelu(v).unwrap();
        g.backward_into(y, &mut params).unwrap();
        let analytic = params.get("x").unwrap().grad.as_ref().unwrap().data()[0];
        let h = 1e-5;
        let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
        prop_assert!((analytic - fd).abs() < 1e-9, "{analytic} vs {fd}");
        prop_assert!((gelu_scalar(x) - x * 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()))).abs() < 1e-15);
    }
}

#[test]
fn linear_loss_gradient_is_its_coefficients() {
    let mut params = ParameterSet::new();
    params.insert("w", Tensor::new(vec![2, 2], vec![0.3, -1.0, 2.0, 0.5]).unwrap()).unwrap();
    let coeff = Tensor::new(vec![2, 2], vec![1.5, -2.0, 0.25, 4.0]).unwrap();
    let mut g = Graph::new();
    let w = g.param(&params, "w").unwrap();
    let c = g.constant(coeff.clone()).unwrap();
    let prod = g.mul(w, c).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward_into(loss, &mut params).unwrap();
    assert!(params.get("w").unwrap().grad.as_ref().unwrap().bit_eq(&coeff));
}

#[test]
fn reused_parameter_accumulates_gradient() {
    let mut params = ParameterSet::new();
    params.insert("x", Tensor::scalar(3.0)).unwrap();
    let mut g = Graph::new();
    let a = g.param(&params, "x").unwrap();
    let b = g.param(&params, "x").unwrap();
    let sq = g.mul(a, b).unwrap();
    g.backward_into(sq, &mut params).unwrap();
    assert_eq!(params.get("x").unwrap().grad.as_ref().unwrap().data(), &[6.0]);
}
