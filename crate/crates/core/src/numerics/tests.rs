use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Central finite difference of `f` w.r.t. every entry of `x`.
fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks the gradient of a scalar function built on the tape from one
/// input tensor.
fn check_unary(x: Tensor, build: &dyn for<'t> Fn(Var<'t>) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let v = tape.var(x.clone());
    let loss = build(v);
    tape.backward(loss).unwrap();
    let analytic = v.grad().unwrap();
    let numeric = numeric_grad(&x, &|t| {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        build(v).value().item().unwrap()
    });
    max_rel_err(analytic.data(), &numeric)
}

#[test]
fn matmul_identity_and_hand_values() {
    let tape = Tape::new();
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
    assert_eq!(eye.matmul(&b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let c = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let out = a.matmul(&c).unwrap().value();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(&b).unwrap_err().to_string();
    assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng(1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let b2 = b.clone();
    let err = check_unary(a, &move |v| {
        let bv = v.tape().constant(b2.clone());
        v.matmul(&bv).unwrap().sum()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn gelu_values() {
    assert_eq!(gelu_scalar(0.0), 0.0);
    assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    // Exact-erf value, distinct from the tanh approximation at 1.0.
    assert!((gelu_scalar(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let x = Tensor::randn(&[7], 2.0, &mut rng(2));
    let err = check_unary(x, &|v| v.gelu().sum());
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(3);
    for _ in 0..20 {
        let x = Tensor::randn(&[4, 9], 5.0, &mut r);
        let tape = Tape::new();
        let s = tape.constant(x).softmax().unwrap().value();
        for i in 0..4 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let x = Tensor::randn(&[3, 5], 1.0, &mut rng(4));
    let w = Tensor::randn(&[3, 5], 1.0, &mut rng(5));
    let err = check_unary(x, &move |v| {
        let wv = v.tape().constant(w.clone());
        v.softmax().unwrap().mul(&wv).unwrap().sum()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn layer_norm_edge_cases() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 4], 3.5));
    let ones = tape.constant(Tensor::full(&[4], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[4]));
    let y = x.layer_norm(&ones, &zeros, 1e-5).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng(6)));
    let c = tape.constant(Tensor::full(&[4], 0.25));
    let y = x.layer_norm(&zeros, &c, 1e-5).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.25));
}

#[test]
fn layer_norm_rows_have_zero_mean() {
    let mut r = rng(7);
    let tape = Tape::new();
    let ones = tape.constant(Tensor::full(&[16], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[16]));
    for _ in 0..20 {
        let x = tape.constant(Tensor::randn(&[5, 16], 3.0, &mut r));
        let y = x.layer_norm(&ones, &zeros, 1e-5).unwrap().value();
        for i in 0..5 {
            let mean: f64 = y.row(i).iter().sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
        }
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut r = rng(8);
    let x = Tensor::randn(&[3, 6], 1.0, &mut r);
    let gamma = Tensor::randn(&[6], 1.0, &mut r);
    let beta = Tensor::randn(&[6], 1.0, &mut r);
    let w = Tensor::randn(&[3, 6], 1.0, &mut r);
    let (g2, b2, w2) = (gamma.clone(), beta.clone(), w.clone());
    let err = check_unary(x.clone(), &move |v| {
        let t = v.tape();
        let g = t.constant(g2.clone());
        let b = t.constant(b2.clone());
        v.layer_norm(&g, &b, 1e-5).unwrap().mul(&t.constant(w2.clone())).unwrap().sum()
    });
    assert!(err < 1e-5, "x rel err {err}");
    let err = check_unary(gamma, &move |g| {
        let t = g.tape();
        let xv = t.constant(x.clone());
        let b = t.constant(beta.clone());
        xv.layer_norm(&g, &b, 1e-5).unwrap().mul(&t.constant(w.clone())).unwrap().sum()
    });
    assert!(err < 1e-5, "gamma rel err {err}");
}

#[test]
fn cross_entropy_values_and_errors() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::from_rows(&[vec![50.0, -50.0]]).unwrap());
    assert!(z.cross_entropy(&[0]).unwrap().value().item().unwrap() < 1e-12);
    let z = tape.constant(Tensor::zeros(&[3, 2]));
    let loss = z.cross_entropy(&[0, 1, 1]).unwrap().value().item().unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(z.cross_entropy(&[0, 2, 1]).is_err());
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let x = Tensor::randn(&[4, 3], 1.5, &mut rng(9));
    let err = check_unary(x, &|v| v.cross_entropy(&[0, 2, 1, 2]).unwrap());
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn binary_cross_entropy_values_and_errors() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 2]));
    let t = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
    let loss = z.binary_cross_entropy(&t).unwrap().value().item().unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    let z = tape.constant(Tensor::from_rows(&[vec![20.0]]).unwrap());
    let t = Tensor::from_rows(&[vec![1.0]]).unwrap();
    assert!(z.binary_cross_entropy(&t).unwrap().value().item().unwrap() < 1e-8);
    let bad = Tensor::from_rows(&[vec![0.5]]).unwrap();
    assert!(z.binary_cross_entropy(&bad).is_err());
}

#[test]
fn binary_cross_entropy_gradient_matches_finite_differences() {
    let x = Tensor::randn(&[3, 2], 2.0, &mut rng(10));
    let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
    let err = check_unary(x, &move |v| v.binary_cross_entropy(&t).unwrap());
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut r = rng(11);
    let layout = AttentionLayout {
        segment_len: 3,
        valid_lens: vec![3, 2],
        head_dim: 2,
    };
    let q = Tensor::randn(&[6, 4], 1.0, &mut r);
    let k = Tensor::randn(&[6, 4], 1.0, &mut r);
    let v = Tensor::randn(&[6, 4], 1.0, &mut r);
    let w = Tensor::randn(&[6, 4], 1.0, &mut r);
    for which in 0..3 {
        let inputs = [q.clone(), k.clone(), v.clone()];
        let (layout, w) = (layout.clone(), w.clone());
        let err = check_unary(inputs[which].clone(), &move |x| {
            let t = x.tape();
            let mut vars: Vec<Var<'_>> = inputs.iter().map(|i| t.constant(i.clone())).collect();
            vars[which] = x;
            vars[0]
                .attention(&vars[1], &vars[2], &layout)
                .unwrap()
                .mul(&t.constant(w.clone()))
                .unwrap()
                .sum()
        });
        assert!(err < 1e-6, "input {which}: rel err {err}");
    }
}

#[test]
fn attention_ignores_masked_keys() {
    let mut r = rng(12);
    let layout = AttentionLayout {
        segment_len: 4,
        valid_lens: vec![2],
        head_dim: 2,
    };
    let q = Tensor::randn(&[4, 2], 1.0, &mut r);
    let k = Tensor::randn(&[4, 2], 1.0, &mut r);
    let v = Tensor::randn(&[4, 2], 1.0, &mut r);
    let tape = Tape::new();
    let full = tape
        .constant(q.clone())
        .attention(&tape.constant(k.clone()), &tape.constant(v.clone()), &layout)
        .unwrap()
        .value();
    let mut v2 = v.clone();
    v2.set2(3, 0, 99.0);
    let mut k2 = k.clone();
    k2.set2(2, 1, -7.0);
    let other = tape
        .constant(q)
        .attention(&tape.constant(k2), &tape.constant(v2), &layout)
        .unwrap()
        .value();
    assert_eq!(full.data(), other.data());
}

#[test]
fn backward_basic_derivatives() {
    let tape = Tape::new();
    let x = tape.var(Tensor::vector(vec![1.0, -2.0, 3.0]));
    tape.backward(x.sum()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(2.0));
    let y = tape.var(Tensor::scalar(3.0));
    tape.backward(x.mul(&y).unwrap()).unwrap();
    assert_eq!(x.grad().unwrap().item().unwrap(), 3.0);
    assert_eq!(y.grad().unwrap().item().unwrap(), 2.0);
}

#[test]
fn backward_rejects_non_scalar_and_second_call() {
    let tape = Tape::new();
    let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
    let s = x.sum();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(crate::Error::TapeConsumed)));
}

#[test]
fn slice_and_select_rows_route_gradients() {
    let tape = Tape::new();
    let x = tape.var(Tensor::randn(&[3, 4], 1.0, &mut rng(13)));
    let s = x.slice(0..2, 1..3).unwrap();
    let r = x.select_rows(&[2, 2]).unwrap();
    let loss = s.sum().add(&r.sum()).unwrap();
    tape.backward(loss).unwrap();
    let g = x.grad().unwrap();
    let expected = [0., 1., 1., 0., 0., 1., 1., 0., 2., 2., 2., 2.];
    assert_eq!(g.data(), &expected);
}

#[test]
fn tape_replay_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(14);
        let tape = Tape::new();
        let a = tape.var(Tensor::randn(&[5, 6], 1.0, &mut r));
        let b = tape.var(Tensor::randn(&[6, 3], 1.0, &mut r));
        let loss = a.matmul(&b).unwrap().gelu().softmax().unwrap().cross_entropy(&[0, 1, 2, 0, 1]).unwrap();
        tape.backward(loss).unwrap();
        (a.grad().unwrap(), b.grad().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn counters_track_forward_work() {
    counter::reset();
    let tape = Tape::new();
    let a = tape.var(Tensor::zeros(&[2, 3]));
    let b = tape.var(Tensor::zeros(&[3, 4]));
    let bias = tape.var(Tensor::zeros(&[4]));
    let y = a.matmul(&b).unwrap().add_bias(&bias).unwrap();
    tape.backward(y.sum()).unwrap();
    let c = counter::snapshot();
    assert_eq!(c.matmul_macs, 24);
    assert_eq!(c.bias_adds, 8);
    assert_eq!(c.flops(), 56);
}

#[test]
fn xlogx_limit() {
    assert_eq!(xlogx(0.0), 0.0);
    assert!((xlogx(0.5) - 0.5 * 0.5f64.ln()).abs() < 1e-15);
}
