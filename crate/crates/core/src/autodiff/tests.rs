use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::DplError;

fn t(rows: usize, cols: usize, vals: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], vals.to_vec()).unwrap()
}

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(vec![rows, cols], 1.0, &mut rng)
}

/// Central finite differences of a scalar function of one tensor.
fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64, step: f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.values_mut()[i] += step;
            let mut minus = x.clone();
            minus.values_mut()[i] -= step;
            (f(&plus) - f(&minus)) / (2.0 * step)
        })
        .collect()
}

fn assert_grad_close(analytic: &[f64], numeric: &[f64], rel: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-6);
        assert!(
            (a - n).abs() / denom < rel || (a - n).abs() < 1e-8,
            "entry {i}: analytic {a} vs numeric {n}"
        );
    }
}

/// Builds `loss = sum(w ⊙ op(x))` with a fixed random `w` so every output entry
/// contributes a distinct weight.
fn check_unary(x: &Tensor, op: impl Fn(&mut Tape, Var) -> Var + Copy) {
    let probe = {
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let out = op(&mut tape, v);
        let (r, c) = tape.dims(out);
        rand_tensor(r, c, 99)
    };
    let eval = |x: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.leaf(x, false);
        let out = op(&mut tape, v);
        let w = tape.leaf(&probe, false);
        let prod = tape.mul(out, w).unwrap();
        let s = tape.sum(prod);
        tape.value(s)[0]
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x, true);
    let out = op(&mut tape, v);
    let w = tape.leaf(&probe, false);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let numeric = numeric_grad(x, &eval, 1e-5);
    assert_grad_close(grads.get(v).unwrap(), &numeric, 1e-4);
}

#[test]
fn matmul_identity_cases() {
    let mut tape = Tape::new();
    let i2 = t(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let a = tape.leaf(&i2, false);
    let b = tape.leaf(&i2, false);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[1.0, 0.0, 0.0, 1.0]);

    let m = t(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let a = tape.leaf(&m, false);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_matches_scalar_triple_loop() {
    let a = rand_tensor(3, 4, 1);
    let b = rand_tensor(4, 2, 2);
    let mut tape = Tape::new();
    let va = tape.leaf(&a, false);
    let vb = tape.leaf(&b, false);
    let c = tape.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut want = 0.0;
            for k in 0..4 {
                want += a.get(i, k) * b.get(k, j);
            }
            assert!((tape.value(c)[i * 2 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
    let b = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
    let err = tape.matmul(a, b).unwrap_err();
    match &err {
        DplError::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, &vec![2, 3]);
            assert_eq!(rhs, &vec![2, 3]);
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(3, 4, &[0.0, 0.0, 0.0, 0.0, 3f64.ln(), 0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 0.0]), false);
    let y = tape.softmax_rows(x);
    let v = tape.value(y);
    for j in 0..4 {
        assert!((v[j] - 0.25).abs() < 1e-15);
    }
    let want = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
    for j in 0..4 {
        assert!((v[4 + j] - want[j]).abs() < 1e-15);
    }
    assert!(v[8..].iter().all(|p| p.is_finite()));
    assert!((v[8] - 1.0).abs() < 1e-15);
    assert!(v[9] < 1e-300);
}

#[test]
fn layer_norm_examples() {
    let gain = t(1, 2, &[1.0, 1.0]);
    let zero = t(1, 2, &[0.0, 0.0]);
    let mut tape = Tape::new();
    let g = tape.leaf(&gain, false);
    let b = tape.leaf(&zero, false);

    let constant = tape.leaf(&t(1, 2, &[3.0, 3.0]), false);
    let y = tape.layer_norm(constant, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0]);

    // mean 0, variance 1: xhat = ±1 / sqrt(1 + eps)
    let x = tape.leaf(&t(1, 2, &[1.0, -1.0]), false);
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((tape.value(y)[0] - expect).abs() < 1e-15);
    assert!((tape.value(y)[1] + expect).abs() < 1e-15);
    assert!((expect - 1.0).abs() < 1e-5);

    let g0 = tape.leaf(&zero, false);
    let bias = tape.leaf(&t(1, 2, &[0.5, -2.0]), false);
    let x = tape.leaf(&rand_tensor(3, 2, 4), false);
    let y = tape.layer_norm(x, g0, bias, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.5, -2.0, 0.5, -2.0, 0.5, -2.0]);

    assert!(tape.layer_norm(x, g, b, 0.0).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.leaf(&t(2, 4, &[0.25; 8]), false);
    let l = tape.cross_entropy(uniform, &[0, 3]).unwrap();
    assert!((tape.value(l)[0] - 4f64.ln()).abs() < 1e-15);

    let onehot = tape.leaf(&t(1, 3, &[0.0, 1.0, 0.0]), false);
    let l = tape.cross_entropy(onehot, &[1]).unwrap();
    assert!(tape.value(l)[0].abs() < 1e-15);

    let p = tape.leaf(&t(1, 2, &[0.7, 0.3]), false);
    let l = tape.cross_entropy(p, &[1]).unwrap();
    assert!((tape.value(l)[0] - 1.20397).abs() < 1e-5);

    // the clamp keeps a zero probability finite
    let l = tape.cross_entropy(onehot, &[0]).unwrap();
    assert!((tape.value(l)[0] + PROB_FLOOR.ln()).abs() < 1e-9);

    assert!(matches!(
        tape.cross_entropy(p, &[2]),
        Err(DplError::Index { index: 2, len: 2, .. })
    ));
}

#[test]
fn kl_examples() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(1, 3, &[0.2, 0.3, 0.5]), false);
    let b = tape.leaf(&t(1, 3, &[0.2, 0.3, 0.5]), false);
    let kl = tape.kl_divergence(a, b).unwrap();
    assert_eq!(tape.value(kl)[0], 0.0);

    let teacher = tape.leaf(&t(1, 2, &[1.0, 0.0]), false);
    let student = tape.leaf(&t(1, 2, &[0.5, 0.5]), false);
    let kl = tape.kl_divergence(teacher, student).unwrap();
    assert!((tape.value(kl)[0] - 2f64.ln()).abs() < 1e-15);
    assert!((tape.value(kl)[0] - std::f64::consts::LN_2).abs() < 1e-4);

    let wrong = tape.leaf(&t(1, 3, &[0.2, 0.3, 0.5]), false);
    assert!(matches!(
        tape.kl_divergence(teacher, wrong),
        Err(DplError::Dimension { .. })
    ));
}

#[test]
fn kl_gradient_flows_only_into_student() {
    let teacher = t(2, 3, &[0.1, 0.6, 0.3, 0.3, 0.3, 0.4]);
    let student = t(2, 3, &[0.2, 0.5, 0.3, 0.5, 0.25, 0.25]);
    let mut tape = Tape::new();
    let tv = tape.leaf(&teacher, true);
    let sv = tape.leaf(&student, true);
    let kl = tape.kl_divergence(tv, sv).unwrap();
    let grads = tape.backward(kl).unwrap();
    assert!(grads.get(tv).is_none());
    let numeric = numeric_grad(
        &student,
        &|s| {
            let mut tape = Tape::new();
            let tv = tape.leaf(&teacher, false);
            let sv = tape.leaf(s, false);
            let kl = tape.kl_divergence(tv, sv).unwrap();
            tape.value(kl)[0]
        },
        1e-6,
    );
    assert_grad_close(grads.get(sv).unwrap(), &numeric, 1e-6);
}

#[test]
fn backward_simple_cases() {
    let x = rand_tensor(2, 3, 5);
    let mut tape = Tape::new();
    let v = tape.leaf(&x, true);
    let s = tape.sum(v);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(v).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let v = tape.leaf(&x, true);
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    for (g, xv) in grads.get(v).unwrap().iter().zip(x.values()) {
        assert!((g - 2.0 * xv).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let v = tape.leaf(&rand_tensor(2, 2, 1), true);
    assert!(matches!(tape.backward(v), Err(DplError::Contract(_))));
}

#[test]
fn backward_visits_in_reverse_execution_order() {
    let mut tape = Tape::new();
    let x = tape.leaf(&rand_tensor(2, 2, 3), true);
    let a = tape.scale(x, 2.0);
    let b = tape.quick_gelu(a);
    let c = tape.mul(b, x).unwrap();
    let s = tape.sum(c);
    let grads = tape.backward(s).unwrap();
    assert_eq!(
        grads.visit_order(),
        &[s.index(), c.index(), b.index(), a.index()]
    );
}

#[test]
fn backward_is_additive_across_passes() {
    let x = rand_tensor(2, 3, 8);
    let mut param = x.clone().with_grad();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(&param, true);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        grads.accumulate_into(v, &mut param);
    }
    for (g, xv) in param.grad.as_ref().unwrap().iter().zip(x.values()) {
        assert!((g - 4.0 * xv).abs() < 1e-14);
    }
}

#[test]
fn shared_input_accumulates_rather_than_overwrites() {
    // loss = sum(x) + sum(x): every entry gets gradient 2
    let x = rand_tensor(3, 2, 2);
    let mut tape = Tape::new();
    let v = tape.leaf(&x, true);
    let s1 = tape.sum(v);
    let s2 = tape.sum(v);
    let l = tape.add(s1, s2).unwrap();
    let grads = tape.backward(l).unwrap();
    assert_eq!(grads.get(v).unwrap(), &[2.0; 6]);
}

#[test]
fn gradients_match_finite_differences_per_op() {
    let x = rand_tensor(4, 6, 11);
    let w = rand_tensor(6, 5, 12);
    let w_nt = rand_tensor(3, 6, 13);
    let gain = rand_tensor(1, 6, 14);
    let bias = rand_tensor(1, 6, 15);
    let extra = rand_tensor(2, 6, 16);
    let row = rand_tensor(1, 6, 17);
    let weights = Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap();

    check_unary(&x, |tp, v| {
        let w = tp.leaf(&w, false);
        tp.matmul(v, w).unwrap()
    });
    check_unary(&w, |tp, v| {
        let x = tp.leaf(&x, false);
        tp.matmul(x, v).unwrap()
    });
    check_unary(&x, |tp, v| {
        let w = tp.leaf(&w_nt, false);
        tp.matmul_nt(v, w).unwrap()
    });
    check_unary(&w_nt, |tp, v| {
        let x = tp.leaf(&x, false);
        tp.matmul_nt(x, v).unwrap()
    });
    check_unary(&x, |tp, v| tp.softmax_rows(v));
    check_unary(&x, |tp, v| {
        let g = tp.leaf(&gain, false);
        let b = tp.leaf(&bias, false);
        tp.layer_norm(v, g, b, 1e-5).unwrap()
    });
    check_unary(&gain, |tp, g| {
        let x = tp.leaf(&x, false);
        let b = tp.leaf(&bias, false);
        tp.layer_norm(x, g, b, 1e-5).unwrap()
    });
    check_unary(&bias, |tp, b| {
        let x = tp.leaf(&x, false);
        let g = tp.leaf(&gain, false);
        tp.layer_norm(x, g, b, 1e-5).unwrap()
    });
    check_unary(&x, |tp, v| tp.quick_gelu(v));
    check_unary(&x, |tp, v| tp.l2_normalize_rows(v).unwrap());
    check_unary(&x, |tp, v| {
        let e = tp.leaf(&extra, false);
        tp.concat_rows(e, v).unwrap()
    });
    check_unary(&x, |tp, v| {
        let a = tp.slice_cols(v, 1, 3).unwrap();
        let b = tp.slice_cols(v, 4, 2).unwrap();
        tp.concat_cols(&[b, a]).unwrap()
    });
    check_unary(&x, |tp, v| {
        let r2 = tp.select_row(v, 2).unwrap();
        let r0 = tp.select_row(v, 0).unwrap();
        tp.stack_rows(&[r2, r0, r2]).unwrap()
    });
    check_unary(&row, |tp, r| {
        let x = tp.leaf(&x, false);
        tp.add_row(x, r).unwrap()
    });
    check_unary(&weights, |tp, wv| {
        let a = tp.leaf(&x, false);
        let b = tp.scale(a, -0.5);
        let c = tp.quick_gelu(a);
        tp.weighted_sum(&[a, b, c], wv).unwrap()
    });
    check_unary(&x, |tp, v| {
        let wv = tp.leaf(&weights, false);
        let b = tp.scale(v, -0.5);
        let c = tp.quick_gelu(v);
        tp.weighted_sum(&[v, b, c], wv).unwrap()
    });
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let logits = rand_tensor(3, 4, 21);
    let labels = [2usize, 0, 3];
    let eval = |l: &Tensor| {
        let mut tape = Tape::new();
        let v = tape.leaf(l, false);
        let p = tape.softmax_rows(v);
        let ce = tape.cross_entropy(p, &labels).unwrap();
        tape.value(ce)[0]
    };
    let mut tape = Tape::new();
    let v = tape.leaf(&logits, true);
    let p = tape.softmax_rows(v);
    let ce = tape.cross_entropy(p, &labels).unwrap();
    let grads = tape.backward(ce).unwrap();
    assert_grad_close(grads.get(v).unwrap(), &numeric_grad(&logits, &eval, 1e-5), 1e-4);
}

#[test]
fn frozen_constants_receive_no_gradient() {
    let w = rand_tensor(3, 3, 2);
    let x = rand_tensor(2, 3, 3);
    let mut tape = Tape::new();
    let wv = tape.constant(&w);
    let xv = tape.leaf(&x, true);
    let y = tape.matmul(xv, wv).unwrap();
    let s = tape.sum(y);
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(wv).is_none());
    assert!(grads.get(xv).is_some());
}

#[test]
fn sgd_examples() {
    let mut p = Tensor::scalar(1.0);
    p.grad = Some(vec![2.0]);
    sgd_step(&mut [&mut p], &SgdConfig::new(0.1).unwrap()).unwrap();
    assert!((p.values()[0] - 0.8).abs() < 1e-15);
    assert_eq!(p.grad.as_deref(), Some(&[0.0][..]));

    let mut p = Tensor::scalar(1.0);
    p.grad = Some(vec![2.0]);
    sgd_step(&mut [&mut p], &SgdConfig::new(0.0).unwrap()).unwrap();
    assert_eq!(p.values(), &[1.0]);

    // two steps on x^2 from x = 1: 1 -> 0.8 -> 0.64
    let mut x = Tensor::scalar(1.0).with_grad();
    let cfg = SgdConfig::new(0.1).unwrap();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(&x, true);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap().accumulate_into(v, &mut x);
        sgd_step(&mut [&mut x], &cfg).unwrap();
    }
    assert!((x.values()[0] - 0.64).abs() < 1e-15);
}

#[test]
fn sgd_requires_gradients() {
    let mut a = Tensor::scalar(1.0);
    a.grad = Some(vec![1.0]);
    let mut b = Tensor::scalar(1.0);
    let err = sgd_step(&mut [&mut a, &mut b], &SgdConfig::default()).unwrap_err();
    assert!(matches!(err, DplError::Contract(_)));
    assert_eq!(a.values(), &[1.0]);
    assert!(SgdConfig::new(-1.0).is_err());
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let x = rand_tensor(5, 8, 3);
        let w = rand_tensor(8, 8, 4);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true);
        let wv = tape.constant(&w);
        let h = tape.matmul(xv, wv).unwrap();
        let a = tape.softmax_rows(h);
        let s = tape.sum(a);
        let q = tape.quick_gelu(h);
        let s2 = tape.sum(q);
        let l = tape.add(s, s2).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(l)[0].to_bits(), g.get(xv).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_normalized(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(vec![rows, cols], scale, &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(&x, false);
        let y = tape.softmax_rows(v);
        for r in tape.value(y).chunks(cols) {
            let s: f64 = r.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            if scale < 5.0 {
                prop_assert!(r.iter().all(|&p| p > 0.0 && p < 1.0 || cols == 1));
            }
        }
    }

    #[test]
    fn kl_is_non_negative(seed in 0u64..1000, rows in 1usize..5, cols in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(vec![rows, cols], 2.0, &mut rng);
        let b = Tensor::randn(vec![rows, cols], 2.0, &mut rng);
        let mut tape = Tape::new();
        let av = tape.leaf(&a, false);
        let bv = tape.leaf(&b, false);
        let pa = tape.softmax_rows(av);
        let pb = tape.softmax_rows(bv);
        let kl = tape.kl_divergence(pa, pb).unwrap();
        prop_assert!(tape.value(kl)[0] >= -1e-15);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..100) {
        let a = rand_tensor(m, k, seed);
        let b = rand_tensor(k, n, seed + 1);
        check_unary(&a, |tp, v| {
            let bv = tp.leaf(&b, false);
            tp.matmul(v, bv).unwrap()
        });
    }
}
