use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let s = ops::softmax(&t64(&[2], &[0.0, 0.0]), 0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul() {
    let a = t64(&[2, 2], &[1.5, -2.0, 0.25, 7.0]);
    let out = ops::matmul(&Tensor::identity(2), &a).unwrap();
    assert_eq!(out, a);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = t64(&[2, 3], &[0.0; 6]);
    let b = t64(&[2, 3], &[0.0; 6]);
    let err = ops::matmul(&a, &b).unwrap_err();
    assert_eq!(
        err,
        NumError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn logsumexp_large_inputs_match_extended_precision_value() {
    // 1000 + ln 2 to 30 significant digits.
    let oracle: f64 = "1000.693147180559945309417232121458".parse().unwrap();
    let out = ops::logsumexp(&t64(&[2], &[1000.0, 1000.0]), 0).unwrap();
    assert!((out.item().unwrap() - oracle).abs() < 1e-12);
    let out32 = ops::logsumexp(&Tensor::<f32>::from_f64(&[2], &[1000.0, 1000.0]).unwrap(), 0).unwrap();
    assert!((out32.item().unwrap() as f64 - oracle).abs() < 1e-3);
}

#[test]
fn softmax_along_leading_axis() {
    let x = t64(&[2, 2], &[0.0, 1.0, 0.0, 3.0]);
    let s = ops::softmax(&x, 0).unwrap();
    let d = s.data();
    assert!((d[0] - 0.5).abs() < 1e-12 && (d[2] - 0.5).abs() < 1e-12);
    assert!((d[1] + d[3] - 1.0).abs() < 1e-12);
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0f64)).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn gradient_of_constant_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0f64)).unwrap();
    let c = g.scalar_const(5.0).unwrap();
    let zero = g.scale(x, 0.0).unwrap();
    let y = g.add(c, zero).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(t64(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(NumError::NotScalar { .. })));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let x = g.param(t64(&[1], &[0.0])).unwrap();
    assert_eq!(g.log(x).unwrap_err(), NumError::NonFinite { op: "log" });
}

#[test]
fn softmax_dot_onehot_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random_vec(&mut rng, 5);
    let report = finite_diff_check(
        |g, x| {
            let s = g.softmax(x, 0)?;
            let onehot = g.constant(t64(&[5], &[0.0, 0.0, 1.0, 0.0, 0.0]))?;
            let m = g.mul(s, onehot)?;
            g.sum(m)
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn linear_function_is_exact_under_central_differences() {
    let coeffs = [0.5, -1.25, 3.0, 2.0];
    let report = finite_diff_check(
        |g, x| {
            let c = g.constant(t64(&[4], &coeffs))?;
            let m = g.mul(x, c)?;
            g.sum(m)
        },
        &[0.1, 0.2, -0.3, 0.4],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-10, "{report:?}");
}

/// Builds a tiny network exercising every differentiable primitive.
fn kitchen_sink(g: &mut Graph<f64>, x: Var) -> Result<Var, NumError> {
    // x holds 36 values: q,k,v (3 x [3,4]).
    let q = g.slice_flat(x, 0, 12, &[3, 4])?;
    let k = g.slice_flat(x, 12, 24, &[3, 4])?;
    let v = g.slice_flat(x, 24, 36, &[3, 4])?;
    let att = g.causal_attention(q, k, v, 2)?;
    let gain = g.constant(t64(&[4], &[1.0, 0.5, -0.7, 1.2]))?;
    let bias = g.constant(t64(&[4], &[0.1, 0.0, -0.2, 0.3]))?;
    let ln = g.layer_norm(att, gain, bias)?;
    let w = g.constant(t64(
        &[4, 3],
        &[0.3, -0.2, 0.5, 0.1, 0.7, -0.4, -0.6, 0.2, 0.9, 0.4, -0.8, 0.05],
    ))?;
    let h = g.matmul(ln, w)?;
    let b = g.constant(t64(&[3], &[0.2, -0.1, 0.0]))?;
    let h = g.add_row(h, b)?;
    let h = g.gelu(h)?;
    let last = g.slice_rows(h, 1, 3)?;
    let lp = g.log_softmax_pick(last, &[2, 0])?;
    let s1 = g.sum(lp)?;
    let lse = g.logsumexp(h, 1)?;
    let s2 = g.mean(lse)?;
    let sig = g.log_sigmoid(s2)?;
    let t = g.transpose(h)?;
    let ls = g.log_softmax(t, 0)?;
    let e = g.exp(ls)?;
    let sg = g.sigmoid(e)?;
    let s3 = g.sum(sg)?;
    let a = g.add(s1, sig)?;
    g.sub(a, s3)
}

#[test]
fn composite_graph_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = random_vec(&mut rng, 36);
    let report = finite_diff_check(kitchen_sink, &params, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-5, "max rel err {}", report.max_rel_error);
}

#[test]
fn embedding_and_dropout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = random_vec(&mut rng, 12);
    let report = finite_diff_check(
        |g, x| {
            let table = g.reshape(x, &[4, 3])?;
            let e = g.embedding(table, &[1, 3, 1])?;
            let d = g.dropout_mask(e, vec![2.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0])?;
            let sq = g.mul(d, d)?;
            g.sum(sq)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-7);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0f64)).unwrap();
    let d = g.detach(x).unwrap();
    let y = g.mul(x, d).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0]);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = random_vec(&mut rng, 36);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.param(t64(&[36], &params)).unwrap();
        let a = kitchen_sink(&mut g, x).unwrap();
        let sq = g.mul(x, x).unwrap();
        let b = g.sum(sq).unwrap();
        let out = match which {
            0 => a,
            1 => b,
            _ => g.add(a, b).unwrap(),
        };
        g.backward(out).unwrap().get_or_zeros(x, 36)
    };
    let (ga, gb, gsum) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..36 {
        assert!((ga[i] + gb[i] - gsum[i]).abs() < 1e-12);
    }
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = random_vec(&mut rng, 36);
    let run = || {
        let mut g = Graph::new();
        let x = g.param(t64(&[36], &params)).unwrap();
        let y = kitchen_sink(&mut g, x).unwrap();
        (g.value(y).item().unwrap(), g.backward(y).unwrap().get_or_zeros(x, 36))
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn attention_rows_are_causal_and_normalised() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 5;
    let q = t64(&[n, 4], &random_vec(&mut rng, n * 4));
    let k = t64(&[n, 4], &random_vec(&mut rng, n * 4));
    let v = t64(&[n, 4], &random_vec(&mut rng, n * 4));
    let (_, probs) = ops::causal_attention(&q, &k, &v, 2).unwrap();
    for h in 0..2 {
        for i in 0..n {
            let row = &probs[h * n * n + i * n..h * n * n + (i + 1) * n];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
        }
    }
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(values in proptest::collection::vec(-80.0f32..80.0, 1..64)) {
        let n = values.len();
        let x = Tensor::new(vec![n], values).unwrap();
        let s = ops::softmax(&x, 0).unwrap();
        let sum: f64 = s.data().iter().map(|&p| p as f64).sum();
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
        prop_assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_sigmoid_is_stable(x in -1.0e4f64..1.0e4) {
        let v = ops::log_sigmoid_scalar(x);
        prop_assert!(v.is_finite());
        prop_assert!(v <= 0.0);
    }
}
