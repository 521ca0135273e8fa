use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let a = g.constant(rand_tensor(&mut rng, &[3, 3]));
    let i = g.constant(Tensor::eye(3));
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c), g.value(a));

    let a = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[[1.0], [1.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    assert_eq!(g.value(c).shape(), &[2, 1]);
}

#[test]
fn matmul_rejects_mismatch_with_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn elementwise_identities_and_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[2, 4]));
    let zero = g.constant(Tensor::scalar(0.0));
    let one = g.constant(Tensor::scalar(1.0));
    let y = g.add(x, zero).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let y = g.mul(x, one).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let r = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let r = g.relu(r);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

    let bad = g.constant(Tensor::zeros(vec![3]));
    assert!(matches!(g.add(x, bad), Err(Error::Shape { .. })));
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.3; 4]));
    let y = g.softmax(x, 0).unwrap();
    assert!(close(g.value(y).data(), &[0.25; 4], 1e-15));

    let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::zeros(vec![2, 2]));
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn softmax_along_leading_axis_sums_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[3, 4, 2]));
    let y = g.softmax(x, 1).unwrap();
    let v = g.value(y).data();
    for o in 0..3 {
        for i in 0..2 {
            let s: f64 = (0..4).map(|j| v[(o * 4 + j) * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_zero_variance_and_mean() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::full(vec![3], 1.0));
    let beta = g.constant(Tensor::zeros(vec![3]));
    let x = g.constant(Tensor::from_rows(&[[2.0, 2.0, 2.0], [1.0, 2.0, 3.0]]).unwrap());
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let v = g.value(y);
    assert_eq!(v.row(0), &[0.0, 0.0, 0.0]);
    assert!(v.row(1).iter().sum::<f64>().abs() / 3.0 < 1e-12);
    assert!(g.layer_norm(x, gamma, beta, 0.0).is_err());
}

#[test]
fn dropout_eval_and_zero_p_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.constant(rand_tensor(&mut rng, &[4, 5]));
    let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
    assert_eq!(g.value(y), g.value(x));
    let y = g.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(y), g.value(x));
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    assert!(g.dropout(x, -0.1, true, &mut rng).is_err());
}

#[test]
fn dropout_zero_fraction_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![1_000_000], 1.0));
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let v = g.value(y).data();
    let zeros = v.iter().filter(|&&e| e == 0.0).count() as f64 / v.len() as f64;
    assert!((zeros - 0.5).abs() < 0.01, "zero fraction {zeros}");
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
}

#[test]
fn dropout_backward_reuses_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::new();
    let x = g.param(Tensor::full(vec![64], 1.0));
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), g.value(y).data());
}

#[test]
fn mse_cases() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
    let t = g.constant(Tensor::zeros(vec![1, 2]));
    let l = g.mse_loss(p, t, &Tensor::vector(vec![1.0])).unwrap();
    assert_eq!(g.value(l).item(), 2.5);
    let l = g.mse_loss(p, p, &Tensor::vector(vec![1.0])).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    assert!(matches!(
        g.mse_loss(p, t, &Tensor::vector(vec![0.0])),
        Err(Error::EmptyMask(_))
    ));
    assert!(g.mse_loss(p, t, &Tensor::vector(vec![0.5])).is_err());
}

#[test]
fn mse_gradient_is_two_diff_over_n() {
    let mut g = Graph::new();
    let p = g.param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 5.0]]).unwrap());
    let t = g.constant(Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0]]).unwrap());
    let l = g.mse_loss(p, t, &Tensor::vector(vec![1.0, 0.0])).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[1.0, 2.0, 0.0, 0.0]);
}

#[test]
fn cross_entropy_cases() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(vec![3, 8]));
    let l = g
        .cross_entropy_loss(logits, &[0, 3, 7], &Tensor::vector(vec![1.0; 3]))
        .unwrap();
    assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);

    let mut row = vec![0.0; 8];
    row[2] = 30.0;
    let logits = g.constant(Tensor::from_rows(&[row]).unwrap());
    let l = g
        .cross_entropy_loss(logits, &[2], &Tensor::vector(vec![1.0]))
        .unwrap();
    assert!(g.value(l).item() < 1e-9);

    let logits = g.constant(Tensor::zeros(vec![3, 4]));
    match g.cross_entropy_loss(logits, &[0, 4, 1], &Tensor::vector(vec![1.0; 3])) {
        Err(Error::LabelOutOfRange { frame, .. }) => assert_eq!(frame, 1),
        other => panic!("expected label error, got {other:?}"),
    }
}

#[test]
fn backward_fan_in_and_disconnection() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.add(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0]);

    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::scalar(5.0));
    g.backward(c).unwrap();
    assert_eq!(g.grad_tensor(w).data(), &[0.0, 0.0]);

    let v = g.constant(Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn diamond_graph_sums_paths() {
    // f = (x·a) * (x + b): df/dx = a(x + b) + x·a
    let (xv, a, b) = (1.5, 2.0, -0.5);
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(xv));
    let left = g.scale(x, a);
    let bb = g.constant(Tensor::scalar(b));
    let right = g.add(x, bb).unwrap();
    let f = g.mul(left, right).unwrap();
    g.backward(f).unwrap();
    let expect = a * (xv + b) + xv * a;
    assert!((g.grad(x).unwrap()[0] - expect).abs() < 1e-15);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.param(rand_tensor(&mut rng, &[5, 4]));
        let b = g.param(rand_tensor(&mut rng, &[4, 3]));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        let l = g.sum(s);
        let sq = g.mul(l, l).unwrap();
        g.backward(sq).unwrap();
        (g.grad_tensor(a), g.grad_tensor(b))
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}

#[test]
fn grad_check_quadratic_is_exact() {
    let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
    let r = grad_check(
        |g, p| {
            let sq = g.mul(p[0], p[0])?;
            Ok(g.sum(sq))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
    assert_eq!(r.coordinates, 3);
}

#[test]
fn grad_check_detects_a_wrong_gradient() {
    struct Wrong;
    impl CustomBackward for Wrong {
        fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
            vec![Some(g.iter().map(|v| 3.0 * v).collect())]
        }
    }
    let x = Tensor::vector(vec![0.5, -1.0]);
    let r = grad_check(
        |g, p| {
            let v = g.value(p[0]).clone();
            let y = g.custom(&[p[0]], v, Box::new(Wrong));
            Ok(g.sum(y))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error > 0.1);
}

fn sum_weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var, Error> {
    let w = g.constant(w.clone());
    let m = g.mul(y, w)?;
    Ok(g.sum(m))
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let w = rand_tensor(&mut rng, &[3, 2]);
    let r = grad_check(
        |g, p| {
            let c = g.matmul(p[0], p[1])?;
            sum_weighted(g, c, &w)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    let row = rand_tensor(&mut rng, &[4]);
    let s = rand_tensor(&mut rng, &[1]);
    let w = rand_tensor(&mut rng, &[3, 4]);
    let r = grad_check(
        |g, p| {
            let x = g.mul(p[0], p[1])?;
            let x = g.add(x, p[2])?;
            let x = g.sub(x, p[3])?;
            let x = g.mul(x, p[2])?;
            let x = g.scale(x, 1.7);
            let x = g.relu(x);
            let t = g.transpose(x)?;
            let t = g.transpose(t)?;
            sum_weighted(g, t, &w)
        },
        &[a, b, row, s],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn softmax_and_layer_norm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        let r = grad_check(
            |g, p| {
                let y = g.softmax(p[0], axis)?;
                sum_weighted(g, y, &w)
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "axis {axis}: {r:?}");
    }

    let x = rand_tensor(&mut rng, &[4, 5]);
    let gamma = rand_tensor(&mut rng, &[5]);
    let beta = rand_tensor(&mut rng, &[5]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let r = grad_check(
        |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
            sum_weighted(g, y, &w)
        },
        &[x, gamma, beta],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pred = rand_tensor(&mut rng, &[4, 3]);
    let target = rand_tensor(&mut rng, &[4, 3]);
    let mask = Tensor::vector(vec![1.0, 0.0, 1.0, 1.0]);
    let r = grad_check(|g, p| g.mse_loss(p[0], p[1], &mask), &[pred, target], 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");

    let logits = rand_tensor(&mut rng, &[4, 5]);
    let r = grad_check(
        |g, p| g.cross_entropy_loss(p[0], &[1, 4, 0, 2], &mask),
        &[logits],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let layout = AttnLayout {
        batch: 2,
        seq_len: 3,
        heads: 2,
    };
    let q = rand_tensor(&mut rng, &[6, 4]);
    let k = rand_tensor(&mut rng, &[6, 4]);
    let v = rand_tensor(&mut rng, &[6, 4]);
    let w = rand_tensor(&mut rng, &[6, 4]);
    let keys = [true, true, true, true, true, false];
    let r = grad_check(
        |g, p| {
            let o = g.attention(p[0], p[1], p[2], layout, &keys)?;
            sum_weighted(g, o, &w)
        },
        &[q, k, v],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn attention_ignores_masked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let layout = AttnLayout {
        batch: 1,
        seq_len: 4,
        heads: 1,
    };
    let keys = [true, true, false, false];
    let q = rand_tensor(&mut rng, &[4, 2]);
    let mut k = rand_tensor(&mut rng, &[4, 2]);
    let mut v = rand_tensor(&mut rng, &[4, 2]);
    let first = {
        let mut g = Graph::new();
        let (a, b, c) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(v.clone()),
        );
        let o = g.attention(a, b, c, layout, &keys).unwrap();
        g.value(o).clone()
    };
    for i in 4..8 {
        k.data_mut()[i] = 1e3;
        v.data_mut()[i] = -7.0;
    }
    let mut g = Graph::new();
    let (a, b, c) = (g.constant(q), g.constant(k), g.constant(v));
    let o = g.attention(a, b, c, layout, &keys).unwrap();
    assert_eq!(g.value(o), &first);
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(v));
            let y = g.softmax(x, 0).unwrap();
            let s: f64 = g.value(y).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(g.value(y).data().iter().all(|&p| p > 0.0));
        }

        #[test]
        fn small_matmul_grad_check(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut t = |r: usize, c: usize| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let (a, b, w) = (t(m, k), t(k, n), t(m, n));
            let r = grad_check(|g, p| {
                let c = g.matmul(p[0], p[1])?;
                let w = g.constant(w.clone());
                let c = g.mul(c, w)?;
                Ok(g.sum(c))
            }, &[a, b], 1e-5).unwrap();
            prop_assert!(r.max_rel_error < 1e-6, "{:?}", r);
        }
    }
}
