use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Graph, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn micro_cfg() -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        max_len: 16,
    }
}

#[test]
fn param_names_are_unique() {
    let mut s = ParamStore::new();
    s.register("a", Tensor::scalar(1.0)).unwrap();
    assert!(s.register("a", Tensor::scalar(2.0)).is_err());
    assert_eq!(s.len(), 1);
}

#[test]
fn uniform_init_respects_fan_in_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = ParamStore::new();
    let id = s
        .register_uniform("w", vec![100, 10], 25, &mut rng)
        .unwrap();
    assert!(s.get(id).data().iter().all(|v| v.abs() <= 0.2));
}

#[test]
fn encoder_output_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "enc", 5, micro_cfg(), &mut rng).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(rand_tensor(&mut rng, &[2 * 7, 5]));
    let pad = Padding::new(2, 7, vec![true; 14]).unwrap();
    let y = enc.forward(&mut g, &p, x, &pad).unwrap();
    assert_eq!(g.value(y).shape(), &[14, 8]);
    assert!(g.value(y).all_finite());
}

#[test]
fn encoder_rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "enc", 5, micro_cfg(), &mut rng).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.constant(Tensor::zeros(vec![20, 5]));
    assert!(enc.forward(&mut g, &p, x, &Padding::unpadded(20)).is_err());
    let x = g.constant(Tensor::zeros(vec![4, 6]));
    assert!(enc.forward(&mut g, &p, x, &Padding::unpadded(4)).is_err());

    let bad = EncoderConfig {
        heads: 3,
        ..micro_cfg()
    };
    assert!(TransformerEncoder::new(&mut ParamStore::new(), "e", 5, bad, &mut rng).is_err());
}

#[test]
fn encoder_prefix_is_invariant_to_padded_content() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "enc", 3, micro_cfg(), &mut rng).unwrap();
    let k = 4;
    let valid: Vec<bool> = (0..7).map(|t| t < k).collect();
    let pad = Padding::new(1, 7, valid).unwrap();
    let base = rand_tensor(&mut rng, &[7, 3]);
    let run = |x: Tensor| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(x);
        let y = enc.forward(&mut g, &p, x, &pad).unwrap();
        g.value(y).data()[..k * 8].to_vec()
    };
    let first = run(base.clone());
    let mut other = base;
    for v in &mut other.data_mut()[k * 3..] {
        *v = 100.0;
    }
    assert_eq!(first, run(other));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let enc = TransformerEncoder::new(&mut store, "enc", 3, micro_cfg(), &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[2 * 3, 3]);
    let w = rand_tensor(&mut rng, &[6, 8]);
    let pad = Padding::new(2, 3, vec![true, true, true, true, true, false]).unwrap();
    let mut params = store.values().to_vec();
    params.push(x);
    let n = store.len();
    let r = grad_check(
        |g, vars| {
            let bound = Bound::from_vars(vars[..n].to_vec());
            let y = enc.forward(g, &bound, vars[n], &pad)?;
            let w = g.constant(w.clone());
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn sinusoidal_table_first_rows() {
    let t = sinusoidal_table(3, 4);
    assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 1.0]);
    assert!((t.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    assert!((t.at(1, 2) - (1.0 / 100.0f64).sin()).abs() < 1e-15);
}

#[test]
fn min_max_affine_frame() {
    let mut g = Graph::new();
    let raw = g.constant(Tensor::from_rows(&[(0..12).map(f64::from).collect::<Vec<_>>()]).unwrap());
    let w = min_max_normalize(&mut g, raw);
    let expect: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
    assert_eq!(g.value(w.weights).data(), &expect[..]);
    assert_eq!(w.degenerate, vec![false]);
}

#[test]
fn min_max_constant_frame_falls_back() {
    let mut g = Graph::new();
    let raw = g.param(Tensor::full(vec![1, 12], 3.0));
    let w = min_max_normalize(&mut g, raw);
    assert_eq!(g.value(w.weights).data(), &[0.5; 12]);
    assert_eq!(w.degenerate, vec![true]);
    let s = g.sum(w.weights);
    g.backward(s).unwrap();
    assert_eq!(g.grad(raw).unwrap(), &[0.0; 12]);
}

#[test]
fn min_max_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw = rand_tensor(&mut rng, &[3, 12]);
    let w = rand_tensor(&mut rng, &[3, 12]);
    let r = grad_check(
        |g, p| {
            let n = min_max_normalize(g, p[0]);
            let c = g.constant(w.clone());
            let y = g.mul(n.weights, c)?;
            Ok(g.sum(y))
        },
        &[raw],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn min_max_ties_route_to_lowest_channel() {
    let mut g = Graph::new();
    let raw = g.param(Tensor::from_rows(&[[1.0, 0.0, 0.0, 1.0]]).unwrap());
    let n = min_max_normalize(&mut g, raw);
    assert_eq!(g.value(n.weights).data(), &[1.0, 0.0, 0.0, 1.0]);
    // d(sum w)/dr: only channel 0 (max) and channel 1 (min) carry the
    // endpoint terms; the tied channels 2 and 3 see only the direct term.
    let s = g.sum(n.weights);
    g.backward(s).unwrap();
    let gr = g.grad(raw).unwrap();
    // direct 1/D each; to_min = Σ(w−1) = −2; to_max = −Σw = −2
    assert_eq!(gr, &[1.0 - 2.0, 1.0 - 2.0, 1.0, 1.0]);
}

#[test]
fn min_max_per_channel_mode() {
    let mut g = Graph::new();
    let raw =
        g.constant(Tensor::from_rows(&[[0.0, 5.0], [2.0, 5.0], [4.0, 5.0], [9.0, 9.0]]).unwrap());
    let pad = Padding::new(1, 4, vec![true, true, true, false]).unwrap();
    let n = min_max_normalize_with(&mut g, raw, MinMaxMode::PerChannel, &pad).unwrap();
    assert_eq!(
        g.value(n.weights).data(),
        &[0.0, 0.5, 0.5, 0.5, 1.0, 0.5, 0.5, 0.5]
    );
    assert_eq!(n.degenerate, vec![true, true, true, false]);
    assert_eq!(
        "per_channel".parse::<MinMaxMode>().unwrap(),
        MinMaxMode::PerChannel
    );
}

#[test]
fn min_max_per_channel_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let raw = rand_tensor(&mut rng, &[6, 4]);
    let w = rand_tensor(&mut rng, &[6, 4]);
    let pad = Padding::new(2, 3, vec![true, true, true, true, true, false]).unwrap();
    let r = grad_check(
        |g, p| {
            let n = min_max_normalize_with(g, p[0], MinMaxMode::PerChannel, &pad)?;
            let c = g.constant(w.clone());
            let y = g.mul(n.weights, c)?;
            Ok(g.sum(y))
        },
        &[raw],
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn ste_forward_is_ground_truth_and_backward_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let pred = g.param(rand_tensor(&mut rng, &[5, 12]));
    let gt = g.leaf(rand_tensor(&mut rng, &[5, 12]), true);
    let out = ste_replace(&mut g, pred, gt).unwrap();
    assert_eq!(g.value(out), g.value(gt));
    let s = g.sum(out);
    g.backward(s).unwrap();
    assert_eq!(g.grad(pred).unwrap(), &[1.0; 60]);
    assert!(g.grad(gt).is_none());

    let other = g.constant(Tensor::zeros(vec![4, 12]));
    assert!(ste_replace(&mut g, pred, other).is_err());
}

#[test]
fn ste_fixed_point_is_full_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let v = rand_tensor(&mut rng, &[3, 12]);
    let up = rand_tensor(&mut rng, &[3, 12]);
    let mut g = Graph::new();
    let pred = g.param(v.clone());
    let gt = g.constant(v);
    let out = ste_replace(&mut g, pred, gt).unwrap();
    assert_eq!(g.value(out), g.value(pred));
    let c = g.constant(up.clone());
    let y = g.mul(out, c).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(pred).unwrap(), up.data());
}

proptest! {
    #[test]
    fn normalized_weights_are_bounded(
        rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 12), 1..20)
    ) {
        let mut g = Graph::new();
        let raw = g.constant(Tensor::from_rows(&rows).unwrap());
        let n = min_max_normalize(&mut g, raw);
        let t = g.value(n.weights);
        for (r, &deg) in n.degenerate.iter().enumerate() {
            let row = t.row(r);
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            if !deg {
                prop_assert!(row.contains(&0.0));
                prop_assert!(row.contains(&1.0));
            } else {
                prop_assert!(row.iter().all(|&w| w == 0.5));
            }
        }
    }

    #[test]
    fn ste_backward_ignores_ground_truth(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = rand_tensor(&mut rng, &[2, 12]);
        let up = rand_tensor(&mut rng, &[2, 12]);
        let mut grads = Vec::new();
        for _ in 0..2 {
            let gt = rand_tensor(&mut rng, &[2, 12]);
            let mut g = Graph::new();
            let p = g.param(pred.clone());
            let t = g.constant(gt);
            let o = ste_replace(&mut g, p, t).unwrap();
            let c = g.constant(up.clone());
            let y = g.mul(o, c).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            grads.push(g.grad(p).unwrap().to_vec());
        }
        prop_assert_eq!(&grads[0], &grads[1]);
        prop_assert_eq!(&grads[0][..], up.data());
    }
}
