use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, DEFAULT_STEP};
use super::*;
use crate::error::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn single(store: &mut ParamStore, t: Tensor) -> ParamId {
    store.add("x", t)
}

#[test]
fn matmul_identity_and_closed_form() {
    let mut tape = Tape::new();
    let a = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
    let i = tape.constant(Tensor::eye(2));
    let av = tape.constant(a.clone());
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);

    let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let y = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let out = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    assert_eq!(tape.shape(out), &[2, 1]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&[3, 4], 1));
    let b = store.add("b", rand_tensor(&[4, 2], 2));
    let r = grad_check(&store, DEFAULT_STEP, |t, s| {
        let (av, bv) = (t.param(s, a), t.param(s, b));
        let c = t.matmul(av, bv)?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn batched_matmul_with_broadcast_rhs_gradient() {
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&[3, 2, 4], 3));
    let b = store.add("b", rand_tensor(&[4, 5], 4));
    let w = rand_tensor(&[3, 2, 5], 5);
    let r = grad_check(&store, DEFAULT_STEP, |t, s| {
        let (av, bv) = (t.param(s, a), t.param(s, b));
        let c = t.matmul(av, bv)?;
        let wv = t.constant(w.clone());
        let c = t.mul(c, wv)?;
        Ok(t.sum(c))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn softmax_uniform_and_stable() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = tape.softmax(z, 0).unwrap();
    for v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let s = tape.softmax(big, 0).unwrap();
    let v = tape.value(s).data();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(matches!(tape.softmax(z, 0), Err(Error::Numeric { .. })));
}

#[test]
fn softmax_gradient_on_inner_axis() {
    let mut store = ParamStore::new();
    let x = single(&mut store, rand_tensor(&[3, 4, 2], 11));
    let w = rand_tensor(&[3, 4, 2], 12);
    let r = grad_check(&store, DEFAULT_STEP, |t, s| {
        let xv = t.param(s, x);
        let y = t.softmax(xv, 1)?;
        let wv = t.constant(w.clone());
        let y = t.mul(y, wv)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn masked_softmax_gives_exact_zeros() {
    let mut store = ParamStore::new();
    let x = single(&mut store, rand_tensor(&[2, 3, 3], 13));
    let keep = [true, false, false, true, true, false, true, true, true];
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let m = tape.masked_fill(xv, &keep).unwrap();
    let s = tape.softmax(m, 2).unwrap();
    let v = tape.value(s).data();
    for (i, p) in v.iter().enumerate() {
        if !keep[i % 9] {
            assert_eq!(*p, 0.0);
        }
    }
    assert_eq!(v[0], 1.0);

    let w = rand_tensor(&[2, 3, 3], 14);
    let r = grad_check(&store, DEFAULT_STEP, |t, s| {
        let xv = t.param(s, x);
        let m = t.masked_fill(xv, &keep)?;
        let y = t.softmax(m, 2)?;
        let wv = t.constant(w.clone());
        let y = t.mul(y, wv)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn elementwise_closed_forms() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let l = tape.leaky_relu(x, nn::DEFAULT_LEAKY_SLOPE);
    assert_eq!(tape.value(l).data(), &[-0.01, 0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);
    let zero = tape.constant(Tensor::zeros(&[3, 2]));
    let n = tape.norm(zero);
    assert_eq!(tape.value(n).item(), 0.0);
    let d = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
    let n = tape.norm(d);
    assert_eq!(tape.value(n).item(), 5.0);
}

#[test]
fn non_broadcastable_shapes_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
    assert!(matches!(tape.mul(a, b), Err(Error::Dimension { .. })));
}

#[test]
fn norm_gradient_at_zero_is_finite() {
    let mut store = ParamStore::new();
    let x = single(&mut store, Tensor::zeros(&[2, 2]));
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let n = tape.norm(xv);
    tape.backward(n).unwrap();
    assert!(tape.grad(xv).unwrap().data().iter().all(|g| *g == 0.0));
}

#[test]
fn layer_norm_contract() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = tape.layer_norm(x, 1e-12).unwrap();
    let v = tape.value(y).data();
    let mean: f64 = v.iter().sum::<f64>() / 3.0;
    let var: f64 = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);

    let c = tape.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
    let y = tape.layer_norm(c, nn::LAYER_NORM_EPS).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn layer_norm_gradient() {
    let mut store = ParamStore::new();
    let x = single(&mut store, rand_tensor(&[4, 5], 21));
    let w = rand_tensor(&[4, 5], 22);
    let r = grad_check(&store, DEFAULT_STEP, |t, s| {
        let xv = t.param(s, x);
        let y = t.layer_norm(xv, nn::LAYER_NORM_EPS)?;
        let wv = t.constant(w.clone());
        let y = t.mul(y, wv)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn feed_forward_zero_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let spec = LayerSpec {
        widths: vec![3, 3],
        hidden_activation: Activation::Identity,
        output_activation: Activation::Identity,
    };
    let ff = FeedForward::new(&mut store, "ff", &spec, &mut rng).unwrap();
    let w = ff.layers[0].weight;
    let b = ff.layers[0].bias.unwrap();
    *store.get_mut(w) = Tensor::zeros(&[3, 3]);
    *store.get_mut(b) = Tensor::zeros(&[3]);
    let input = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.1, 0.2, 0.3]]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = ff.forward(&mut tape, &store, x).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

    *store.get_mut(w) = Tensor::eye(3);
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let y = ff.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.value(y), &input);

    let mut tape = Tape::new();
    let bad = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        ff.forward(&mut tape, &store, bad),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn two_layer_feed_forward_gradient_over_all_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::new();
    let spec = LayerSpec {
        widths: vec![4, 6, 3],
        hidden_activation: Activation::LeakyRelu(nn::DEFAULT_LEAKY_SLOPE),
        output_activation: Activation::Sigmoid,
    };
    let ff = FeedForward::new(&mut store, "ff", &spec, &mut rng).unwrap();
    let input = rand_tensor(&[5, 4], 32);
    let r = grad_check(&store, DEFAULT_STEP, |t, s| {
        let x = t.constant(input.clone());
        let y = ff.forward(t, s, x)?;
        Ok(t.norm(y))
    })
    .unwrap();
    assert_eq!(r.checked, 4 * 6 + 6 + 6 * 3 + 3);
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn shape_ops_gradients() {
    let mut store = ParamStore::new();
    let x = single(&mut store, rand_tensor(&[2, 3, 4], 41));
    let y = store.add("y", rand_tensor(&[2, 1, 4], 42));
    let w = rand_tensor(&[4, 2, 2], 43);
    let r = grad_check(&store, DEFAULT_STEP, |t, s| {
        let xv = t.param(s, x);
        let yv = t.param(s, y);
        let c = t.concat(&[xv, yv], 1)?; // 2×4×4
        let p = t.permute(c, &[2, 0, 1])?; // 4×2×4
        let n = t.narrow(p, 2, 1, 2)?; // 4×2×2
        let wv = t.constant(w.clone());
        let m = t.mul(n, wv)?;
        let sel = t.select(m, 0, 3)?; // 2×2
        let r = t.reshape(sel, &[4])?;
        let st = t.stack(&[r, r])?;
        let sq = t.mul(st, st)?;
        let sc = t.scale(sq, 0.5);
        let sub = t.sub(sc, r)?;
        Ok(t.sum(sub))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn dropout_is_identity_in_eval_and_seeded_in_training() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[100], 1.0));
    let y = tape.dropout(x, 0.1).unwrap();
    assert_eq!(x, y);

    let draw = |seed| {
        let mut tape = Tape::training(seed);
        let x = tape.constant(Tensor::full(&[1000], 1.0));
        let y = tape.dropout(x, 0.1).unwrap();
        tape.value(y).clone()
    };
    let a = draw(5);
    assert_eq!(a, draw(5));
    let zeros = a.data().iter().filter(|v| **v == 0.0).count();
    assert!((50..150).contains(&zeros), "{zeros}");
    let kept = a.data().iter().find(|v| **v != 0.0).unwrap();
    assert!((kept - 1.0 / 0.9).abs() < 1e-15);
}

#[test]
fn chain_rule_composition() {
    // f(g(x)) with g = sigmoid, f = sum(g²): df/dx = 2 σ(x) σ(x)(1−σ(x))
    let x0 = Tensor::vector(vec![-0.3, 0.8, 1.7]);
    let mut store = ParamStore::new();
    let x = single(&mut store, x0.clone());
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let s = tape.sigmoid(xv);
    let sq = tape.mul(s, s).unwrap();
    let out = tape.sum(sq);
    tape.backward(out).unwrap();
    for (g, &xi) in tape.grad(xv).unwrap().data().iter().zip(x0.data()) {
        let sg = 1.0 / (1.0 + (-xi).exp());
        assert!((g - 2.0 * sg * sg * (1.0 - sg)).abs() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = tape.softmax(x, 1).unwrap();
        for row in tape.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(seed in 0u64..10_000) {
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&[3, 4], seed));
        let b = store.add("b", rand_tensor(&[4, 3], seed + 1));
        let r = grad_check(&store, DEFAULT_STEP, |t, s| {
            let (av, bv) = (t.param(s, a), t.param(s, b));
            let c = t.matmul(av, bv)?;
            let c = t.layer_norm(c, nn::LAYER_NORM_EPS)?;
            let c = t.softmax(c, 1)?;
            let c = t.sigmoid(c);
            Ok(t.norm(c))
        }).unwrap();
        prop_assert!(r.max_rel_error < 1e-5, "{:?}", r);
    }
}
