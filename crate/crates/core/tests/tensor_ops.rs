mod common;

use common::conv_ref;
use pdse::tensor::bilinear_sample;
use pdse::tensor::gradcheck::{check_inputs, finite_diff_check};
use pdse::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut g = Graph::new(false);
    let xv = g.leaf(x.clone(), false);
    let wv = g.leaf(w.clone(), false);
    let bv = b.map(|b| g.leaf(b.clone(), false));
    let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_matches_six_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (3, 2, 0)] {
        let x = rand_t(&[2, 3, 8, 8], &mut rng);
        let w = rand_t(&[4, 3, k, k], &mut rng);
        let b = rand_t(&[4], &mut rng);
        let got = conv(&x, &w, Some(&b), stride, pad);
        let want = conv_ref(&x, &w, Some(b.data()), stride, pad);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) < 1e-6, "k={k} s={stride} p={pad}");
    }
}

#[test]
fn identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&[1, 1, 5, 6], &mut rng);
    let w = Tensor::full(&[1, 1, 1, 1], 1.0);
    let b = Tensor::zeros(&[1]);
    assert_eq!(conv(&x, &w, Some(&b), 1, 0).data(), x.data());
}

#[test]
fn bilinear_spot_values() {
    let m = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(bilinear_sample(&m, 0.5, 0.5).unwrap(), vec![2.5]);
    assert_eq!(bilinear_sample(&m, -5.0, -5.0).unwrap(), vec![0.0]);
    let m3 = Tensor::from_fn(&[2, 3, 3], |i| i as f64);
    assert_eq!(bilinear_sample(&m3, 1.0, 1.0).unwrap(), vec![4.0, 13.0]);
}

#[test]
fn square_sum_and_constant_gradients() {
    let mut g = Graph::new(true);
    let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let p = g.leaf(Tensor::new(&[2], vec![5.0, -1.0]).unwrap(), true);
    let xx = g.mul(x, x).unwrap();
    let loss = g.sum(xx).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn composite_graph_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t(&[1, 2, 6, 6], &mut rng);
    let w = rand_t(&[3, 2, 3, 3], &mut rng);
    let r = rand_t(&[1, 3, 3, 3], &mut rng);
    let rep = check_inputs(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, 1, 1)?;
            let y = g.relu(y)?;
            let y = g.max_pool2d(y, 2, 2, 0)?;
            let rv = g.constant(r.clone());
            let y = g.mul(y, rv)?;
            g.sum(y)
        },
        &[x, w],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn harness_linear_and_sigmoid_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&[7], &mut rng);
    let rep = finite_diff_check(|g, v| g.sum(v), &x, 1e-5, 1e-9).unwrap();
    assert!(rep.passed);
    let z = Tensor::zeros(&[5]);
    let rep = finite_diff_check(
        |g, v| {
            let s = g.sigmoid(v)?;
            g.sum(s)
        },
        &z,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed);
}

#[test]
fn two_backward_passes_accumulate_exactly() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("p", Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap(), true).unwrap();
    // loss = k * sum(p * p)
    let grads = |store: &ParamStore<f64>, k: f64| {
        let mut g = Graph::new(true);
        let p = g.param(store, id);
        let s = g.scale(p, k).unwrap();
        let sq = g.mul(s, p).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap()
    };
    let (g1, g2) = (grads(&store, 0.3), grads(&store, -1.7));
    g1.accumulate_into(&mut store).unwrap();
    g2.accumulate_into(&mut store).unwrap();
    let want: Vec<f64> = g1.param(id).unwrap().data().iter().zip(g2.param(id).unwrap().data()).map(|(a, b)| a + b).collect();
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), want.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, stride in 1usize..3, pad in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_t(&[1, 2, 7, 6], &mut rng);
        let y = rand_t(&[1, 2, 7, 6], &mut rng);
        let w = rand_t(&[3, 2, 3, 3], &mut rng);
        let mix = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv(&mix, &w, None, stride, pad);
        let (cx, cy) = (conv(&x, &w, None, stride, pad), conv(&y, &w, None, stride, pad));
        let rhs = Tensor::from_fn(cx.shape(), |i| a * cx.data()[i] + b * cy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    #[test]
    fn bilinear_is_continuous(seed in any::<u64>(), y in -1.5f64..5.5, x in -1.5f64..5.5, eps in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rand_t(&[1, 5, 5], &mut rng);
        // Values range over the map plus the zero padding.
        let range = m.data().iter().fold(0.0f64, |r, v| r.max(v.abs())) * 2.0;
        let a = bilinear_sample(&m, y, x).unwrap()[0];
        let b = bilinear_sample(&m, y + eps, x).unwrap()[0];
        prop_assert!((a - b).abs() <= eps * range + 1e-12);
    }
}
