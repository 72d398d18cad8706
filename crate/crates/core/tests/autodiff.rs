mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use wsms::error::Error;
use wsms::nn::{BatchNorm, Forward, Mode, ParamId, ParamStore};
use wsms::tensor::{conv_out_extent, Graph, Tensor};

use common::random_tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn parameter_used_twice_gets_summed_gradient() {
    let mut g = Graph::<f64>::new();
    let p = g.param(ParamId(0), Tensor::scalar(3.0));
    let y = g.add(p, p).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.param(ParamId(0)).unwrap().data(), &[2.0]);
}

#[test]
fn two_branch_conv_gradient_is_sum_of_branches() {
    let x1: Tensor<f64> = random_tensor(&[2, 3, 6, 6], 1);
    let x2: Tensor<f64> = random_tensor(&[2, 3, 6, 6], 2);
    let w: Tensor<f64> = random_tensor(&[4, 3, 3, 3], 3);
    let id = ParamId(7);

    // Each branch alone, with the other branch's weight bound as a constant.
    let branch = |live: [bool; 2]| {
        let mut g = Graph::<f64>::new();
        let mut total = None;
        for (x, on) in [(&x1, live[0]), (&x2, live[1])] {
            let xv = g.constant(x.clone());
            let wv = if on { g.param(id, w.clone()) } else { g.constant(w.clone()) };
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = g.sum(y).unwrap();
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s).unwrap(),
            });
        }
        let grads = g.backward(total.unwrap()).unwrap();
        let site_sum: Vec<f64> = {
            let sites = grads.site_grads(id);
            (0..w.numel()).map(|i| sites.iter().map(|s| s.data()[i]).sum()).collect()
        };
        (grads.param(id).unwrap().clone(), site_sum)
    };
    let (both, site_sum) = branch([true, true]);
    let (a, _) = branch([true, false]);
    let (b, _) = branch([false, true]);
    for i in 0..w.numel() {
        assert_abs_diff_eq!(both.data()[i], a.data()[i] + b.data()[i], epsilon = 1e-12);
        assert_abs_diff_eq!(both.data()[i], site_sum[i], epsilon = 1e-12);
    }
}

#[test]
fn max_pool_picks_window_maximum() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.max_pool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.var(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn global_average_pool_shape_and_uniform_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random_tensor(&[1, 64, 8, 8], 4));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.shape(y), &[1, 64, 1, 1]);
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.var(x).unwrap().data().iter().all(|&v| v == 1.0 / 64.0));
}

#[test]
fn relu_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.var(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let pos = g.constant(t(&[2], &[0.5, 3.0]));
    let r = g.relu(pos).unwrap();
    assert_eq!(g.value(r).data(), &[0.5, 3.0]);
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let uniform = g.leaf(Tensor::zeros(&[2, 10]));
    let loss = g.softmax_cross_entropy(uniform, &[3, 9]).unwrap();
    assert_abs_diff_eq!(g.value(loss).data()[0], 10f64.ln(), epsilon = 1e-12);

    let mut logits = vec![0.0; 4];
    logits[2] = 1000.0;
    let dominant = g.leaf(t(&[1, 4], &logits));
    let loss = g.softmax_cross_entropy(dominant, &[2]).unwrap();
    assert_abs_diff_eq!(g.value(loss).data()[0], 0.0, epsilon = 1e-12);

    let x = g.leaf(random_tensor(&[3, 5], 5));
    let loss = g.softmax_cross_entropy(x, &[0, 4, 2]).unwrap();
    let grads = g.backward(loss).unwrap();
    for row in grads.var(x).unwrap().data().chunks(5) {
        assert_abs_diff_eq!(row.iter().sum::<f64>(), 0.0, epsilon = 1e-15);
    }
    assert!(matches!(g.softmax_cross_entropy(x, &[0, 5, 1]), Err(Error::InvalidArgument(_))));
}

#[test]
fn backward_rejects_non_scalar_and_foreign_losses() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));

    let mut other = Graph::<f64>::new();
    let y = other.leaf(Tensor::scalar(1.0));
    assert!(matches!(g.backward(y), Err(Error::InvalidState(_))));
}

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(random_tensor::<f64>(&[4, 3, 5, 5], 6));
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let (y, _, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    let y = g.value(y);
    let plane = 25;
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * plane..(n * 3 + c + 1) * plane].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() <= 1e-5, "channel {c} mean {m}");
        assert!((v - 1.0).abs() <= 1e-3, "channel {c} var {v}");
    }
}

#[test]
fn running_mean_converges_to_batch_mean() {
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::register(&mut store, "bn", 2);
    assert_eq!(store.bn(bn.state).unwrap().momentum, 0.1);
    let x: Tensor<f64> = Tensor::from_fn(&[3, 2, 2, 2], |i| (i % 7) as f64 + 2.0);
    let batch_mean: Vec<f64> = (0..2)
        .map(|c| (0..3).flat_map(|n| x.data()[(n * 2 + c) * 4..(n * 2 + c + 1) * 4].to_vec()).sum::<f64>() / 12.0)
        .collect();
    let mut prev_gap = f64::INFINITY;
    for _ in 0..200 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let updates = {
            let mut ctx = Forward::new(&mut g, &store, Mode::Train);
            bn.forward(&mut ctx, xv).unwrap();
            ctx.take_bn_updates()
        };
        store.apply_bn_updates(&updates).unwrap();
        let running = &store.bn(bn.state).unwrap().running_mean;
        let gap: f64 = running.iter().zip(&batch_mean).map(|(r, m)| (r - m).abs()).sum();
        assert!(gap <= prev_gap);
        prev_gap = gap;
    }
    for (r, m) in store.bn(bn.state).unwrap().running_mean.iter().zip(&batch_mean) {
        assert_abs_diff_eq!(*r, *m, epsilon = 1e-3);
    }
}

#[test]
fn forward_and_backward_are_bitwise_repeatable() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(random_tensor(&[2, 3, 8, 8], 8));
        let w = g.param(ParamId(0), random_tensor(&[5, 3, 3, 3], 9));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.global_avg_pool(y).unwrap();
        let y = g.flatten(y).unwrap();
        let loss = g.softmax_cross_entropy(y, &[1, 4]).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).clone(), grads.param(ParamId(0)).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_matches_formula(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 1usize..10, w in 1usize..10, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[n, cin, h, w]));
        let wt = g.constant(Tensor::zeros(&[cout, cin, k, k]));
        let expected = conv_out_extent(h, k, stride, pad).zip(conv_out_extent(w, k, stride, pad));
        match (g.conv2d(x, wt, None, stride, pad), expected) {
            (Ok(y), Some((oh, ow))) => prop_assert_eq!(g.shape(y), &[n, cout, oh, ow][..]),
            (Err(_), None) => {}
            (r, e) => prop_assert!(false, "conv result {:?} vs expected extent {:?}", r.is_ok(), e),
        }
    }

    #[test]
    fn pool_shapes_halve_even_extents(n in 1usize..3, c in 1usize..4, h in 1usize..9, w in 1usize..9) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[n, c, h, w]));
        let even = h % 2 == 0 && w % 2 == 0;
        for y in [g.avg_pool_half(x), g.max_pool2(x)] {
            match y {
                Ok(y) => {
                    prop_assert!(even);
                    prop_assert_eq!(g.shape(y), &[n, c, h / 2, w / 2][..]);
                }
                Err(_) => prop_assert!(!even),
            }
        }
        let gp = g.global_avg_pool(x).unwrap();
        prop_assert_eq!(g.shape(gp), &[n, c, 1, 1][..]);
    }
}
