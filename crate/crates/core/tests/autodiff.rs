use approx::assert_abs_diff_eq;
use gpn::adam::{adam_step, AdamState};
use gpn::autodiff::{softplus, sigmoid, Tape};
use gpn::episodes::{lr_at, TrainConfig};
use gpn::{Element, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv_of_ones_counts_the_window() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 3, 3, 1], 1.0));
    let k = tape.constant(Tensor::full([3, 3, 1, 1], 1.0));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d_same(x, k, b).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn identity_kernel_copies_the_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 1, 1], &[2.5]));
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let k = tape.constant(t(&[3, 3, 1, 1], &kernel));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d_same(x, k, b).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);
}

#[test]
fn pooling_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.maxpool_2x2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let seven: Vec<f64> = (0..49).map(f64::from).collect();
    let x = tape.constant(t(&[1, 7, 7, 1], &seven));
    let y = tape.maxpool_2x2(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 3, 3, 1]);
    assert_eq!(tape.value(y).data()[0], 8.0);

    let mut v = tape.constant(Tensor::zeros([1, 28, 28, 1]));
    for side in [14, 7, 3, 1] {
        v = tape.maxpool_2x2(v).unwrap();
        assert_eq!(tape.value(v).shape(), &[1, side, side, 1]);
    }
}

#[test]
fn batchnorm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 1, 1, 1], &[-1.0, 1.0]));
    let g = tape.constant(t(&[1], &[1.0]));
    let b = tape.constant(t(&[1], &[0.0]));
    let (y, _) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert_abs_diff_eq!(tape.value(y).data()[0], -expect, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.value(y).data()[1], expect, epsilon = 1e-12);
    assert_abs_diff_eq!(expect, 0.999995, epsilon = 1e-6);

    let x = tape.constant(Tensor::full([3, 2, 2, 1], 7.0));
    let g = tape.constant(t(&[1], &[3.0]));
    let b = tape.constant(t(&[1], &[0.25]));
    let (y, _) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
}

#[test]
fn activation_values() {
    assert_abs_diff_eq!(softplus(0.0f64), 2f64.ln(), epsilon = 1e-12);
    assert_eq!(sigmoid(0.0f64), 0.5);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[-3.0, 3.0]));
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
    let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
    assert_abs_diff_eq!(tape.value(l).data()[0], 4f64.ln(), epsilon = 1e-12);

    let x = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
    let l = tape.softmax_cross_entropy(x, &[0]).unwrap();
    assert!(tape.value(l).data()[0].abs() < 1e-12);

    let x = tape.constant(Tensor::full([3, 7], 0.3));
    let l = tape.softmax_cross_entropy(x, &[0, 3, 6]).unwrap();
    assert_abs_diff_eq!(tape.value(l).data()[0], 7f64.ln(), epsilon = 1e-12);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let p = t(&[2, 2], &[0.3, -1.0, 2.0, 5.0]);
    let x = tape.parameter(&p);
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0; 4]);

    let mut tape = Tape::<f64>::new();
    let x = tape.parameter(&t(&[3], &[1.0, -2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.affine(s, 0.5, 0.0).unwrap();
    assert_eq!(tape.backward(half).unwrap().get(x).unwrap(), &[1.0, -2.0, 3.0]);
}

fn small_net<T: Element>(xs: &[f64], ks: &[f64]) -> Vec<f64> {
    let mut tape = Tape::<T>::new();
    let x = tape.parameter(&Tensor::<T>::from_f64([2, 4, 4, 1], xs).unwrap());
    let k = tape.parameter(&Tensor::<T>::from_f64([3, 3, 1, 2], ks).unwrap());
    let b = tape.constant(Tensor::zeros([2]));
    let y = tape.conv2d_same(x, k, b).unwrap();
    let y = tape.maxpool_2x2(y).unwrap();
    let y = tape.softplus(y).unwrap();
    let y = tape.mul(y, y).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap().get(k).unwrap().iter().map(|v| v.to_f64_lossy()).collect()
}

#[test]
fn float32_gradients_agree_with_float64() {
    let xs: Vec<f64> = (0..32).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    let ks: Vec<f64> = (0..18).map(|i| ((i * 11 % 7) as f64 - 3.0) / 5.0).collect();
    let (g32, g64) = (small_net::<f32>(&xs, &ks), small_net::<f64>(&xs, &ks));
    for (a, b) in g32.iter().zip(&g64) {
        assert!((a - b).abs() / b.abs().max(1e-3) < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn learning_rate_examples() {
    let cfg = TrainConfig::new(10, 0);
    assert_eq!(lr_at(0, &cfg), 2e-3);
    assert_eq!(lr_at(1999, &cfg), 2e-3);
    assert_eq!(lr_at(2000, &cfg), 1e-3);
    assert_eq!(lr_at(4000, &cfg), 5e-4);
}

fn conv(x: &[f64], k: &[f64], shape: [usize; 4], cout: usize) -> Vec<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&shape, x));
    let k = tape.constant(t(&[3, 3, shape[3], cout], k));
    let b = tape.constant(Tensor::zeros([cout]));
    let y = tape.conv2d_same(x, k, b).unwrap();
    tape.value(y).data().to_vec()
}

proptest! {
    #[test]
    fn convolution_is_linear_in_the_input(
        a in prop::collection::vec(-1.0..1.0f64, 2 * 4 * 5 * 2),
        b in prop::collection::vec(-1.0..1.0f64, 2 * 4 * 5 * 2),
        k in prop::collection::vec(-1.0..1.0f64, 9 * 2 * 3),
        alpha in -3.0..3.0f64,
    ) {
        let shape = [2, 4, 5, 2];
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + y).collect();
        let lhs = conv(&mix, &k, shape, 3);
        let (ca, cb) = (conv(&a, &k, shape, 3), conv(&b, &k, shape, 3));
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (alpha * ca[i] + cb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_commutes_with_adding_a_constant(
        x in prop::collection::vec(-5.0..5.0f64, 2 * 6 * 5 * 3),
        c in -10.0..10.0f64,
    ) {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 6, 5, 3], &x));
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let b = tape.constant(t(&[2, 6, 5, 3], &shifted));
        let pa = tape.maxpool_2x2(a).unwrap();
        let pb = tape.maxpool_2x2(b).unwrap();
        for (u, v) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            prop_assert!((u + c - v).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_output_mean_is_beta(
        x in prop::collection::vec(-5.0..5.0f64, 3 * 2 * 2 * 4),
        gamma in prop::collection::vec(0.1..3.0f64, 4),
        beta in prop::collection::vec(-2.0..2.0f64, 4),
    ) {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(t(&[3, 2, 2, 4], &x));
        let g = tape.constant(t(&[4], &gamma));
        let b = tape.constant(t(&[4], &beta));
        let (y, _) = tape.batchnorm_train(xv, g, b, 1e-5).unwrap();
        let y = tape.value(y).data();
        for c in 0..4 {
            let mean = y.iter().skip(c).step_by(4).sum::<f64>() / 12.0;
            prop_assert!((mean - beta[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(
        logits in prop::collection::vec(-50.0..50.0f64, 4 * 6),
        labels in prop::collection::vec(0usize..6, 4),
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[4, 6], &logits));
        let l = tape.softmax_cross_entropy(x, &labels).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged(
        p in prop::collection::vec(-5.0..5.0f32, 1..20),
        steps in 1usize..20,
    ) {
        let mut param = Tensor::<f32>::new([p.len()], p.clone()).unwrap();
        let mut state = AdamState::for_param(&param);
        for _ in 0..steps {
            param.accumulate_grad(&vec![0.0; p.len()]).unwrap();
            adam_step(&mut param, &mut state, 1e-3).unwrap();
        }
        prop_assert_eq!(param.data(), p.as_slice());
    }

    #[test]
    fn learning_rate_never_increases(a in 0u64..100_000, b in 0u64..100_000) {
        let cfg = TrainConfig::new(10, 0);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(lr_at(hi, &cfg) <= lr_at(lo, &cfg));
    }
}
