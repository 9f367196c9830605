//! Backward passes against central finite differences.

use fedsnn::arch::{Architecture, Block};
use fedsnn::cnn::{CnnConfig, CnnModel};
use fedsnn::kernels::{
    avgpool_backward, avgpool_forward, conv2d_backward, conv2d_forward, linear_backward, linear_forward, ConvSpec,
};
use fedsnn::nn::{softmax_cross_entropy, Mode};
use fedsnn::rng::rng_from;
use fedsnn::snn::{SnnConfig, SnnModel, SpikeFunction};
use fedsnn::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

const STEP: f64 = 1e-3;

/// Step for the property sweeps below. The relaxed spike function is a
/// piecewise quadratic, so a 1e-3 step that straddles one of its knots picks
/// up an O(step) truncation error; the fixed-seed cases use 1e-3, the seed
/// sweeps a step small enough to make straddling rare.
const FINE_STEP: f64 = 1e-5;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-8
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = rng_from(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks every element of every parameter of a model exposing a scalar loss.
fn check_all<M>(
    model: &mut M,
    step: f64,
    params: impl Fn(&mut M) -> Vec<&mut Tensor<f64>>,
    loss: impl Fn(&mut M) -> f64,
    analytic: &[Tensor<f64>],
) {
    let counts: Vec<usize> = params(model).iter().map(|t| t.len()).collect();
    assert_eq!(counts.len(), analytic.len());
    for (p, &n) in counts.iter().enumerate() {
        for j in 0..n {
            let orig = params(model)[p].data()[j];
            params(model)[p].data_mut()[j] = orig + step;
            let up = loss(model);
            params(model)[p].data_mut()[j] = orig - step;
            let down = loss(model);
            params(model)[p].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[p].data()[j];
            assert!(close(a, numeric), "param {p}[{j}]: analytic {a}, numeric {numeric}");
        }
    }
}

fn snn_inputs(steps: usize, shape: &[usize], seed: u64) -> Vec<Tensor<f64>> {
    (0..steps).map(|t| random(shape, seed + t as u64).map(|v| v * 2.0)).collect()
}

fn snn_case(arch: Architecture, spike_fn: SpikeFunction, input_shape: &[usize], seed: u64, step: f64) {
    let config = SnnConfig {
        time_steps: 4,
        spike_fn,
        grad_clip: None,
        ..SnnConfig::default()
    };
    let mut model = SnnModel::<f64>::new(arch, config, &mut rng_from(seed)).unwrap();
    let input = snn_inputs(4, input_shape, seed * 31 + 100);
    let labels = vec![0, 2, 1];
    let logits = model.forward(&input, Mode::BatchStats).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let grads = model.backward(&g).unwrap();
    let loss = |m: &mut SnnModel<f64>| {
        let l = m.forward(&input, Mode::BatchStats).unwrap();
        softmax_cross_entropy(&l, &labels).unwrap().0
    };
    check_all(&mut model, step, |m| m.trainable_mut(), loss, &grads);
}

fn dense_arch() -> Architecture {
    Architecture {
        in_channels: 2,
        input_side: 3,
        blocks: vec![Block::Dense { out_features: 5 }],
        num_classes: 3,
    }
}

fn conv_arch() -> Architecture {
    Architecture {
        in_channels: 2,
        input_side: 4,
        blocks: vec![
            Block::conv3x3(3),
            Block::AvgPool { window: 2 },
            Block::Dense { out_features: 4 },
        ],
        num_classes: 3,
    }
}

#[test]
fn relaxed_dense_network_matches_finite_differences() {
    snn_case(dense_arch(), SpikeFunction::Relaxed, &[3, 2, 3, 3], 5, STEP);
}

#[test]
fn relaxed_conv_network_matches_finite_differences() {
    snn_case(conv_arch(), SpikeFunction::Relaxed, &[3, 2, 4, 4], 5, STEP);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn relaxed_networks_match_fine_differences(seed in 0u64..10_000) {
        snn_case(dense_arch(), SpikeFunction::Relaxed, &[3, 2, 3, 3], seed, FINE_STEP);
        snn_case(conv_arch(), SpikeFunction::Relaxed, &[3, 2, 4, 4], seed, FINE_STEP);
    }
}

#[test]
fn head_gradient_matches_finite_differences_with_binary_spikes() {
    let arch = Architecture {
        in_channels: 1,
        input_side: 4,
        blocks: vec![Block::conv3x3(2), Block::Dense { out_features: 6 }],
        num_classes: 3,
    };
    let config = SnnConfig {
        time_steps: 5,
        grad_clip: None,
        ..SnnConfig::default()
    };
    let mut model = SnnModel::<f64>::new(arch, config, &mut rng_from(5)).unwrap();
    let input = snn_inputs(5, &[3, 1, 4, 4], 7);
    let labels = vec![1, 0, 2];
    let logits = model.forward(&input, Mode::BatchStats).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let grads = model.backward(&g).unwrap();
    let head = grads.last().unwrap().clone();
    assert!(head.data().iter().any(|&v| v != 0.0), "no spikes reached the head");
    let loss = |m: &mut SnnModel<f64>| {
        let l = m.forward(&input, Mode::BatchStats).unwrap();
        softmax_cross_entropy(&l, &labels).unwrap().0
    };
    check_all(&mut model, STEP, |m| vec![m.trainable_mut().pop().unwrap()], loss, &[head]);
}

#[test]
fn cnn_matches_finite_differences() {
    let arch = Architecture {
        in_channels: 2,
        input_side: 4,
        blocks: vec![
            Block::conv3x3(3),
            Block::AvgPool { window: 2 },
            Block::Dense { out_features: 4 },
        ],
        num_classes: 3,
    };
    let config = CnnConfig {
        grad_clip: None,
        ..CnnConfig::default()
    };
    let mut model = CnnModel::<f64>::new(arch, config, &mut rng_from(9)).unwrap();
    let input = random(&[3, 2, 4, 4], 4);
    let labels = vec![2, 0, 1];
    let logits = model.forward(&input, Mode::BatchStats).unwrap();
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let grads = model.backward(&g).unwrap();
    let loss = |m: &mut CnnModel<f64>| {
        let l = m.forward(&input, Mode::BatchStats).unwrap();
        softmax_cross_entropy(&l, &labels).unwrap().0
    };
    check_all(&mut model, STEP, |m| m.trainable_mut(), loss, &grads);
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradients() {
    let arch = Architecture {
        in_channels: 1,
        input_side: 4,
        blocks: vec![Block::conv3x3(2), Block::Dense { out_features: 3 }],
        num_classes: 2,
    };
    let mut model = SnnModel::<f64>::new(arch, SnnConfig::default(), &mut rng_from(1)).unwrap();
    let input = snn_inputs(10, &[2, 1, 4, 4], 3);
    model.forward(&input, Mode::Train).unwrap();
    let grads = model.backward(&Tensor::zeros(&[2, 2])).unwrap();
    assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

/// Scalar objective `Σ c ⊙ f(x)` so that its gradient w.r.t. the output is `c`.
fn weighted(out: &Tensor<f64>, c: &Tensor<f64>) -> f64 {
    out.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    Tensor::from_fn(x.shape(), |i| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        (up - down) / (2.0 * STEP)
    })
}

fn assert_grad_close(analytic: &Tensor<f64>, numeric: &Tensor<f64>) {
    assert_eq!(analytic.shape(), numeric.shape());
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        assert!(close(*a, *n), "analytic {a}, numeric {n}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_backward_matches_finite_differences(
        seed in 0u64..1000,
        cin in 1usize..3,
        cout in 1usize..3,
        padding in 0usize..2,
        stride in 1usize..3,
    ) {
        let spec = ConvSpec::new(cin, cout, 3).with_padding(padding).with_stride(stride);
        let x = random(&[2, cin, 4, 4], seed);
        let w = random(&spec.weight_shape(), seed + 1);
        let out = conv2d_forward(&x, &w, &spec).unwrap();
        let c = random(out.shape(), seed + 2);
        let (gx, gw) = conv2d_backward(&c, &x, &w, &spec).unwrap();
        assert_grad_close(&gx, &numeric_grad(&x, |x| weighted(&conv2d_forward(x, &w, &spec).unwrap(), &c)));
        assert_grad_close(&gw, &numeric_grad(&w, |w| weighted(&conv2d_forward(&x, w, &spec).unwrap(), &c)));
    }

    #[test]
    fn linear_backward_matches_finite_differences(seed in 0u64..1000, n in 1usize..4, fin in 1usize..5, fout in 1usize..5) {
        let x = random(&[n, fin], seed);
        let w = random(&[fout, fin], seed + 1);
        let c = random(&[n, fout], seed + 2);
        let (gx, gw) = linear_backward(&c, &x, &w).unwrap();
        assert_grad_close(&gx, &numeric_grad(&x, |x| weighted(&linear_forward(x, &w).unwrap(), &c)));
        assert_grad_close(&gw, &numeric_grad(&w, |w| weighted(&linear_forward(&x, w).unwrap(), &c)));
    }

    #[test]
    fn avgpool_backward_matches_finite_differences(seed in 0u64..1000, window in 1usize..3) {
        let x = random(&[2, 2, 4, 4], seed);
        let out = avgpool_forward(&x, window).unwrap();
        let c = random(out.shape(), seed + 1);
        let gx = avgpool_backward(&c, x.shape(), window).unwrap();
        assert_grad_close(&gx, &numeric_grad(&x, |x| weighted(&avgpool_forward(x, window).unwrap(), &c)));
    }
}

#[test]
fn linear_batch_gradient_is_sum_of_singles() {
    let x = random(&[2, 3], 1);
    let w = random(&[4, 3], 2);
    let g = random(&[2, 4], 3);
    let (_, both) = linear_backward(&g, &x, &w).unwrap();
    let mut sum = Tensor::zeros(&[4, 3]);
    for i in 0..2 {
        let xi = Tensor::new(vec![1, 3], x.data()[i * 3..i * 3 + 3].to_vec()).unwrap();
        let gi = Tensor::new(vec![1, 4], g.data()[i * 4..i * 4 + 4].to_vec()).unwrap();
        sum.add_assign(&linear_backward(&gi, &xi, &w).unwrap().1).unwrap();
    }
    assert_grad_close(&both, &sum);
}
