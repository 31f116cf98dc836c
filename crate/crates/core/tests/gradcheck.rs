//! Central finite-difference validation of every layer kind, run in f64.

use gazecloak_core::nn::gradcheck::{check_loss, check_network};
use gazecloak_core::nn::loss::{mse, softmax_log_loss};
use gazecloak_core::nn::{Conv2d, Dropout, Fc, Flatten, Layer, MaxPool, Network, Relu, Softmax, TConv2d, TensorBatch};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-3;
const STEP: f64 = 1e-5;

fn random_nchw(n: usize, c: usize, h: usize, w: usize, seed: u64) -> TensorBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TensorBatch::Nchw(Array4::from_shape_fn((n, c, h, w), |_| rng.gen_range(-1.0..1.0)))
}

fn random_nd(n: usize, d: usize, seed: u64) -> TensorBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TensorBatch::Nd(Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0)))
}

fn check(net: &mut Network<f64>, x: &TensorBatch<f64>, seed: u64) {
    let report = check_network(net, x, STEP, seed, 40).unwrap();
    assert!(
        report.max_rel_error_params < TOL,
        "param gradient error {} (checked {})",
        report.max_rel_error_params,
        report.checked_params
    );
    assert!(
        report.max_rel_error_input < TOL,
        "input gradient error {}",
        report.max_rel_error_input
    );
}

fn init(net: &mut Network<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init_params(&mut rng);
}

/// Zero biases leave ReLU outputs exactly at the kink and max-pool windows
/// tied, where finite differences are undefined. Composite checks evaluate
/// at a differentiable point by jittering the biases.
fn jitter_biases(net: &mut Network<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for p in net.params_mut() {
        if p.name == "bias" {
            for v in p.data.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
    }
}

#[test]
fn conv_stride1_gradients() {
    for seed in 0..5 {
        let mut net = Network::new((2, 6, 6), vec![Layer::Conv(Conv2d::new(2, 3, 3, 1, (6, 6)))]);
        init(&mut net, seed);
        check(&mut net, &random_nchw(2, 2, 6, 6, seed + 100), seed);
    }
}

#[test]
fn conv_stride2_gradients() {
    for seed in 0..5 {
        let mut net = Network::new((2, 6, 6), vec![Layer::Conv(Conv2d::new(2, 4, 5, 2, (6, 6)))]);
        init(&mut net, seed);
        check(&mut net, &random_nchw(2, 2, 6, 6, seed + 200), seed);
    }
}

#[test]
fn tconv_gradients() {
    for seed in 0..5 {
        let mut net = Network::new((3, 3, 3), vec![Layer::TConv(TConv2d::new(3, 2, 5, (3, 3)))]);
        init(&mut net, seed);
        check(&mut net, &random_nchw(2, 3, 3, 3, seed + 300), seed);
    }
}

#[test]
fn tconv_k7_gradients() {
    for seed in 0..5 {
        let mut net = Network::new((2, 4, 4), vec![Layer::TConv(TConv2d::new(2, 1, 7, (4, 4)))]);
        init(&mut net, seed);
        check(&mut net, &random_nchw(1, 2, 4, 4, seed + 350), seed);
    }
}

#[test]
fn relu_gradients() {
    for seed in 0..5 {
        let mut net = Network::new((2, 4, 4), vec![Layer::Relu(Relu)]);
        check(&mut net, &random_nchw(2, 2, 4, 4, seed + 400), seed);
    }
}

#[test]
fn maxpool_gradients() {
    for seed in 0..5 {
        let mut net = Network::new((2, 6, 6), vec![Layer::MaxPool(MaxPool { in_hw: (6, 6) })]);
        check(&mut net, &random_nchw(2, 2, 6, 6, seed + 500), seed);
    }
}

#[test]
fn dropout_gradients_with_frozen_mask() {
    for seed in 0..5 {
        let mut net = Network::new((1, 1, 1), vec![Layer::Dropout(Dropout { rate: 0.5 })]);
        check(&mut net, &random_nd(3, 16, seed + 600), seed);
    }
}

#[test]
fn fc_gradients() {
    for seed in 0..5 {
        let mut net = Network::new((1, 1, 1), vec![Layer::Fc(Fc::new(10, 7))]);
        init(&mut net, seed);
        check(&mut net, &random_nd(3, 10, seed + 700), seed);
    }
}

#[test]
fn softmax_gradients() {
    for seed in 0..5 {
        let mut net = Network::new((1, 1, 1), vec![Layer::Softmax(Softmax)]);
        check(&mut net, &random_nd(3, 6, seed + 800), seed);
    }
}

#[test]
fn flatten_roundtrip_gradients() {
    for seed in 0..5 {
        let mut net = Network::new(
            (2, 4, 4),
            vec![Layer::Flatten(Flatten), Layer::Fc(Fc::new(32, 5))],
        );
        init(&mut net, seed);
        check(&mut net, &random_nchw(2, 2, 4, 4, seed + 900), seed);
    }
}

#[test]
fn classifier_style_stack_gradients() {
    for seed in 0..3 {
        let mut net = Network::new(
            (2, 8, 8),
            vec![
                Layer::Conv(Conv2d::new(2, 3, 3, 1, (8, 8))),
                Layer::Relu(Relu),
                Layer::MaxPool(MaxPool { in_hw: (8, 8) }),
                Layer::Flatten(Flatten),
                Layer::Dropout(Dropout { rate: 0.5 }),
                Layer::Fc(Fc::new(3 * 4 * 4, 8)),
                Layer::Relu(Relu),
                Layer::Fc(Fc::new(8, 4)),
            ],
        );
        init(&mut net, seed);
        jitter_biases(&mut net, seed);
        check(&mut net, &random_nchw(2, 2, 8, 8, seed + 1000), seed);
    }
}

#[test]
fn autoencoder_style_stack_gradients() {
    for seed in 0..3 {
        let mut net = Network::new(
            (1, 8, 8),
            vec![
                Layer::Conv(Conv2d::new(1, 2, 3, 1, (8, 8))),
                Layer::Relu(Relu),
                Layer::MaxPool(MaxPool { in_hw: (8, 8) }),
                Layer::Conv(Conv2d::new(2, 3, 3, 2, (4, 4))),
                Layer::Relu(Relu),
                Layer::TConv(TConv2d::new(3, 2, 3, (2, 2))),
                Layer::Relu(Relu),
                Layer::TConv(TConv2d::new(2, 1, 5, (4, 4))),
            ],
        );
        init(&mut net, seed);
        jitter_biases(&mut net, seed);
        check(&mut net, &random_nchw(2, 1, 8, 8, seed + 1100), seed);
    }
}

#[test]
fn mse_loss_through_network() {
    let mut net = Network::new(
        (1, 6, 6),
        vec![
            Layer::Conv(Conv2d::new(1, 2, 3, 1, (6, 6))),
            Layer::Relu(Relu),
            Layer::TConv(TConv2d::new(2, 1, 3, (6, 6))),
        ],
    );
    // tconv doubles spatial size, so target is 12x12.
    init(&mut net, 42);
    let x = random_nchw(2, 1, 6, 6, 4242);
    let target = random_nchw(2, 1, 12, 12, 4343);
    let target = TensorBatch::Nchw(target.into_nchw().unwrap().mapv(f64::abs));
    let err = check_loss(&mut net, &x, |y| mse(y, &target), STEP, 9, 40).unwrap();
    assert!(err < TOL, "mse loss gradient error {err}");
}

#[test]
fn softmax_log_loss_through_network() {
    let mut net = Network::new(
        (1, 6, 6),
        vec![
            Layer::Conv(Conv2d::new(1, 2, 3, 1, (6, 6))),
            Layer::Relu(Relu),
            Layer::MaxPool(MaxPool { in_hw: (6, 6) }),
            Layer::Flatten(Flatten),
            Layer::Fc(Fc::new(2 * 3 * 3, 4)),
        ],
    );
    init(&mut net, 43);
    let x = random_nchw(3, 1, 6, 6, 4444);
    let labels = vec![0usize, 2, 3];
    let err = check_loss(
        &mut net,
        &x,
        |y| {
            let logits = y.as_nd().unwrap();
            let (loss, grad) = softmax_log_loss(logits, &labels)?;
            Ok((loss, TensorBatch::Nd(grad)))
        },
        STEP,
        10,
        40,
    )
    .unwrap();
    assert!(err < TOL, "softmax log loss gradient error {err}");
}

#[test]
fn tconv_doubles_spatial_size() {
    let net = Network::new((2, 5, 5), vec![Layer::TConv(TConv2d::new(2, 3, 5, (5, 5)))]);
    let y = net.forward_eval(random_nchw(1, 2, 5, 5, 1)).unwrap();
    let y = y.into_nchw().unwrap();
    assert_eq!(y.shape(), &[1, 3, 10, 10]);
}
