//! Gradient and forward checks shared by the core tests and the acceptance
//! suite. Each gradient check returns the worst relative error it saw.
#![allow(dead_code)]

use prunenet::nn::{
    batchnorm_apply, batchnorm_backward, build_canonical_model, conv2d_backward, conv2d_forward,
    dense_backward, dense_forward, softmax_xent, Activation, BatchNormState, Conv2d, Conv2dSpec,
    Dense, Mode, Model, Padding, Tensor,
};
use prunenet_oracles::{central_difference, relative_error};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const LAYER_TOL: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;
pub const FORWARD_TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn weighted_sum(out: &Tensor<f64>, weights: &[f64]) -> f64 {
    out.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| central_difference(&mut f, &mut x, i, H))
        .collect()
}

pub fn conv_gradient_error(stride: usize, padding: Padding, activation: Activation, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = Conv2dSpec {
        filters: 4,
        kernel: (3, 3),
        stride,
        padding,
        activation,
    };
    let mut layer = Conv2d::<f64>::zeros(spec, 3);
    layer.weights = random(&mut rng, layer.weights.len());
    layer.bias = random(&mut rng, 4);
    let shape = vec![2, 6, 7, 3];
    let input = random(&mut rng, 2 * 6 * 7 * 3);
    let x = Tensor::new(shape.clone(), input.clone()).unwrap();
    let (out, cache) = conv2d_forward(&x, &layer).unwrap();
    let upstream = random(&mut rng, out.len());
    let grads = conv2d_backward(
        &Tensor::new(out.shape().to_vec(), upstream.clone()).unwrap(),
        &cache,
        &layer,
        true,
    )
    .unwrap();
    let loss_at = |layer: &Conv2d<f64>, input: &[f64]| {
        let x = Tensor::new(shape.clone(), input.to_vec()).unwrap();
        weighted_sum(&conv2d_forward(&x, layer).unwrap().0, &upstream)
    };

    let d_input = numeric(&input, |x| loss_at(&layer, x));
    let d_weights = numeric(&layer.weights, |w| {
        let mut l = layer.clone();
        l.weights = w.to_vec();
        loss_at(&l, &input)
    });
    let d_bias = numeric(&layer.bias, |b| {
        let mut l = layer.clone();
        l.bias = b.to_vec();
        loss_at(&l, &input)
    });
    worst(grads.input.as_ref().unwrap().data(), &d_input)
        .max(worst(&grads.weights, &d_weights))
        .max(worst(&grads.bias, &d_bias))
}

pub fn dense_gradient_error(activation: Activation, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = Dense::<f64>::zeros(7, 5, activation);
    layer.weights = random(&mut rng, 35);
    layer.bias = random(&mut rng, 5);
    let input = random(&mut rng, 3 * 7);
    let x = Tensor::new(vec![3, 7], input.clone()).unwrap();
    let (out, cache) = dense_forward(&x, &layer).unwrap();
    let upstream = random(&mut rng, out.len());
    let grads = dense_backward(
        &Tensor::new(out.shape().to_vec(), upstream.clone()).unwrap(),
        &cache,
        &layer,
    )
    .unwrap();
    let loss_at = |layer: &Dense<f64>, input: &[f64]| {
        let x = Tensor::new(vec![3, 7], input.to_vec()).unwrap();
        weighted_sum(&dense_forward(&x, layer).unwrap().0, &upstream)
    };
    let d_input = numeric(&input, |x| loss_at(&layer, x));
    let d_weights = numeric(&layer.weights, |w| {
        let mut l = layer.clone();
        l.weights = w.to_vec();
        loss_at(&l, &input)
    });
    let d_bias = numeric(&layer.bias, |b| {
        let mut l = layer.clone();
        l.bias = b.to_vec();
        loss_at(&l, &input)
    });
    worst(grads.input.data(), &d_input)
        .max(worst(&grads.weights, &d_weights))
        .max(worst(&grads.bias, &d_bias))
}

pub fn batchnorm_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = BatchNormState::<f64>::new(3);
    state.gamma = random(&mut rng, 3);
    state.beta = random(&mut rng, 3);
    let shape = vec![2, 2, 2, 3];
    let input = random(&mut rng, 24);
    let x = Tensor::new(shape.clone(), input.clone()).unwrap();
    let (out, cache) = batchnorm_apply(&x, &state, Mode::Training).unwrap();
    let upstream = random(&mut rng, out.len());
    let grads = batchnorm_backward(
        &Tensor::new(shape.clone(), upstream.clone()).unwrap(),
        cache.as_ref().unwrap(),
        &state,
    )
    .unwrap();
    let loss_at = |state: &BatchNormState<f64>, input: &[f64]| {
        let x = Tensor::new(shape.clone(), input.to_vec()).unwrap();
        weighted_sum(&batchnorm_apply(&x, state, Mode::Training).unwrap().0, &upstream)
    };
    let d_input = numeric(&input, |x| loss_at(&state, x));
    let d_gamma = numeric(&state.gamma, |g| {
        let mut s = state.clone();
        s.gamma = g.to_vec();
        loss_at(&s, &input)
    });
    let d_beta = numeric(&state.beta, |b| {
        let mut s = state.clone();
        s.beta = b.to_vec();
        loss_at(&s, &input)
    });
    worst(grads.input.data(), &d_input)
        .max(worst(&grads.gamma, &d_gamma))
        .max(worst(&grads.beta, &d_beta))
}

pub fn softmax_xent_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10)
        .map(|label| {
            let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-4.0..4.0)).collect();
            let d = numeric(&logits, |z| softmax_xent(z, label).loss);
            worst(&softmax_xent(&logits, label).grad, &d)
        })
        .fold(0.0, f64::max)
}

/// Every per-layer case: conv (valid/same, stride 1/2, linear/ReLU), dense
/// (linear/ReLU), batch normalization and the softmax cross-entropy head.
pub fn layer_gradient_errors() -> Vec<(&'static str, f64)> {
    vec![
        ("conv valid s1", conv_gradient_error(1, Padding::Valid, Activation::Linear, 1)),
        ("conv same s2", conv_gradient_error(2, Padding::Same, Activation::Linear, 2)),
        ("conv same s2 relu", conv_gradient_error(2, Padding::Same, Activation::Relu, 3)),
        ("conv valid s1 relu", conv_gradient_error(1, Padding::Valid, Activation::Relu, 4)),
        ("dense", dense_gradient_error(Activation::Linear, 5)),
        ("dense relu", dense_gradient_error(Activation::Relu, 6)),
        ("batchnorm", batchnorm_gradient_error(7)),
        ("softmax xent", softmax_xent_gradient_error(8)),
    ]
}

/// Whole canonical model in training mode on a `batch`-image input, with the
/// dropout masks held fixed by reseeding the mask RNG for every evaluation.
/// Samples `per_array` entries from every trainable array.
pub fn whole_model_gradient_error(batch: usize, per_array: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = build_canonical_model::<f32>(seed).cast::<f64>();
    let pixels: Vec<f64> = (0..batch * 784).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Tensor::new(vec![batch, 28, 28, 1], pixels).unwrap();
    let labels: Vec<u8> = (0..batch).map(|i| (i * 3 % 10) as u8).collect();
    let mask_seed = 1234;

    let loss_of = |m: &Model<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
        m.forward_detached(&x, Some(&labels), &mut r)
            .unwrap()
            .loss
            .unwrap()
    };
    let pass = {
        let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
        model.forward_detached(&x, Some(&labels), &mut r).unwrap()
    };
    let grads = model.backward(&pass).unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

    let mut worst = 0.0f64;
    let mut kinks = 0;
    for (array, grad) in analytic.iter().enumerate() {
        let mut checked = 0;
        while checked < per_array.min(grad.len()) {
            let i = rng.random_range(0..grad.len());
            let central = |h: f64| {
                let mut probe = model.clone();
                let orig = probe.trainable_mut()[array][i];
                probe.trainable_mut()[array][i] = orig + h;
                let plus = loss_of(&probe);
                probe.trainable_mut()[array][i] = orig - h;
                (plus - loss_of(&probe)) / (2.0 * h)
            };
            let numeric = central(H);
            // A ReLU switching inside [x-h, x+h] shows up as disagreement
            // between step sizes; such entries are redrawn.
            if relative_error(numeric, central(H / 10.0), FLOOR) > 1e-5 {
                kinks += 1;
                assert!(kinks <= per_array * analytic.len() / 4, "too many kinks");
                continue;
            }
            worst = worst.max(relative_error(grad[i], numeric, FLOOR));
            checked += 1;
        }
    }
    worst
}

fn close(got: &[f64], want: &[f64]) -> Result<(), TestCaseError> {
    prop_assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        prop_assert!((g - w).abs() <= FORWARD_TOL, "element {}: {} vs {}", i, g, w);
    }
    Ok(())
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

#[derive(Debug, Clone)]
pub struct ConvCase {
    shape: [usize; 4],
    kernel: (usize, usize),
    cout: usize,
    stride: usize,
    same: bool,
    input: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

pub fn conv_case() -> impl Strategy<Value = ConvCase> {
    (1usize..3, 5usize..10, 5usize..10, 1usize..4, 1usize..4, 1usize..6, 1usize..5, 1usize..3, any::<bool>())
        .prop_flat_map(|(n, h, w, cin, cout, kh, kw, stride, same)| {
            let kh = kh.min(h);
            let kw = kw.min(w);
            (
                values(n * h * w * cin),
                values(kh * kw * cin * cout),
                values(cout),
            )
                .prop_map(move |(input, weights, bias)| ConvCase {
                    shape: [n, h, w, cin],
                    kernel: (kh, kw),
                    cout,
                    stride,
                    same,
                    input,
                    weights,
                    bias,
                })
        })
}

/// Linear and ReLU outputs against direct summation.
pub fn check_conv(case: ConvCase) -> Result<(), TestCaseError> {
    let spec = Conv2dSpec {
        filters: case.cout,
        kernel: case.kernel,
        stride: case.stride,
        padding: if case.same { Padding::Same } else { Padding::Valid },
        activation: Activation::Linear,
    };
    let mut layer = Conv2d::<f64>::zeros(spec, case.shape[3]);
    layer.weights = case.weights.clone();
    layer.bias = case.bias.clone();
    let x = Tensor::new(case.shape.to_vec(), case.input.clone()).unwrap();
    let (out, _) = conv2d_forward(&x, &layer).unwrap();
    let (want, want_shape) = prunenet_oracles::conv2d(
        &case.input,
        case.shape,
        &case.weights,
        case.kernel.0,
        case.kernel.1,
        case.cout,
        &case.bias,
        case.stride,
        case.same,
    );
    prop_assert_eq!(out.shape(), &want_shape[..]);
    close(out.data(), &want)?;

    layer.spec.activation = Activation::Relu;
    let (relu, _) = conv2d_forward(&x, &layer).unwrap();
    let want: Vec<f64> = want.iter().map(|v| v.max(0.0)).collect();
    close(relu.data(), &want)
}

pub type DenseCase = (usize, usize, usize, Vec<f64>, Vec<f64>, Vec<f64>);

pub fn dense_case() -> impl Strategy<Value = DenseCase> {
    (1usize..6, 1usize..20, 1usize..12)
        .prop_flat_map(|(n, i, u)| (Just(n), Just(i), Just(u), values(n * i), values(i * u), values(u)))
}

pub fn check_dense((n, inputs, units, input, weights, bias): DenseCase) -> Result<(), TestCaseError> {
    let mut layer = Dense::<f64>::zeros(inputs, units, Activation::Linear);
    layer.weights = weights.clone();
    layer.bias = bias.clone();
    let x = Tensor::new(vec![n, inputs], input.clone()).unwrap();
    let (out, _) = dense_forward(&x, &layer).unwrap();
    close(out.data(), &prunenet_oracles::dense(&input, n, inputs, &weights, &bias))
}

pub type BatchNormCase = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

pub fn batchnorm_case() -> impl Strategy<Value = BatchNormCase> {
    (2usize..40, 1usize..6).prop_flat_map(|(r, f)| {
        (
            Just(r),
            Just(f),
            values(r * f),
            values(f),
            values(f),
            values(f),
            prop::collection::vec(0.01f64..4.0, f),
        )
    })
}

/// Training-mode and inference-mode outputs against the closed forms.
pub fn check_batchnorm(
    (rows, features, x, gamma, beta, mean, var): BatchNormCase,
) -> Result<(), TestCaseError> {
    let mut state = BatchNormState::<f64>::new(features);
    state.gamma = gamma.clone();
    state.beta = beta.clone();
    state.moving_mean = mean.clone();
    state.moving_variance = var.clone();
    let t = Tensor::new(vec![rows, features], x.clone()).unwrap();

    let (train, _) = batchnorm_apply(&t, &state, Mode::Training).unwrap();
    close(train.data(), &prunenet_oracles::batchnorm_train(&x, features, &gamma, &beta, 1e-3))?;

    let (infer, _) = batchnorm_apply(&t, &state, Mode::Inference).unwrap();
    let want = prunenet_oracles::batchnorm_infer(&x, features, &gamma, &beta, &mean, &var, 1e-3);
    close(infer.data(), &want)
}

/// Runs all three forward checks for `cases` cases each.
pub fn forward_oracles(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    let runner = || {
        TestRunner::new(Config {
            failure_persistence: None,
            ..Config::with_cases(cases)
        })
    };
    vec![
        ("conv2d", runner().run(&conv_case(), check_conv).map_err(|e| e.to_string())),
        ("dense", runner().run(&dense_case(), check_dense).map_err(|e| e.to_string())),
        ("batchnorm", runner().run(&batchnorm_case(), check_batchnorm).map_err(|e| e.to_string())),
    ]
}
