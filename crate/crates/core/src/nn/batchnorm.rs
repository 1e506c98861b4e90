use super::{shape_err, Mode, NnError, Real, Result, Tensor};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-feature batch normalization parameters. Features are the last axis;
/// statistics are taken over every other axis (batch and spatial).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub moving_mean: Vec<T>,
    pub moving_variance: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: vec![T::one(); features],
            beta: vec![T::zero(); features],
            moving_mean: vec![T::zero(); features],
            moving_variance: vec![T::one(); features],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    shape: Vec<usize>,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_variance: Vec<f64>,
}

impl<T> BatchNormCache<T> {
    pub fn batch_mean(&self) -> &[f64] {
        &self.batch_mean
    }

    /// Biased (divide-by-count) batch variance.
    pub fn batch_variance(&self) -> &[f64] {
        &self.batch_variance
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn check_features<T: Real>(input: &Tensor<T>, features: usize) -> Result<usize> {
    match input.shape().last() {
        Some(&f) if f == features => Ok(input.len() / features.max(1)),
        _ => {
            let mut expected = input.shape().to_vec();
            if let Some(last) = expected.last_mut() {
                *last = features;
            }
            Err(shape_err(&expected, input.shape()))
        }
    }
}

/// Normalizes without touching the moving statistics. In training mode the
/// returned cache carries the batch statistics for
/// [`update_moving_stats`] and the backward pass.
pub fn batchnorm_apply<T: Real>(
    input: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let f = state.features();
    let rows = check_features(input, f)?;
    let x = input.data();
    match mode {
        Mode::Inference => {
            let scale: Vec<T> = (0..f)
                .map(|c| {
                    let var = state.moving_variance[c].to_f64().unwrap();
                    state.gamma[c] / T::lit((var + state.epsilon).sqrt())
                })
                .collect();
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks_exact(f) {
                for c in 0..f {
                    out.push((row[c] - state.moving_mean[c]) * scale[c] + state.beta[c]);
                }
            }
            Ok((Tensor::new(input.shape().to_vec(), out)?, None))
        }
        Mode::Training => {
            if rows == 0 {
                return Err(NnError::EmptyBatch);
            }
            let mut mean = vec![0.0f64; f];
            for row in x.chunks_exact(f) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v.to_f64().unwrap();
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0f64; f];
            for row in x.chunks_exact(f) {
                for c in 0..f {
                    let d = row[c].to_f64().unwrap() - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            let inv_std: Vec<f64> = var
                .iter()
                .map(|v| 1.0 / (v + state.epsilon).sqrt())
                .collect();
            let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
            let inv_t: Vec<T> = inv_std.iter().map(|&s| T::lit(s)).collect();
            let mut xhat = Vec::with_capacity(x.len());
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks_exact(f) {
                for c in 0..f {
                    let h = (row[c] - mean_t[c]) * inv_t[c];
                    xhat.push(h);
                    out.push(state.gamma[c] * h + state.beta[c]);
                }
            }
            Ok((
                Tensor::new(input.shape().to_vec(), out)?,
                Some(BatchNormCache {
                    shape: input.shape().to_vec(),
                    xhat,
                    inv_std,
                    batch_mean: mean,
                    batch_variance: var,
                }),
            ))
        }
    }
}

/// `moving ← momentum·moving + (1 − momentum)·batch_stat`.
pub fn update_moving_stats<T: Real>(state: &mut BatchNormState<T>, cache: &BatchNormCache<T>) {
    let m = state.momentum;
    for c in 0..state.features() {
        let mm = state.moving_mean[c].to_f64().unwrap();
        let mv = state.moving_variance[c].to_f64().unwrap();
        state.moving_mean[c] = T::lit(m * mm + (1.0 - m) * cache.batch_mean[c]);
        state.moving_variance[c] = T::lit(m * mv + (1.0 - m) * cache.batch_variance[c]);
    }
}

/// Training mode normalizes with batch statistics and folds them into the
/// moving averages; inference mode uses the moving averages.
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (out, cache) = batchnorm_apply(input, state, mode)?;
    if let Some(cache) = &cache {
        update_moving_stats(state, cache);
    }
    Ok((out, cache))
}

/// Gradient through the batch statistics (training-mode forward).
pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    state: &BatchNormState<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_out.shape() != cache.shape.as_slice() {
        return Err(shape_err(&cache.shape, grad_out.shape()));
    }
    let f = state.features();
    let rows = grad_out.len() / f.max(1);
    let dy = grad_out.data();

    let mut sum_dy = vec![0.0f64; f];
    let mut sum_dy_xhat = vec![0.0f64; f];
    for (g, h) in dy.chunks_exact(f).zip(cache.xhat.chunks_exact(f)) {
        for c in 0..f {
            let g = g[c].to_f64().unwrap();
            sum_dy[c] += g;
            sum_dy_xhat[c] += g * h[c].to_f64().unwrap();
        }
    }

    // dxhat = dy·gamma, so the per-feature sums of dxhat and dxhat·xhat are
    // gamma·sum_dy and gamma·sum_dy_xhat.
    let n = rows as f64;
    let coef: Vec<(T, T, T)> = (0..f)
        .map(|c| {
            let gamma = state.gamma[c].to_f64().unwrap();
            let k = gamma * cache.inv_std[c];
            (
                T::lit(k),
                T::lit(k * sum_dy[c] / n),
                T::lit(k * sum_dy_xhat[c] / n),
            )
        })
        .collect();
    let mut dx = Vec::with_capacity(dy.len());
    for (g, h) in dy.chunks_exact(f).zip(cache.xhat.chunks_exact(f)) {
        for c in 0..f {
            let (k, mean_term, xhat_term) = coef[c];
            dx.push(k * g[c] - mean_term - h[c] * xhat_term);
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::new(cache.shape.clone(), dx)?,
        gamma: sum_dy_xhat.iter().map(|&v| T::lit(v)).collect(),
        beta: sum_dy.iter().map(|&v| T::lit(v)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_statistics_in_inference() {
        let state = BatchNormState::<f64>::new(3);
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25]).unwrap();
        let (y, cache) = batchnorm_apply(&x, &state, Mode::Inference).unwrap();
        assert!(cache.is_none());
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_batch_maps_to_beta() {
        let mut state = BatchNormState::<f64>::new(2);
        state.beta = vec![0.3, -0.7];
        state.gamma = vec![2.0, 5.0];
        let x = Tensor::new(vec![4, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &mut state, Mode::Training).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.3, -0.7]);
        }
    }

    #[test]
    fn moving_stats_follow_momentum() {
        let mut state = BatchNormState::<f64>::new(1);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        batchnorm_forward(&x, &mut state, Mode::Training).unwrap();
        assert!((state.moving_mean[0] - 0.01 * 2.0).abs() < 1e-12);
        assert!((state.moving_variance[0] - (0.99 + 0.01 * 1.0)).abs() < 1e-12);
        batchnorm_forward(&x, &mut state, Mode::Inference).unwrap();
        assert!((state.moving_mean[0] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn empty_training_batch() {
        let mut state = BatchNormState::<f32>::new(4);
        let x = Tensor::zeros(vec![0, 4]);
        assert_eq!(
            batchnorm_forward(&x, &mut state, Mode::Training).unwrap_err(),
            NnError::EmptyBatch
        );
    }

    #[test]
    fn zero_upstream_and_beta_identity() {
        let state = BatchNormState::<f64>::new(2);
        let x = Tensor::new(vec![3, 2], vec![0.1, 0.9, -0.4, 0.2, 0.7, -1.1]).unwrap();
        let (_, cache) = batchnorm_apply(&x, &state, Mode::Training).unwrap();
        let cache = cache.unwrap();
        let zero = batchnorm_backward(&Tensor::zeros(vec![3, 2]), &cache, &state).unwrap();
        assert!(zero.input.data().iter().all(|&v| v == 0.0));
        assert!(zero.gamma.iter().chain(&zero.beta).all(|&v| v == 0.0));

        let dy = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let grads = batchnorm_backward(&dy, &cache, &state).unwrap();
        assert_eq!(grads.beta, vec![9.0, 12.0]);
    }
}
