use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batchnorm::{batchnorm_apply, batchnorm_backward, update_moving_stats};
use super::conv::{conv2d_backward, conv2d_forward};
use super::dense::{dense_backward, dense_forward};
use super::dropout::{dropout_backward, dropout_forward};
use super::loss::softmax_xent_batch;
use super::spec::{canonical_spec, LayerSpec, ModelSpec, ParamCount};
use super::{
    shape_err, BatchNormCache, BatchNormState, Conv2d, ConvCache, Dense, DenseCache, Mode, Real,
    Result, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    BatchNorm(BatchNormState<T>),
    Dropout { rate: f64 },
    Flatten,
    Dense(Dense<T>),
}

/// A layer chain and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
    seed: u64,
}

#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Conv2d(ConvCache<T>),
    BatchNorm(Option<BatchNormCache<T>>),
    Dropout(Option<Vec<T>>),
    Flatten(Vec<usize>),
    Dense(DenseCache<T>),
}

#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    /// Mean cross-entropy, present when labels were supplied.
    pub loss: Option<f64>,
    grad_logits: Option<Tensor<T>>,
    caches: Vec<LayerCache<T>>,
}

impl<T> ForwardPass<T> {
    pub fn caches(&self) -> &[LayerCache<T>] {
        &self.caches
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads<T> {
    None,
    Conv2d { weights: Vec<T>, bias: Vec<T> },
    BatchNorm { gamma: Vec<T>, beta: Vec<T> },
    Dense { weights: Vec<T>, bias: Vec<T> },
}

/// One gradient entry per layer, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T> Gradients<T> {
    /// Flat views in the same order as [`Model::trainable_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for g in &self.layers {
            match g {
                LayerGrads::None => {}
                LayerGrads::Conv2d { weights, bias } | LayerGrads::Dense { weights, bias } => {
                    out.push(weights.as_slice());
                    out.push(bias.as_slice());
                }
                LayerGrads::BatchNorm { gamma, beta } => {
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
            }
        }
        out
    }
}

fn glorot<T: Real>(len: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len)
        .map(|_| T::lit(rng.random_range(-limit..limit)))
        .collect()
}

/// The canonical digit classifier with Glorot-uniform weights drawn from `seed`.
pub fn build_canonical_model<T: Real>(seed: u64) -> Model<T> {
    Model::from_spec(canonical_spec(), seed).expect("canonical spec is consistent")
}

impl<T: Real> Model<T> {
    /// Glorot-uniform kernels, zero biases, unit gamma, zero beta, zero moving
    /// mean and unit moving variance.
    pub fn from_spec(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = spec.input_shapes()?;
        let layers = spec
            .layers
            .iter()
            .zip(&inputs)
            .map(|(layer, shape)| {
                let last = *shape.last().unwrap_or(&0);
                match *layer {
                    LayerSpec::Conv2d(c) => {
                        let mut conv = Conv2d::zeros(c, last);
                        let taps = c.kernel.0 * c.kernel.1;
                        conv.weights =
                            glorot(conv.weights.len(), taps * last, taps * c.filters, &mut rng);
                        Layer::Conv2d(conv)
                    }
                    LayerSpec::BatchNorm => Layer::BatchNorm(BatchNormState::new(last)),
                    LayerSpec::Dropout { rate } => Layer::Dropout { rate },
                    LayerSpec::Flatten => Layer::Flatten,
                    LayerSpec::Dense { units, activation } => {
                        let mut dense = Dense::zeros(last, units, activation);
                        dense.weights = glorot(dense.weights.len(), last, units, &mut rng);
                        Layer::Dense(dense)
                    }
                }
            })
            .collect();
        Ok(Self { spec, layers, seed })
    }

    /// Reassembles a model from stored parts, checking every array length
    /// against the spec.
    pub fn from_parts(spec: ModelSpec, layers: Vec<Layer<T>>, seed: u64) -> Result<Self> {
        let template = Self::from_spec(spec.clone(), 0)?;
        if template.layers.len() != layers.len() {
            return Err(shape_err(&[template.layers.len()], &[layers.len()]));
        }
        for (want, got) in template.layers.iter().zip(&layers) {
            let (a, b) = (layer_lengths(want), layer_lengths(got));
            if a != b {
                return Err(shape_err(&a, &b));
            }
        }
        Ok(Self { spec, layers, seed })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Counts from the stored arrays (not from the spec formulas).
    pub fn param_count(&self) -> ParamCount {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv2d(c) => ParamCount {
                    trainable: c.weights.len() + c.bias.len(),
                    non_trainable: 0,
                },
                Layer::Dense(d) => ParamCount {
                    trainable: d.weights.len() + d.bias.len(),
                    non_trainable: 0,
                },
                Layer::BatchNorm(bn) => ParamCount {
                    trainable: bn.gamma.len() + bn.beta.len(),
                    non_trainable: bn.moving_mean.len() + bn.moving_variance.len(),
                },
                Layer::Dropout { .. } | Layer::Flatten => ParamCount::default(),
            })
            .sum()
    }

    /// Mutable views of every optimizer-updated array. Moving statistics are
    /// deliberately absent.
    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv2d(c) => {
                    out.push(c.weights.as_mut_slice());
                    out.push(c.bias.as_mut_slice());
                }
                Layer::Dense(d) => {
                    out.push(d.weights.as_mut_slice());
                    out.push(d.bias.as_mut_slice());
                }
                Layer::BatchNorm(bn) => {
                    out.push(bn.gamma.as_mut_slice());
                    out.push(bn.beta.as_mut_slice());
                }
                Layer::Dropout { .. } | Layer::Flatten => {}
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let c = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::lit(x.to_f64().unwrap())).collect() };
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv2d(l) => Layer::Conv2d(Conv2d {
                    spec: l.spec,
                    in_channels: l.in_channels,
                    weights: c(&l.weights),
                    bias: c(&l.bias),
                }),
                Layer::Dense(l) => Layer::Dense(Dense {
                    in_features: l.in_features,
                    units: l.units,
                    activation: l.activation,
                    weights: c(&l.weights),
                    bias: c(&l.bias),
                }),
                Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNormState {
                    gamma: c(&bn.gamma),
                    beta: c(&bn.beta),
                    moving_mean: c(&bn.moving_mean),
                    moving_variance: c(&bn.moving_variance),
                    epsilon: bn.epsilon,
                    momentum: bn.momentum,
                }),
                Layer::Dropout { rate } => Layer::Dropout { rate: *rate },
                Layer::Flatten => Layer::Flatten,
            })
            .collect();
        Model {
            spec: self.spec.clone(),
            layers,
            seed: self.seed,
        }
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.shape().len() != self.spec.input_shape.len() + 1
            || batch.shape()[1..] != self.spec.input_shape[..]
        {
            let mut want = vec![batch.batch()];
            want.extend(&self.spec.input_shape);
            return Err(shape_err(&want, batch.shape()));
        }
        Ok(())
    }

    /// Runs the chain without mutating the model. Returns logits and, when
    /// `record` is set, per-layer caches for the backward pass.
    fn run<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
        record: bool,
    ) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut caches = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let (y, cache) = match layer {
                Layer::Conv2d(conv) => {
                    let (y, c) = conv2d_forward(&x, conv)?;
                    (y, LayerCache::Conv2d(c))
                }
                Layer::BatchNorm(bn) => {
                    let (y, c) = batchnorm_apply(&x, bn, mode)?;
                    (y, LayerCache::BatchNorm(c))
                }
                Layer::Dropout { rate } => {
                    let (y, mask) = dropout_forward(&x, *rate, mode, rng)?;
                    (y, LayerCache::Dropout(mask))
                }
                Layer::Flatten => {
                    let shape = x.shape().to_vec();
                    let n = x.batch();
                    let width = x.len() / n.max(1);
                    (x.reshape(vec![n, width])?, LayerCache::Flatten(shape))
                }
                Layer::Dense(dense) => {
                    let (y, c) = dense_forward(&x, dense)?;
                    (y, LayerCache::Dense(c))
                }
            };
            if record {
                caches.push(cache);
            }
            x = y;
        }
        Ok((x, caches))
    }

    /// Forward pass over a `[batch, 28, 28, 1]` tensor. Training mode samples
    /// dropout masks from `rng`, normalizes with batch statistics and folds
    /// them into the moving averages, and records what [`Model::backward`]
    /// needs.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        labels: Option<&[u8]>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        let record = mode == Mode::Training;
        let (logits, caches) = self.run(batch, mode, rng, record)?;
        for (layer, cache) in self.layers.iter_mut().zip(&caches) {
            if let (Layer::BatchNorm(bn), LayerCache::BatchNorm(Some(c))) = (layer, cache) {
                update_moving_stats(bn, c);
            }
        }
        finish_pass(logits, caches, labels)
    }

    /// Training-mode pass that leaves the moving statistics untouched.
    pub fn forward_detached<R: Rng + ?Sized>(
        &self,
        batch: &Tensor<T>,
        labels: Option<&[u8]>,
        rng: &mut R,
    ) -> Result<ForwardPass<T>> {
        let (logits, caches) = self.run(batch, Mode::Training, rng, true)?;
        finish_pass(logits, caches, labels)
    }

    /// Inference-mode logits.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.run(batch, Mode::Inference, &mut no_rng, false)?.0)
    }

    /// Inference-mode class probabilities.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, _) = self.run(batch, Mode::Inference, &mut no_rng, false)?;
        Ok(finish_pass(logits, Vec::new(), None)?.probs)
    }

    /// Gradient of the pass's mean loss w.r.t. every trainable array.
    pub fn backward(&self, pass: &ForwardPass<T>) -> Result<Gradients<T>> {
        let mut grad = pass
            .grad_logits
            .clone()
            .ok_or_else(|| shape_err(&[pass.logits.batch()], &[]))?;
        if pass.caches.len() != self.layers.len() {
            return Err(shape_err(&[self.layers.len()], &[pass.caches.len()]));
        }
        let mut out = vec![LayerGrads::None; self.layers.len()];
        for (i, (layer, cache)) in self.layers.iter().zip(&pass.caches).enumerate().rev() {
            let need_input = i > 0;
            grad = match (layer, cache) {
                (Layer::Conv2d(conv), LayerCache::Conv2d(c)) => {
                    let g = conv2d_backward(&grad, c, conv, need_input)?;
                    out[i] = LayerGrads::Conv2d {
                        weights: g.weights,
                        bias: g.bias,
                    };
                    match g.input {
                        Some(t) => t,
                        None => break,
                    }
                }
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(Some(c))) => {
                    let g = batchnorm_backward(&grad, c, bn)?;
                    out[i] = LayerGrads::BatchNorm {
                        gamma: g.gamma,
                        beta: g.beta,
                    };
                    g.input
                }
                (Layer::Dropout { .. }, LayerCache::Dropout(mask)) => {
                    dropout_backward(&grad, mask.as_deref())?
                }
                (Layer::Flatten, LayerCache::Flatten(shape)) => grad.reshape(shape.clone())?,
                (Layer::Dense(dense), LayerCache::Dense(c)) => {
                    let g = dense_backward(&grad, c, dense)?;
                    out[i] = LayerGrads::Dense {
                        weights: g.weights,
                        bias: g.bias,
                    };
                    g.input
                }
                _ => return Err(shape_err(&[i], &[])),
            };
        }
        Ok(Gradients { layers: out })
    }
}

fn layer_lengths<T>(layer: &Layer<T>) -> Vec<usize> {
    match layer {
        Layer::Conv2d(c) => vec![c.weights.len(), c.bias.len()],
        Layer::Dense(d) => vec![d.weights.len(), d.bias.len()],
        Layer::BatchNorm(bn) => vec![
            bn.gamma.len(),
            bn.beta.len(),
            bn.moving_mean.len(),
            bn.moving_variance.len(),
        ],
        Layer::Dropout { .. } | Layer::Flatten => vec![],
    }
}

fn finish_pass<T: Real>(
    logits: Tensor<T>,
    caches: Vec<LayerCache<T>>,
    labels: Option<&[u8]>,
) -> Result<ForwardPass<T>> {
    match labels {
        Some(labels) => {
            let loss = softmax_xent_batch(&logits, labels)?;
            Ok(ForwardPass {
                logits,
                probs: loss.probs,
                loss: Some(loss.mean_loss),
                grad_logits: Some(loss.grad),
                caches,
            })
        }
        None => {
            let classes = logits.shape().get(1).copied().unwrap_or(0);
            let mut probs = Vec::with_capacity(logits.len());
            for row in logits.data().chunks_exact(classes.max(1)) {
                probs.extend(super::loss::softmax(row));
            }
            Ok(ForwardPass {
                probs: Tensor::new(logits.shape().to_vec(), probs)?,
                logits,
                loss: None,
                grad_logits: None,
                caches,
            })
        }
    }
}
