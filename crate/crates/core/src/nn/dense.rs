use super::activation::{relu_backward, relu_in_place};
use super::spec::Activation;
use super::{shape_err, Real, Result, Tensor};

/// Fully connected layer on `[batch, in_features]` input. A softmax
/// activation is left to the loss; this layer emits logits for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub in_features: usize,
    pub units: usize,
    pub activation: Activation,
    /// `[in_features][units]`
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_features: usize, units: usize, activation: Activation) -> Self {
        Self {
            in_features,
            units,
            activation,
            weights: vec![T::zero(); in_features * units],
            bias: vec![T::zero(); units],
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    input: Tensor<T>,
    activated: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub fn dense_forward<T: Real>(
    input: &Tensor<T>,
    layer: &Dense<T>,
) -> Result<(Tensor<T>, DenseCache<T>)> {
    let &[n, features] = input.shape() else {
        return Err(shape_err(&[input.batch(), layer.in_features], input.shape()));
    };
    if features != layer.in_features {
        return Err(shape_err(&[n, layer.in_features], input.shape()));
    }
    let mut out = Vec::with_capacity(n * layer.units);
    for _ in 0..n {
        out.extend_from_slice(&layer.bias);
    }
    T::gemm(
        n,
        features,
        layer.units,
        input.data(),
        false,
        &layer.weights,
        false,
        T::one(),
        &mut out,
    );
    let mut out = Tensor::new(vec![n, layer.units], out)?;
    let activated = if layer.activation == Activation::Relu {
        relu_in_place(out.data_mut());
        Some(out.clone())
    } else {
        None
    };
    Ok((
        out,
        DenseCache {
            input: input.clone(),
            activated,
        },
    ))
}

pub fn dense_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &DenseCache<T>,
    layer: &Dense<T>,
) -> Result<DenseGrads<T>> {
    let n = cache.input.batch();
    if grad_out.shape() != [n, layer.units] {
        return Err(shape_err(&[n, layer.units], grad_out.shape()));
    }
    let grad_z = match &cache.activated {
        Some(a) => relu_backward(grad_out, a)?,
        None => grad_out.clone(),
    };
    let dz = grad_z.data();
    let mut bias = vec![T::zero(); layer.units];
    for row in dz.chunks_exact(layer.units) {
        for (b, &d) in bias.iter_mut().zip(row) {
            *b += d;
        }
    }
    let mut weights = vec![T::zero(); layer.in_features * layer.units];
    T::gemm(
        layer.in_features,
        n,
        layer.units,
        cache.input.data(),
        true,
        dz,
        false,
        T::zero(),
        &mut weights,
    );
    let mut input = vec![T::zero(); n * layer.in_features];
    T::gemm(
        n,
        layer.units,
        layer.in_features,
        dz,
        false,
        &layer.weights,
        true,
        T::zero(),
        &mut input,
    );
    Ok(DenseGrads {
        input: Tensor::new(vec![n, layer.in_features], input)?,
        weights,
        bias,
    })
}
