use serde::{Deserialize, Serialize};

use super::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// No padding: `out = (in - k) / stride + 1`.
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`; odd padding puts the
    /// extra row/column on the bottom/right.
    Same,
}

impl Padding {
    /// Output length and leading pad for one spatial axis.
    pub fn resolve(self, input: usize, kernel: usize, stride: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Valid => {
                if input < kernel {
                    None
                } else {
                    Some(((input - kernel) / stride + 1, 0))
                }
            }
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                Some((out, total / 2))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    /// Only valid on the final dense layer; fused with the cross-entropy loss.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub filters: usize,
    /// (height, width)
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d(Conv2dSpec),
    BatchNorm,
    Dropout { rate: f64 },
    Flatten,
    Dense { units: usize, activation: Activation },
}

/// Layer chain plus the per-sample input shape `[height, width, channels]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub non_trainable: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.non_trainable
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, rhs: ParamCount) -> ParamCount {
        ParamCount {
            trainable: self.trainable + rhs.trainable,
            non_trainable: self.non_trainable + rhs.non_trainable,
        }
    }
}

impl std::iter::Sum for ParamCount {
    fn sum<I: Iterator<Item = ParamCount>>(iter: I) -> Self {
        iter.fold(ParamCount::default(), |a, b| a + b)
    }
}

/// Learnable parameter count of `layer` given the per-sample shape feeding it.
///
/// conv: `(w*h*f_p + 1) * f`; dense: `n_p*n + n`; batch norm: `2f` trainable
/// (gamma, beta) and `2f` non-trainable (moving mean and variance).
pub fn param_count(layer: &LayerSpec, prev_shape: &[usize]) -> ParamCount {
    let last = prev_shape.last().copied().unwrap_or(0);
    match *layer {
        LayerSpec::Conv2d(c) => ParamCount {
            trainable: (c.kernel.0 * c.kernel.1 * last + 1) * c.filters,
            non_trainable: 0,
        },
        LayerSpec::Dense { units, .. } => ParamCount {
            trainable: last * units + units,
            non_trainable: 0,
        },
        LayerSpec::BatchNorm => ParamCount {
            trainable: 2 * last,
            non_trainable: 2 * last,
        },
        LayerSpec::Dropout { .. } | LayerSpec::Flatten => ParamCount::default(),
    }
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d(c) => {
                let [h, w, _] = input else {
                    return Err(shape_err(&[0, 0, 0], input));
                };
                let (oh, _) = c
                    .padding
                    .resolve(*h, c.kernel.0, c.stride)
                    .ok_or_else(|| shape_err(&[c.kernel.0, c.kernel.1], input))?;
                let (ow, _) = c
                    .padding
                    .resolve(*w, c.kernel.1, c.stride)
                    .ok_or_else(|| shape_err(&[c.kernel.0, c.kernel.1], input))?;
                Ok(vec![oh, ow, c.filters])
            }
            LayerSpec::Dense { units, .. } => {
                if input.len() != 1 {
                    return Err(shape_err(&[input.iter().product()], input));
                }
                Ok(vec![units])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::BatchNorm | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        }
    }
}

impl ModelSpec {
    /// Per-sample output shape after every layer, in order.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Input shape seen by each layer.
    pub fn input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        let outputs = self.output_shapes()?;
        shapes.extend(outputs.into_iter().take(self.layers.len().saturating_sub(1)));
        Ok(shapes)
    }

    pub fn layer_param_counts(&self) -> Result<Vec<ParamCount>> {
        Ok(self
            .layers
            .iter()
            .zip(self.input_shapes()?)
            .map(|(layer, shape)| param_count(layer, &shape))
            .collect())
    }

    pub fn param_count(&self) -> Result<ParamCount> {
        Ok(self.layer_param_counts()?.into_iter().sum())
    }

    pub fn num_classes(&self) -> usize {
        self.output_shapes()
            .ok()
            .and_then(|s| s.last().map(|s| s.iter().product()))
            .unwrap_or(0)
    }
}

/// The 28×28×1 digit classifier: three conv/BN blocks with dropout, then a
/// 128-unit dense block and a 10-way softmax.
pub fn canonical_spec() -> ModelSpec {
    let conv = |filters, k, stride, padding| {
        LayerSpec::Conv2d(Conv2dSpec {
            filters,
            kernel: (k, k),
            stride,
            padding,
            activation: Activation::Relu,
        })
    };
    ModelSpec {
        input_shape: vec![28, 28, 1],
        layers: vec![
            conv(32, 3, 1, Padding::Valid),
            LayerSpec::BatchNorm,
            conv(32, 5, 2, Padding::Same),
            LayerSpec::BatchNorm,
            LayerSpec::Dropout { rate: 0.5 },
            conv(64, 5, 2, Padding::Same),
            LayerSpec::BatchNorm,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                units: 128,
                activation: Activation::Relu,
            },
            LayerSpec::BatchNorm,
            LayerSpec::Dropout { rate: 0.4 },
            LayerSpec::Dense {
                units: 10,
                activation: Activation::Softmax,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(filters: usize, k: usize) -> LayerSpec {
        LayerSpec::Conv2d(Conv2dSpec {
            filters,
            kernel: (k, k),
            stride: 1,
            padding: Padding::Valid,
            activation: Activation::Relu,
        })
    }

    #[test]
    fn per_layer_formulas() {
        assert_eq!(
            param_count(&conv(32, 3), &[28, 28, 1]),
            ParamCount {
                trainable: 320,
                non_trainable: 0
            }
        );
        assert_eq!(param_count(&conv(64, 5), &[13, 13, 32]).trainable, 51_264);
        assert_eq!(param_count(&conv(32, 5), &[26, 26, 32]).trainable, 25_632);
        let bn = param_count(&LayerSpec::BatchNorm, &[26, 26, 32]);
        assert_eq!((bn.trainable, bn.non_trainable, bn.total()), (64, 64, 128));
        let dense = LayerSpec::Dense {
            units: 128,
            activation: Activation::Relu,
        };
        assert_eq!(param_count(&dense, &[3136]).trainable, 401_536);
        assert_eq!(
            param_count(&LayerSpec::Dropout { rate: 0.5 }, &[128]),
            ParamCount::default()
        );
    }

    #[test]
    fn canonical_chain() {
        let spec = canonical_spec();
        let shapes = spec.output_shapes().unwrap();
        assert_eq!(shapes[0], vec![26, 26, 32]);
        assert_eq!(shapes[2], vec![13, 13, 32]);
        assert_eq!(shapes[5], vec![7, 7, 64]);
        assert_eq!(shapes[8], vec![3136]);
        assert_eq!(shapes[9], vec![128]);
        assert_eq!(shapes[12], vec![10]);
        let totals = spec.param_count().unwrap();
        assert_eq!(totals.trainable, 480_554);
        assert_eq!(totals.non_trainable, 512);
        assert_eq!(totals.total(), 481_066);
        let per_layer: Vec<usize> = spec
            .layer_param_counts()
            .unwrap()
            .iter()
            .map(ParamCount::total)
            .collect();
        assert_eq!(
            per_layer,
            vec![320, 128, 25632, 128, 0, 51264, 256, 0, 0, 401536, 512, 0, 1290]
        );
    }

    #[test]
    fn same_padding_splits_extra_to_the_end() {
        assert_eq!(Padding::Same.resolve(26, 5, 2), Some((13, 1)));
        assert_eq!(Padding::Same.resolve(13, 5, 2), Some((7, 2)));
        assert_eq!(Padding::Valid.resolve(28, 3, 1), Some((26, 0)));
        assert_eq!(Padding::Valid.resolve(2, 3, 1), None);
    }

    #[test]
    fn spec_serializes() {
        let spec = canonical_spec();
        let json = serde_json::to_string(&spec).unwrap();
        let back: ModelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
}
