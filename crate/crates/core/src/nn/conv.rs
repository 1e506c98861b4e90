use super::activation::{relu_backward, relu_in_place};
use super::spec::{Activation, Conv2dSpec};
use super::{shape_err, Real, Result, Tensor};

/// 2-D convolution over NHWC input.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    /// Kernel laid out as `[kh][kw][in_channels][filters]`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(spec: Conv2dSpec, in_channels: usize) -> Self {
        Self {
            spec,
            in_channels,
            weights: vec![T::zero(); spec.kernel.0 * spec.kernel.1 * in_channels * spec.filters],
            bias: vec![T::zero(); spec.filters],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    ih: usize,
    iw: usize,
    cin: usize,
    oh: usize,
    ow: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geometry {
    fn new<T: Real>(input_shape: &[usize], layer: &Conv2d<T>) -> Result<Self> {
        let spec = &layer.spec;
        let &[n, ih, iw, cin] = input_shape else {
            return Err(shape_err(&[0, 0, 0, layer.in_channels], input_shape));
        };
        if cin != layer.in_channels {
            return Err(shape_err(&[n, ih, iw, layer.in_channels], input_shape));
        }
        let (kh, kw) = spec.kernel;
        let (oh, pad_top) = spec
            .padding
            .resolve(ih, kh, spec.stride)
            .ok_or_else(|| shape_err(&[n, kh, kw, cin], input_shape))?;
        let (ow, pad_left) = spec
            .padding
            .resolve(iw, kw, spec.stride)
            .ok_or_else(|| shape_err(&[n, kh, kw, cin], input_shape))?;
        Ok(Self {
            n,
            ih,
            iw,
            cin,
            oh,
            ow,
            cout: spec.filters,
            kh,
            kw,
            stride: spec.stride,
            pad_top,
            pad_left,
        })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.oh, self.ow, self.cout]
    }

    /// Calls `f(patch_offset, input_offset)` for every in-bounds kernel tap of
    /// output row `row`; each tap covers `cin` contiguous channels.
    #[inline]
    fn for_each_tap(&self, row: usize, mut f: impl FnMut(usize, usize)) {
        let ox = row % self.ow;
        let oy = (row / self.ow) % self.oh;
        let b = row / (self.ow * self.oh);
        for ky in 0..self.kh {
            let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
            if iy < 0 || iy >= self.ih as isize {
                continue;
            }
            for kx in 0..self.kw {
                let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                if ix < 0 || ix >= self.iw as isize {
                    continue;
                }
                let src = ((b * self.ih + iy as usize) * self.iw + ix as usize) * self.cin;
                f((ky * self.kw + kx) * self.cin, src);
            }
        }
    }
}

fn im2col<T: Real>(input: &[T], g: &Geometry) -> Vec<T> {
    let k = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * k];
    for (row, patch) in cols.chunks_exact_mut(k).enumerate() {
        g.for_each_tap(row, |dst, src| {
            patch[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
        });
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geometry) -> Vec<T> {
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.n * g.ih * g.iw * g.cin];
    for (row, patch) in cols.chunks_exact(k).enumerate() {
        g.for_each_tap(row, |dst, src| {
            for (o, &p) in out[src..src + g.cin].iter_mut().zip(&patch[dst..dst + g.cin]) {
                *o += p;
            }
        });
    }
    out
}

/// What the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    input_shape: Vec<usize>,
    cols: Vec<T>,
    /// Post-activation output, kept only for ReLU layers.
    activated: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// `out[b,y,x,f] = act(bias[f] + Σ input·kernel)` over each receptive field.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    layer: &Conv2d<T>,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let g = Geometry::new(input.shape(), layer)?;
    let cols = im2col(input.data(), &g);
    let mut out = Vec::with_capacity(g.rows() * g.cout);
    for _ in 0..g.rows() {
        out.extend_from_slice(&layer.bias);
    }
    T::gemm(
        g.rows(),
        g.patch_len(),
        g.cout,
        &cols,
        false,
        &layer.weights,
        false,
        T::one(),
        &mut out,
    );
    let mut out = Tensor::new(g.output_shape(), out)?;
    let activated = match layer.spec.activation {
        Activation::Relu => {
            relu_in_place(out.data_mut());
            Some(out.clone())
        }
        Activation::Linear | Activation::Softmax => None,
    };
    Ok((
        out,
        ConvCache {
            input_shape: input.shape().to_vec(),
            cols,
            activated,
        },
    ))
}

/// Gradients w.r.t. input (when `need_input`), kernel and bias.
pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &ConvCache<T>,
    layer: &Conv2d<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(&cache.input_shape, layer)?;
    if grad_out.shape() != g.output_shape().as_slice() {
        return Err(shape_err(&g.output_shape(), grad_out.shape()));
    }
    let grad_z = match &cache.activated {
        Some(a) => relu_backward(grad_out, a)?,
        None => grad_out.clone(),
    };
    let dz = grad_z.data();

    let mut bias = vec![T::zero(); g.cout];
    for row in dz.chunks_exact(g.cout) {
        for (b, &d) in bias.iter_mut().zip(row) {
            *b += d;
        }
    }

    let k = g.patch_len();
    let mut weights = vec![T::zero(); k * g.cout];
    T::gemm(
        k,
        g.rows(),
        g.cout,
        &cache.cols,
        true,
        dz,
        false,
        T::zero(),
        &mut weights,
    );

    let input = if need_input {
        let mut dcols = vec![T::zero(); g.rows() * k];
        T::gemm(
            g.rows(),
            g.cout,
            k,
            dz,
            false,
            &layer.weights,
            true,
            T::zero(),
            &mut dcols,
        );
        Some(Tensor::new(cache.input_shape.clone(), col2im(&dcols, &g))?)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weights,
        bias,
    })
}
