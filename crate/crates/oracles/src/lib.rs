//! Slow, obviously-correct reference computations for tests. Nothing here
//! depends on the engine it checks: plain `f64` slices and explicit loops.

/// Direct-summation 2-D convolution, NHWC input, `[kh][kw][cin][cout]` kernel.
/// `same` zero-pads to `ceil(in / stride)` with any odd pixel at the end.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    shape: [usize; 4],
    kernel: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    bias: &[f64],
    stride: usize,
    same: bool,
) -> (Vec<f64>, [usize; 4]) {
    let [n, h, w, cin] = shape;
    let (oh, ow, pt, pl) = if same {
        let oh = (h + stride - 1) / stride;
        let ow = (w + stride - 1) / stride;
        let ph = ((oh - 1) * stride + kh).saturating_sub(h);
        let pw = ((ow - 1) * stride + kw).saturating_sub(w);
        (oh, ow, ph / 2, pw / 2)
    } else {
        ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
    };
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for f in 0..cout {
                    let mut acc = bias[f];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as i64 - pt as i64;
                            let ix = (ox * stride + kx) as i64 - pl as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            for c in 0..cin {
                                let x = input[((b * h + iy as usize) * w + ix as usize) * cin + c];
                                let k = kernel[((ky * kw + kx) * cin + c) * cout + f];
                                acc += x * k;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + f] = acc;
                }
            }
        }
    }
    (out, [n, oh, ow, cout])
}

/// `out[b][j] = bias[j] + Σ_i input[b][i]·weights[i][j]`.
pub fn dense(input: &[f64], n: usize, inputs: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let units = bias.len();
    let mut out = vec![0.0; n * units];
    for b in 0..n {
        for j in 0..units {
            let mut acc = bias[j];
            for i in 0..inputs {
                acc += input[b * inputs + i] * weights[i * units + j];
            }
            out[b * units + j] = acc;
        }
    }
    out
}

/// Training-mode batch normalization over all leading axes, feature-last.
pub fn batchnorm_train(x: &[f64], features: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let rows = x.len() / features;
    let mut out = vec![0.0; x.len()];
    for c in 0..features {
        let column: Vec<f64> = (0..rows).map(|r| x[r * features + c]).collect();
        let mean = column.iter().sum::<f64>() / rows as f64;
        let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            out[r * features + c] = gamma[c] * (column[r] - mean) / (var + eps).sqrt() + beta[c];
        }
    }
    out
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batchnorm_infer(
    x: &[f64],
    features: usize,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i % features;
            gamma[c] * (v - mean[c]) / (var[c] + eps).sqrt() + beta[c]
        })
        .collect()
}

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h`, restoring `x[i]` afterwards.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Mean, minimum and maximum by explicit accumulation.
pub fn mean_min_max(values: &[f64]) -> (f64, f64, f64) {
    let mut sum = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        sum += v;
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    (sum / values.len() as f64, lo, hi)
}

/// A prediction row: `(id, actual, predicted, confidence)`.
pub type Row = (u32, u8, u8, f64);

/// Ids predicted wrongly, and ids predicted correctly with confidence at or
/// below `threshold`, each sorted ascending.
pub fn flag_rows(rows: &[Row], threshold: f64) -> (Vec<u32>, Vec<u32>) {
    let mut wrong = Vec::new();
    let mut unsure = Vec::new();
    for &(id, actual, predicted, confidence) in rows {
        if predicted != actual {
            wrong.push(id);
        } else if confidence <= threshold {
            unsure.push(id);
        }
    }
    wrong.sort_unstable();
    unsure.sort_unstable();
    (wrong, unsure)
}

/// Ids present in every list, by counting.
pub fn intersect_all(lists: &[Vec<u32>]) -> Vec<u32> {
    let mut counts = std::collections::HashMap::new();
    for list in lists {
        let mut seen = list.clone();
        seen.sort_unstable();
        seen.dedup();
        for id in seen {
            *counts.entry(id).or_insert(0usize) += 1;
        }
    }
    let mut out: Vec<u32> = counts
        .into_iter()
        .filter(|&(_, c)| c == lists.len())
        .map(|(id, _)| id)
        .collect();
    out.sort_unstable();
    out
}
