use super::{shape_err, Real, Result, Tensor};

/// Max-subtracted softmax, evaluated in f64.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let (probs, _) = softmax_f64(logits);
    probs.into_iter().map(T::lit).collect()
}

/// Returns probabilities and log-sum-exp.
fn softmax_f64<T: Real>(logits: &[T]) -> (Vec<f64>, f64) {
    let z: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    (exp.iter().map(|e| e / sum).collect(), max + sum.ln())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxXent<T> {
    pub loss: f64,
    pub grad: Vec<T>,
    pub probs: Vec<T>,
    /// Largest probability.
    pub confidence: f64,
}

/// Cross-entropy of `softmax(logits)` against the one-hot vector of `label`.
/// `grad = probs - one_hot`.
pub fn softmax_xent<T: Real>(logits: &[T], label: usize) -> SoftmaxXent<T> {
    let (probs, lse) = softmax_f64(logits);
    let loss = (lse - logits[label].to_f64().unwrap()).max(0.0);
    let confidence = probs.iter().copied().fold(0.0, f64::max);
    let grad = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| T::lit(if i == label { p - 1.0 } else { p }))
        .collect();
    SoftmaxXent {
        loss,
        grad,
        probs: probs.into_iter().map(T::lit).collect(),
        confidence,
    }
}

#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub mean_loss: f64,
    pub losses: Vec<f64>,
    /// Gradient of the mean loss w.r.t. the logits.
    pub grad: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Mean cross-entropy over a `[batch, classes]` logit matrix.
pub fn softmax_xent_batch<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<BatchLoss<T>> {
    let &[n, classes] = logits.shape() else {
        return Err(shape_err(&[labels.len(), 0], logits.shape()));
    };
    if n != labels.len() || labels.iter().any(|&l| l as usize >= classes) {
        return Err(shape_err(&[labels.len(), classes], logits.shape()));
    }
    let scale = T::lit(1.0 / n.max(1) as f64);
    let mut losses = Vec::with_capacity(n);
    let mut grad = Vec::with_capacity(n * classes);
    let mut probs = Vec::with_capacity(n * classes);
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let r = softmax_xent(row, label as usize);
        losses.push(r.loss);
        grad.extend(r.grad.iter().map(|&g| g * scale));
        probs.extend(r.probs);
    }
    let mean_loss = if n == 0 {
        0.0
    } else {
        losses.iter().sum::<f64>() / n as f64
    };
    Ok(BatchLoss {
        mean_loss,
        losses,
        grad: Tensor::new(vec![n, classes], grad)?,
        probs: Tensor::new(vec![n, classes], probs)?,
    })
}
