use rand::Rng;

use super::{shape_err, Mode, NnError, Real, Result, Tensor};

/// Inverted dropout. In training mode each element survives with probability
/// `1 - rate` and is scaled by `1 / (1 - rate)`; inference is the identity.
/// The returned mask holds the per-element multiplier (`0` or the scale).
pub fn dropout_forward<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NnError::BadRate(rate));
    }
    if mode == Mode::Inference || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let keep = 1.0 - rate;
    let scale = T::lit(1.0 / keep);
    // 32-bit threshold keeps the draw cheap; resolution 2^-32 is ample here.
    let threshold = (keep * 4_294_967_296.0) as u64;
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if (rng.next_u32() as u64) < threshold {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    let out = input
        .data()
        .iter()
        .zip(&mask)
        .map(|(&x, &m)| x * m)
        .collect();
    Ok((Tensor::new(input.shape().to_vec(), out)?, Some(mask)))
}

pub fn dropout_backward<T: Real>(grad_out: &Tensor<T>, mask: Option<&[T]>) -> Result<Tensor<T>> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(mask) => {
            if mask.len() != grad_out.len() {
                return Err(shape_err(grad_out.shape(), &[mask.len()]));
            }
            let data = grad_out
                .data()
                .iter()
                .zip(mask)
                .map(|(&g, &m)| g * m)
                .collect();
            Tensor::new(grad_out.shape().to_vec(), data)
        }
    }
}
