use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Scalar, TensorError};

/// Inverted-dropout multiplier per unit: `0` for dropped units and
/// `1 / (1 - p)` for survivors.
pub(crate) fn dropout_mask<T: Scalar>(len: usize, p: f64, seed: u64) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) || p.is_nan() {
        return Err(TensorError::InvalidDropProbability(p));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect())
}

/// `y[n, o] = sum_i x[n, i] * w[o, i] + b[o]`.
pub(crate) fn dense_forward<T: Scalar>(
    batch: usize,
    inputs: usize,
    outputs: usize,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * outputs];
    T::gemm(batch, inputs, outputs, x, false, w, true, &mut y, false);
    if let Some(b) = b {
        for row in y.chunks_mut(outputs) {
            row.iter_mut().zip(b).for_each(|(v, &bias)| *v = *v + bias);
        }
    }
    y
}

/// Stable log-softmax cross-entropy averaged over the batch. Returns the loss
/// and the softmax probabilities.
pub(crate) fn softmax_cross_entropy<T: Scalar>(
    batch: usize,
    classes: usize,
    logits: &[T],
    labels: &[usize],
) -> (f64, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut loss = 0.0f64;
    for n in 0..batch {
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum.ln();
        loss -= row[labels[n]].as_f64() - log_z;
        for (k, v) in row.iter().enumerate() {
            probs[n * classes + k] = T::from_f64_lossy((v.as_f64() - log_z).exp());
        }
    }
    (loss / batch as f64, probs)
}
