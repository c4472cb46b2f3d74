use super::{Result, Scalar, TensorError};

/// Per-channel statistics of one training batch: the mean and the unbiased
/// variance used to update running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) struct TrainOutput<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: BatchStats,
}

fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let s = shape[2..].iter().product();
    (n, c, s)
}

pub(crate) fn train_forward<T: Scalar>(
    shape: &[usize],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<TrainOutput<T>> {
    let (n, c, s) = channel_view(shape);
    if n < 2 {
        return Err(TensorError::DegenerateBatch(n));
    }
    let m = (n * s) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            sum += x[(b * c + ch) * s..(b * c + ch + 1) * s].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0.0;
        for b in 0..n {
            sq += x[(b * c + ch) * s..(b * c + ch + 1) * s]
                .iter()
                .map(|v| (v.as_f64() - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let (g, be) = (gamma[ch].as_f64(), beta[ch].as_f64());
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                let xh = (x[i].as_f64() - mean[ch]) * inv_std[ch];
                xhat[i] = T::from_f64_lossy(xh);
                y[i] = T::from_f64_lossy(g * xh + be);
            }
        }
    }
    let unbiased = var.iter().map(|v| v * m / (m - 1.0)).collect();
    Ok(TrainOutput {
        y,
        xhat,
        inv_std: inv_std.into_iter().map(T::from_f64_lossy).collect(),
        stats: BatchStats { mean, var: unbiased },
    })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn train_backward<T: Scalar>(
    shape: &[usize],
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, s) = channel_view(shape);
    let m = (n * s) as f64;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                sum_dy += dy[i].as_f64();
                sum_dy_xhat += dy[i].as_f64() * xhat[i].as_f64();
            }
        }
        dgamma[ch] = T::from_f64_lossy(sum_dy_xhat);
        dbeta[ch] = T::from_f64_lossy(sum_dy);
        let g = gamma[ch].as_f64();
        let k = g * inv_std[ch].as_f64() / m;
        for b in 0..n {
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                let v = k * (m * dy[i].as_f64() - sum_dy - xhat[i].as_f64() * sum_dy_xhat);
                dx[i] = T::from_f64_lossy(v);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Inference-mode normalization with fixed statistics.
pub(crate) fn eval_forward<T: Scalar>(
    shape: &[usize],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Vec<T> {
    let (n, c, s) = channel_view(shape);
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                y[i] = x[i] * scale + shift;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)` for [`eval_forward`].
pub(crate) fn eval_backward<T: Scalar>(
    shape: &[usize],
    dy: &[T],
    x: &[T],
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, s) = channel_view(shape);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                dx[i] = dy[i] * scale;
                dbeta[ch] += dy[i].as_f64();
                dgamma[ch] += dy[i].as_f64() * ((x[i] - mean[ch]) * inv_std[ch]).as_f64();
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::from_f64_lossy).collect(),
        dbeta.into_iter().map(T::from_f64_lossy).collect(),
    )
}
