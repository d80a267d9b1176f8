use crate::element::Element;

pub(crate) struct NormForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

fn for_channel(n: usize, c: usize, hw: usize, ch: usize, mut f: impl FnMut(usize)) {
    for s in 0..n {
        let base = (s * c + ch) * hw;
        for i in base..base + hw {
            f(i);
        }
    }
}

/// Per-channel normalization of an NCHW buffer. With `stats == None` the
/// batch moments are used; otherwise the given `(mean, var)` pair.
pub(crate) fn forward<T: Element>(
    x: &[T],
    dims: (usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> NormForward<T> {
    let (n, c, hw) = dims;
    let count = T::from_usize(n * hw).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    match stats {
        Some((m, v)) => {
            mean.copy_from_slice(m);
            var.copy_from_slice(v);
        }
        None => {
            for ch in 0..c {
                let mut acc = T::zero();
                for_channel(n, c, hw, ch, |i| acc = acc + x[i]);
                let mu = acc / count;
                let mut sq = T::zero();
                for_channel(n, c, hw, ch, |i| {
                    let d = x[i] - mu;
                    sq = sq + d * d;
                });
                mean[ch] = mu;
                var[ch] = sq / count;
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        for_channel(n, c, hw, ch, |i| {
            let xh = (x[i] - mu) * is;
            xhat[i] = xh;
            out[i] = g * xh + b;
        });
    }
    NormForward { out, xhat, inv_std, mean, var }
}

/// Returns `(d_input, d_gamma, d_beta)`. `batch_stats` selects whether the
/// moments depended on the input (train mode) or were constants (infer mode).
pub(crate) fn backward<T: Element>(
    gout: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    dims: (usize, usize, usize),
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = dims;
    let count = T::from_usize(n * hw).unwrap();
    let mut dx = vec![T::zero(); gout.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for_channel(n, c, hw, ch, |i| {
            sum_dy = sum_dy + gout[i];
            sum_dy_xhat = sum_dy_xhat + gout[i] * xhat[i];
        });
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch];
        if batch_stats {
            let mean_dy = sum_dy / count;
            let mean_dy_xhat = sum_dy_xhat / count;
            for_channel(n, c, hw, ch, |i| {
                dx[i] = scale * (gout[i] - mean_dy - xhat[i] * mean_dy_xhat);
            });
        } else {
            for_channel(n, c, hw, ch, |i| dx[i] = scale * gout[i]);
        }
    }
    (dx, dgamma, dbeta)
}
