//! Dense detection losses: sigmoid focal loss for classification, masked L2 for regression.

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss summed over all elements and divided by `normalizer`.
///
/// Per element with `p = sigmoid(logit)`:
/// positive (`target = 1`): `-alpha * (1 - p)^gamma * ln p`,
/// negative (`target = 0`): `-p^gamma * ln(1 - p)`.
/// `alpha` scales positives only, so `gamma = 0, alpha = 1` is plain binary
/// cross-entropy. Log terms use softplus so logits of magnitude 50+ stay finite.
///
/// Returns the loss and its gradient w.r.t. the logits.
pub fn focal_loss<T: Real>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    gamma: f64,
    alpha: f64,
    normalizer: f64,
) -> Result<(T, Tensor<T>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "focal loss: logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("focal gamma must be >= 0, got {gamma}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("focal alpha must be in (0,1], got {alpha}")));
    }
    if !(normalizer > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "focal normalizer must be > 0, got {normalizer}"
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("focal loss logits".into()));
    }
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.data().iter().zip(targets.data()) {
        let x = x.as_f64();
        let p = sigmoid(x);
        let q = sigmoid(-x);
        let (l, g) = if t.as_f64() > 0.5 {
            let log_p = -softplus(-x);
            let qg = q.powf(gamma);
            (-alpha * qg * log_p, alpha * qg * (gamma * p * log_p - q))
        } else {
            let log_q = -softplus(x);
            let pg = p.powf(gamma);
            (-pg * log_q, pg * (p - gamma * q * log_q))
        };
        total += l;
        grad.push(T::cast_from(g / normalizer));
    }
    Ok((T::cast_from(total / normalizer), Tensor::from_vec(logits.shape(), grad)?))
}

/// Squared error summed over cells with `mask = 1` (all channels), divided by
/// `max(1, #masked cells)`. `mask` has one channel.
pub fn l2_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "l2 loss: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let [n, h, w, c] = pred.shape();
    if mask.shape() != [n, h, w, 1] {
        return Err(Error::Shape(format!(
            "l2 loss: mask {:?} vs pred {:?}",
            mask.shape(),
            pred.shape()
        )));
    }
    let count = mask.data().iter().filter(|m| m.as_f64() > 0.5).count();
    let denom = count.max(1) as f64;
    let mut total = 0.0f64;
    let mut grad = vec![T::zero(); pred.len()];
    for (cell, &m) in mask.data().iter().enumerate() {
        if m.as_f64() <= 0.5 {
            continue;
        }
        for ch in 0..c {
            let i = cell * c + ch;
            let r = pred.data()[i].as_f64() - target.data()[i].as_f64();
            total += r * r;
            grad[i] = T::cast_from(2.0 * r / denom);
        }
    }
    Ok((T::cast_from(total / denom), Tensor::from_vec(pred.shape(), grad)?))
}
