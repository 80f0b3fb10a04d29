//! Elementwise and channel ops. Each forward has a matching backward.

use crate::error::{Error, Result};
use crate::nn::tensor::{check_same_shape, Real, Tensor};

/// Sum of equally-shaped tensors. The gradient w.r.t. every operand is `dy`.
pub fn add<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("add of zero tensors".into()))?;
    let mut out = (*first).clone();
    for x in &xs[1..] {
        check_same_shape(&out, x, "add")?;
        out.add_assign(x)?;
    }
    Ok(out)
}

/// Concatenates along the channel axis, preserving argument order.
pub fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let [n, h, w, _] = first.shape();
    for x in xs {
        if x.n() != n || x.h() != h || x.w() != w {
            return Err(Error::Shape(format!(
                "concat: {:?} vs {:?}",
                first.shape(),
                x.shape()
            )));
        }
    }
    let c_total: usize = xs.iter().map(|x| x.c()).sum();
    let mut out = Vec::with_capacity(n * h * w * c_total);
    for p in 0..n * h * w {
        for x in xs {
            let c = x.c();
            out.extend_from_slice(&x.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::from_vec([n, h, w, c_total], out)
}

/// Splits a channel-concatenated gradient back into per-operand pieces.
pub fn concat_channels_backward<T: Real>(dy: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = channels.iter().sum();
    if total != dy.c() {
        return Err(Error::Shape(format!(
            "concat backward: {} channels vs split {:?}",
            dy.c(),
            channels
        )));
    }
    let [n, h, w, _] = dy.shape();
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(n * h * w * c)).collect();
    for px in dy.data().chunks(total) {
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&px[off..off + c]);
            off += c;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec([n, h, w, c], d))
        .collect()
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(x, dy, "relu backward")?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[inline]
pub fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Gradient of the sigmoid given its *output* `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(y, dy, "sigmoid backward")?;
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor::from_vec(y.shape(), data)
}
