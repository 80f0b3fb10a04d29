//! 2-D cross-correlation via im2col + GEMM, with an optional fused ReLU.

use crate::error::{Error, Result};
use crate::nn::tensor::{gemm, Real, Tensor, Trans};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
    pub relu: bool,
}

impl ConvSpec {
    pub fn same(stride: usize, relu: bool) -> Self {
        ConvSpec {
            stride,
            padding: Padding::Same,
            relu,
        }
    }
}

/// Values saved by the forward pass for backward.
#[derive(Clone, Debug)]
pub struct ConvCache<T: Real> {
    in_shape: [usize; 4],
    kernel: usize,
    spec: ConvSpec,
    /// im2col matrix, `(n*oh*ow) x (k*k*cin)`; the input itself for 1x1/stride-1.
    col: Vec<T>,
    /// Post-activation output; kept only when `relu` is set.
    out: Option<Tensor<T>>,
    out_shape: [usize; 4],
}

/// Gradients produced by [`conv2d_backward`].
pub struct ConvGrads<T: Real> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

fn out_dim(len: usize, k: usize, stride: usize, padding: Padding) -> Option<usize> {
    let pad = match padding {
        Padding::Same => k / 2,
        Padding::Valid => 0,
    };
    (len + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

fn pad_of(k: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => k / 2,
        Padding::Valid => 0,
    }
}

/// Forward convolution. `weight` has shape `(k, k, cin, cout)`, `bias` `(1, 1, 1, cout)`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let [kh, kw, cin, cout] = weight.shape();
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::InvalidArgument(format!(
            "conv kernel must be 1x1 or 3x3, got {kh}x{kw}"
        )));
    }
    if !(spec.stride == 1 || spec.stride == 2) {
        return Err(Error::InvalidArgument(format!(
            "conv stride must be 1 or 2, got {}",
            spec.stride
        )));
    }
    if x.c() != cin {
        return Err(Error::Shape(format!(
            "conv input has {} channels, kernel expects {cin}",
            x.c()
        )));
    }
    if bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv bias has {} values, kernel has {cout} outputs",
            bias.len()
        )));
    }
    let k = kh;
    let [n, h, w, _] = x.shape();
    let (oh, ow) = match (
        out_dim(h, k, spec.stride, spec.padding),
        out_dim(w, k, spec.stride, spec.padding),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::Shape(format!(
                "input {h}x{w} too small for {k}x{k} valid conv"
            )))
        }
    };
    let pad = pad_of(k, spec.padding);
    let rows = n * oh * ow;
    let kdim = k * k * cin;

    let col = if k == 1 && spec.stride == 1 {
        x.data().to_vec()
    } else {
        let mut col = vec![T::zero(); rows * kdim];
        let xd = x.data();
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * kdim;
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let dst = row + (ky * k + kx) * cin;
                            col[dst..dst + cin].copy_from_slice(&xd[src..src + cin]);
                        }
                    }
                }
            }
        }
        col
    };

    let mut out = vec![T::zero(); rows * cout];
    let bd = bias.data();
    for r in 0..rows {
        out[r * cout..(r + 1) * cout].copy_from_slice(bd);
    }
    gemm(
        rows,
        kdim,
        cout,
        &col,
        Trans::No,
        weight.data(),
        Trans::No,
        T::one(),
        &mut out,
    );
    if spec.relu {
        for v in &mut out {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
    let out_shape = [n, oh, ow, cout];
    let y = Tensor::from_vec(out_shape, out)?;
    let cache = ConvCache {
        in_shape: x.shape(),
        kernel: k,
        spec,
        col,
        out: spec.relu.then(|| y.clone()),
        out_shape,
    };
    Ok((y, cache))
}

/// Backward convolution. `dy` is the gradient w.r.t. the (post-activation) output.
pub fn conv2d_backward<T: Real>(
    cache: &ConvCache<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    if dy.shape() != cache.out_shape {
        return Err(Error::Shape(format!(
            "conv backward: grad {:?} vs output {:?}",
            dy.shape(),
            cache.out_shape
        )));
    }
    let [n, h, w, cin] = cache.in_shape;
    let [_, oh, ow, cout] = cache.out_shape;
    let k = cache.kernel;
    let rows = n * oh * ow;
    let kdim = k * k * cin;

    let dy_masked;
    let g: &[T] = match &cache.out {
        Some(out) => {
            dy_masked = dy
                .data()
                .iter()
                .zip(out.data())
                .map(|(&d, &o)| if o > T::zero() { d } else { T::zero() })
                .collect::<Vec<T>>();
            &dy_masked
        }
        None => dy.data(),
    };

    let mut dw = vec![T::zero(); kdim * cout];
    gemm(kdim, rows, cout, &cache.col, Trans::Yes, g, Trans::No, T::zero(), &mut dw);
    let mut db = vec![T::zero(); cout];
    for r in 0..rows {
        for (acc, &v) in db.iter_mut().zip(&g[r * cout..(r + 1) * cout]) {
            *acc = *acc + v;
        }
    }

    let dx = if need_dx {
        let mut dcol = vec![T::zero(); rows * kdim];
        gemm(rows, cout, kdim, g, Trans::No, weight.data(), Trans::Yes, T::zero(), &mut dcol);
        if k == 1 && cache.spec.stride == 1 {
            Some(Tensor::from_vec(cache.in_shape, dcol)?)
        } else {
            let pad = pad_of(k, cache.spec.padding);
            let stride = cache.spec.stride;
            let mut dx = vec![T::zero(); n * h * w * cin];
            for b in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = ((b * oh + oy) * ow + ox) * kdim;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let dst = ((b * h + iy as usize) * w + ix as usize) * cin;
                                let src = row + (ky * k + kx) * cin;
                                for c in 0..cin {
                                    dx[dst + c] = dx[dst + c] + dcol[src + c];
                                }
                            }
                        }
                    }
                }
            }
            Some(Tensor::from_vec(cache.in_shape, dx)?)
        }
    } else {
        None
    };

    Ok(ConvGrads {
        dx,
        dw: Tensor::from_vec(weight.shape(), dw)?,
        db: Tensor::from_vec([1, 1, 1, cout], db)?,
    })
}
