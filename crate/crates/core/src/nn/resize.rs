//! Bilinear resampling with the half-pixel (align-corners = false) convention.

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn taps(len_in: usize, len_out: usize) -> Vec<Tap> {
    let scale = len_in as f64 / len_out as f64;
    (0..len_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

fn check(x_shape: [usize; 4], out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    if x_shape[1] == 0 || x_shape[2] == 0 {
        return Err(Error::Shape("resize of an empty tensor".into()));
    }
    Ok(())
}

pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check(x.shape(), out_h, out_w)?;
    if out_h == x.h() && out_w == x.w() {
        return Ok(x.clone());
    }
    let ty = taps(x.h(), out_h);
    let tx = taps(x.w(), out_w);
    let c = x.c();
    let mut out = Tensor::zeros([x.n(), out_h, out_w, c]);
    for n in 0..x.n() {
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::cast_from(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::cast_from(b.frac);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let p00 = x.index(n, a.i0, b.i0, 0);
                let p01 = x.index(n, a.i0, b.i1, 0);
                let p10 = x.index(n, a.i1, b.i0, 0);
                let p11 = x.index(n, a.i1, b.i1, 0);
                let d = x.data();
                let dst = out.index(n, oy, ox, 0);
                let od = out.data_mut();
                for ch in 0..c {
                    od[dst + ch] = w00 * d[p00 + ch]
                        + w01 * d[p01 + ch]
                        + w10 * d[p10 + ch]
                        + w11 * d[p11 + ch];
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`resize_bilinear`] w.r.t. its input of shape `in_shape`.
pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, in_shape: [usize; 4]) -> Result<Tensor<T>> {
    let (out_h, out_w) = (dy.h(), dy.w());
    check(in_shape, out_h, out_w)?;
    if dy.n() != in_shape[0] || dy.c() != in_shape[3] {
        return Err(Error::Shape(format!(
            "resize backward: grad {:?} vs input {in_shape:?}",
            dy.shape()
        )));
    }
    if out_h == in_shape[1] && out_w == in_shape[2] {
        return Ok(dy.clone());
    }
    let ty = taps(in_shape[1], out_h);
    let tx = taps(in_shape[2], out_w);
    let c = in_shape[3];
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..in_shape[0] {
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::cast_from(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::cast_from(b.frac);
                let ws = [
                    ((a.i0, b.i0), (T::one() - fy) * (T::one() - fx)),
                    ((a.i0, b.i1), (T::one() - fy) * fx),
                    ((a.i1, b.i0), fy * (T::one() - fx)),
                    ((a.i1, b.i1), fy * fx),
                ];
                let src = dy.index(n, oy, ox, 0);
                for ((iy, ix), wgt) in ws {
                    let dst = dx.index(n, iy, ix, 0);
                    for ch in 0..c {
                        let g = dy.data()[src + ch];
                        let slot = &mut dx.data_mut()[dst + ch];
                        *slot = *slot + wgt * g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_fn([1, 3, 4, 2], |_, h, w, c| (h * 10 + w + c) as f32 * 0.3);
        assert_eq!(resize_bilinear(&x, 3, 4).unwrap(), x);
    }

    #[test]
    fn single_pixel_upscales_to_constant() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.5f32]).unwrap();
        let y = resize_bilinear(&x, 4, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn ramp_is_preserved_in_interior() {
        // x[w] = 3w + 1 ; 2x upscale maps output o to source (o + 0.5)/2 - 0.5
        let x = Tensor::from_fn([1, 1, 6, 1], |_, _, w, _| 3.0 * w as f64 + 1.0);
        let y = resize_bilinear(&x, 1, 12).unwrap();
        for o in 1..11 {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            assert!((y.get(0, 0, o, 0) - (3.0 * src + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_zero_target() {
        let x = Tensor::<f32>::zeros([1, 2, 2, 1]);
        assert!(matches!(resize_bilinear(&x, 0, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn backward_is_adjoint() {
        // <resize(x), g> == <x, resize^T(g)>
        let x = Tensor::from_fn([1, 3, 5, 2], |_, h, w, c| ((h * 7 + w * 3 + c) as f64).sin());
        let g = Tensor::from_fn([1, 7, 4, 2], |_, h, w, c| ((h * 5 + w * 11 + c) as f64).cos());
        let y = resize_bilinear(&x, 7, 4).unwrap();
        let dx = resize_bilinear_backward(&g, x.shape()).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
