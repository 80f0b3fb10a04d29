use super::{Calibration, PseudoPoint};
use crate::encoders::{FeatureFrame, FeatureMap, Modality};
use crate::error::{Error, Result};
use crate::geometry::{project_to_image, GridSpec};
use crate::nn::{Conv, ParamStore, Tensor};

/// Point-driven association between image-feature pixels and BEV cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatterIndex {
    /// `(bev cell, image pixel)` pairs in point order; both flattened row-major.
    pub pairs: Vec<(u32, u32)>,
    /// BEV raster `(rows, cols)` at the grid's output scale.
    pub bev_dims: (usize, usize),
    /// Image feature raster `(rows, cols)`.
    pub image_dims: (usize, usize),
}

/// Projects every point into the image (nearest pixel of the `z`-scaled
/// feature map) and into the BEV grid at `grid.scale`. Points outside either
/// are dropped.
pub fn scatter_index(points: &[PseudoPoint], calib: &Calibration, z: f64, grid: &GridSpec) -> Result<ScatterIndex> {
    let (rows, cols) = grid.dims(grid.scale)?;
    let ih = (calib.intrinsics.height as f64 * z).round() as usize;
    let iw = (calib.intrinsics.width as f64 * z).round() as usize;
    let positions: Vec<_> = points.iter().map(|p| p.position).collect();
    let proj = project_to_image(&calib.intrinsics, &calib.cam_from_ego, &positions);
    let mut pairs = Vec::new();
    for (p, pr) in positions.iter().zip(&proj) {
        if !pr.valid {
            continue;
        }
        let Some((i, j)) = grid.index(*p, grid.scale).inside() else {
            continue;
        };
        let r = ((pr.v * z).floor() as usize).min(ih - 1);
        let c = ((pr.u * z).floor() as usize).min(iw - 1);
        pairs.push(((i * cols + j) as u32, (r * iw + c) as u32));
    }
    Ok(ScatterIndex {
        pairs,
        bev_dims: (rows, cols),
        image_dims: (ih, iw),
    })
}

/// Mean of the image features gathered into each BEV cell; untouched cells
/// stay zero. Sums run in point order, then each cell is divided by its count.
pub fn scatter_mean(f_c: &Tensor, idx: &ScatterIndex) -> Result<Tensor> {
    if (f_c.h(), f_c.w()) != idx.image_dims || f_c.n() != 1 {
        return Err(Error::Shape(format!(
            "image features {:?} do not match scatter index {:?}",
            f_c.shape(),
            idx.image_dims
        )));
    }
    let k = f_c.c();
    let (rows, cols) = idx.bev_dims;
    let mut out = Tensor::zeros([1, rows, cols, k]);
    let mut counts = vec![0u32; rows * cols];
    {
        let src = f_c.data();
        let dst = out.data_mut();
        for &(cell, pix) in &idx.pairs {
            let (cell, pix) = (cell as usize, pix as usize);
            counts[cell] += 1;
            let d = &mut dst[cell * k..(cell + 1) * k];
            for (a, &b) in d.iter_mut().zip(&src[pix * k..(pix + 1) * k]) {
                *a += b;
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            if n > 1 {
                for a in &mut dst[cell * k..(cell + 1) * k] {
                    *a /= n as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Transports image features `F^C` into the BEV plane of `grid` through the
/// given points, then maps the `K` channels to `K_bev` with a 1x1 conv.
/// Returns the BEV map and the pre-conv mean-pooled tensor.
pub fn scatter_image_to_bev(
    f_c: &FeatureMap,
    points: &[PseudoPoint],
    calib: &Calibration,
    grid: &GridSpec,
    conv: &Conv,
    ps: &ParamStore,
) -> Result<(FeatureMap, Tensor)> {
    let FeatureFrame::Image(intr) = f_c.frame else {
        return Err(Error::InvalidArgument("scatter needs an image-plane feature map".into()));
    };
    if intr != calib.intrinsics {
        return Err(Error::InvalidArgument(format!(
            "calibration {:?} does not match the image features {:?}",
            calib.intrinsics, intr
        )));
    }
    let idx = scatter_index(points, calib, f_c.scale, grid)?;
    let mean = scatter_mean(&f_c.tensor, &idx)?;
    let out = conv.infer(ps, &mean)?;
    Ok((FeatureMap::bev(out, *grid, Modality::C)?, mean))
}
