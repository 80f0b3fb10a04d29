//! Sensor encodings (occupancy grid, radar pillars, camera input) and the
//! convolutional feature extractors that turn them into feature maps.

mod fpn;
mod occupancy;
mod pillars;

use serde::{Deserialize, Serialize};

pub use fpn::{
    blend_multiscale, camera_input, BevFpn, BevFpnCache, BevFpnConfig, Blend, BlendCache, BlendConfig, CameraFpn, CameraFpnCache,
    CameraFpnConfig,
};
pub use occupancy::{encode_occupancy, OccupancyConfig, OccupancyGrid};
pub use pillars::{encode_pillars, PillarCache, PillarConfig, PillarGrid, PillarNet};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, GridSpec};
use crate::nn::{resize_bilinear, resize_bilinear_backward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    L,
    C,
    R,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::L, Modality::C, Modality::R];

    pub fn letter(self) -> char {
        match self {
            Modality::L => 'L',
            Modality::C => 'C',
            Modality::R => 'R',
        }
    }

    /// Parses a set such as `"LCR"` or `"CR"`; order and case are ignored.
    pub fn parse_set(s: &str) -> Result<Vec<Modality>> {
        let mut out = Vec::new();
        for ch in s.chars() {
            let m = match ch.to_ascii_uppercase() {
                'L' => Modality::L,
                'C' => Modality::C,
                'R' => Modality::R,
                _ => return Err(Error::InvalidArgument(format!("unknown modality {ch:?} in {s:?}"))),
            };
            if out.contains(&m) {
                return Err(Error::InvalidArgument(format!("modality {ch:?} repeated in {s:?}")));
            }
            out.push(m);
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("empty modality set".into()));
        }
        out.sort();
        Ok(out)
    }

    /// Canonical name of a set in `L, C, R` order, e.g. `"LCR"`.
    pub fn set_name(set: &[Modality]) -> String {
        Modality::ALL.iter().filter(|m| set.contains(m)).map(|m| m.letter()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureFrame {
    /// Image plane of a camera with the given input intrinsics.
    Image(CameraIntrinsics),
    /// BEV plane; the tensor has `grid.out_dims()` cells.
    Bev(GridSpec),
}

/// A `(1, rows, cols, channels)` feature tensor tied to the plane it lives on.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub frame: FeatureFrame,
    /// Output scale: `Z` for image maps, `S` for BEV maps.
    pub scale: f64,
    /// Source modality; `None` for a fused map.
    pub modality: Option<Modality>,
}

fn scaled(len: usize, scale: f64) -> Result<usize> {
    let v = len as f64 * scale;
    if (v - v.round()).abs() > 1e-9 || v < 0.5 {
        return Err(Error::Shape(format!("{len} is not divisible at scale {scale}")));
    }
    Ok(v.round() as usize)
}

impl FeatureMap {
    pub fn bev(tensor: Tensor, grid: GridSpec, modality: Modality) -> Result<Self> {
        let (rows, cols) = grid.dims(grid.scale)?;
        if tensor.n() != 1 || tensor.h() != rows || tensor.w() != cols {
            return Err(Error::Shape(format!(
                "BEV map {:?} does not match grid dims {rows}x{cols}",
                tensor.shape()
            )));
        }
        Ok(FeatureMap {
            tensor,
            frame: FeatureFrame::Bev(grid),
            scale: grid.scale,
            modality: Some(modality),
        })
    }

    pub fn image(tensor: Tensor, intr: CameraIntrinsics, scale: f64, modality: Modality) -> Result<Self> {
        let rows = scaled(intr.height, scale)?;
        let cols = scaled(intr.width, scale)?;
        if tensor.n() != 1 || tensor.h() != rows || tensor.w() != cols {
            return Err(Error::Shape(format!(
                "image map {:?} does not match {rows}x{cols} at scale {scale}",
                tensor.shape()
            )));
        }
        Ok(FeatureMap {
            tensor,
            frame: FeatureFrame::Image(intr),
            scale,
            modality: Some(modality),
        })
    }

    pub fn channels(&self) -> usize {
        self.tensor.c()
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        match &self.frame {
            FeatureFrame::Bev(g) => Some(g),
            FeatureFrame::Image(_) => None,
        }
    }

    /// Fails unless this is a BEV map on exactly `grid`.
    pub fn expect_grid(&self, grid: &GridSpec) -> Result<()> {
        match self.grid() {
            Some(g) if g == grid => Ok(()),
            Some(g) => Err(Error::GridMismatch(format!("{g:?} vs {grid:?}"))),
            None => Err(Error::GridMismatch("expected a BEV map, got an image map".into())),
        }
    }
}

/// Bilinearly resamples a BEV map onto `target`'s output raster. The grids
/// must cover the same metric extent.
pub fn radar_upscale(map: &FeatureMap, target: &GridSpec) -> Result<FeatureMap> {
    let src = map
        .grid()
        .ok_or_else(|| Error::GridMismatch("radar_upscale needs a BEV map".into()))?;
    if !src.same_extent(target) {
        return Err(Error::GridMismatch(format!("extent {src:?} vs {target:?}")));
    }
    let (rows, cols) = target.dims(target.scale)?;
    let tensor = resize_bilinear(&map.tensor, rows, cols)?;
    Ok(FeatureMap {
        tensor,
        frame: FeatureFrame::Bev(*target),
        scale: target.scale,
        modality: map.modality,
    })
}

/// Gradient of [`radar_upscale`] w.r.t. the source tensor.
pub fn radar_upscale_backward(dy: &Tensor, src_shape: [usize; 4]) -> Result<Tensor> {
    resize_bilinear_backward(dy, src_shape)
}
