//! BEV fusion: camera pseudo-points, image-to-BEV scattering, per-modality
//! alignment, additive fusion, the dense detection head with its targets and
//! loss, and the staged trainer.

mod camera;
mod head;
mod model;
mod scatter;
mod targets;
mod train;

use serde::{Deserialize, Serialize};

pub use camera::{assign_camera_targets, camera_detections, camera_pseudo_points, CameraPointConfig, CameraTargets, CAMERA_REG};
pub use head::{decode_dense, head_forward_decode, DenseOutput, DetectionHead, HeadCache, REG_CHANNELS};
pub use model::{ground_truth, FrameInputs, FusionFeatures, FusionSetup, Inference, Model, ModelConfig};
pub use scatter::{scatter_image_to_bev, scatter_index, scatter_mean, ScatterIndex};
pub use targets::{assign_targets, total_loss, LossBreakdown, LossWeights, TargetMaps};
pub use train::{fuse_train, pretrain, StageReport, TrainConfig};

use crate::encoders::{FeatureFrame, FeatureMap, Modality};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Lidar,
    Radar,
    CameraCentroid,
}

impl PointSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lidar" | "L" => Ok(PointSource::Lidar),
            "radar" | "R" => Ok(PointSource::Radar),
            "camera" | "camera_centroid" | "C" => Ok(PointSource::CameraCentroid),
            _ => Err(Error::InvalidArgument(format!("unknown point source {s:?}"))),
        }
    }

    /// Default sources for a modality set: lidar (plus radar) points when
    /// lidar is active, otherwise camera centroids plus radar points.
    pub fn defaults_for(active: &[Modality]) -> Vec<PointSource> {
        let mut out = Vec::new();
        if active.contains(&Modality::L) {
            out.push(PointSource::Lidar);
        } else {
            out.push(PointSource::CameraCentroid);
        }
        if active.contains(&Modality::R) {
            out.push(PointSource::Radar);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoPoint {
    pub position: Vec3,
    pub source: PointSource,
    /// Objectness of the predicting cell for camera centroids, 1 otherwise.
    pub confidence: f32,
}

/// Camera calibration needed to project ego-frame points into the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub cam_from_ego: Pose,
}

/// Elementwise sum of the maps whose modality is active, added in `L, C, R`
/// order. Inactive or absent modalities contribute nothing. The result is
/// tagged with no modality.
pub fn fuse(aligned: &[FeatureMap], active: &[Modality]) -> Result<FeatureMap> {
    let first = aligned
        .first()
        .ok_or_else(|| Error::InvalidArgument("fuse needs at least one map to fix the shape".into()))?;
    let FeatureFrame::Bev(grid) = first.frame else {
        return Err(Error::GridMismatch("fuse expects BEV maps".into()));
    };
    for m in aligned {
        m.expect_grid(&grid)?;
        if m.tensor.shape() != first.tensor.shape() {
            return Err(Error::Shape(format!(
                "fuse: {:?} vs {:?}",
                m.tensor.shape(),
                first.tensor.shape()
            )));
        }
    }
    // summing in a fixed modality order makes the result independent of input order
    let mut sum = Tensor::zeros(first.tensor.shape());
    for mod_ in Modality::ALL {
        let mut of_kind = aligned.iter().filter(|m| m.modality == Some(mod_));
        let Some(m) = of_kind.next() else { continue };
        if of_kind.next().is_some() {
            return Err(Error::InvalidArgument(format!("fuse got two {} maps", mod_.letter())));
        }
        if active.contains(&mod_) {
            sum.add_assign(&m.tensor)?;
        }
    }
    Ok(FeatureMap {
        tensor: sum,
        frame: first.frame,
        scale: first.scale,
        modality: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec {
            x_min: 0.0,
            y_min: -4.0,
            cell_size: 0.5,
            nx: 16,
            ny: 16,
            scale: 0.5,
        }
    }

    fn map(seed: u32, m: Modality) -> FeatureMap {
        let t = Tensor::from_fn([1, 8, 8, 3], |_, h, w, c| (((h * 13 + w * 7 + c * 3) as u32 ^ seed) % 17) as f32 * 0.37 - 2.0);
        FeatureMap::bev(t, grid(), m).unwrap()
    }

    #[test]
    fn single_modality_is_identity() {
        let l = map(1, Modality::L);
        assert_eq!(fuse(&[l.clone()], &[Modality::L]).unwrap().tensor, l.tensor);
    }

    #[test]
    fn silent_modality_equals_dropping_it() {
        let (l, c) = (map(1, Modality::L), map(2, Modality::C));
        let zero_r = FeatureMap::bev(Tensor::zeros([1, 8, 8, 3]), grid(), Modality::R).unwrap();
        let lcr = fuse(&[l.clone(), c.clone(), zero_r], &Modality::ALL).unwrap();
        let lc = fuse(&[l, c], &[Modality::L, Modality::C]).unwrap();
        assert_eq!(lcr.tensor, lc.tensor);
    }

    #[test]
    fn inactive_maps_are_ignored_and_grids_checked() {
        let (l, r) = (map(1, Modality::L), map(3, Modality::R));
        assert_eq!(fuse(&[l.clone(), r], &[Modality::L]).unwrap().tensor, l.tensor);
        let other = GridSpec { y_min: -3.0, ..grid() };
        let bad = FeatureMap::bev(Tensor::zeros([1, 8, 8, 3]), other, Modality::C).unwrap();
        assert!(fuse(&[l, bad], &Modality::ALL).is_err());
    }

    proptest! {
        #[test]
        fn sum_matches_elementwise_oracle_in_any_order(a in 0u32..1000, b in 0u32..1000, c in 0u32..1000) {
            let maps = [map(a, Modality::L), map(b, Modality::C), map(c, Modality::R)];
            let f = fuse(&maps, &Modality::ALL).unwrap();
            for k in 0..f.tensor.len() {
                let expect = maps[0].tensor.data()[k] + maps[1].tensor.data()[k] + maps[2].tensor.data()[k];
                prop_assert_eq!(f.tensor.data()[k], expect);
            }
            let rev = [maps[2].clone(), maps[0].clone(), maps[1].clone()];
            prop_assert_eq!(fuse(&rev, &Modality::ALL).unwrap().tensor, f.tensor.clone());
            // (L + C) + R computed stepwise
            let lc = fuse(&maps[..2], &Modality::ALL).unwrap();
            let mut stepwise = lc.tensor.clone();
            stepwise.add_assign(&maps[2].tensor).unwrap();
            prop_assert_eq!(stepwise, f.tensor);
        }
    }
}
