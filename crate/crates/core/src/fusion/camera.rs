use serde::{Deserialize, Serialize};

use super::head::DenseOutput;
use super::targets::TargetMaps;
use super::{Calibration, PointSource, PseudoPoint};
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::{project_to_image, Vec3};
use crate::nn::ops::sigmoid_scalar;
use crate::nn::Tensor;
use crate::sim::{Box3D, ClassId};

/// Camera head regression: `(du, dv, ln depth)`, offsets in feature cells.
pub const CAMERA_REG: usize = 3;

/// Boxes closer than this (camera depth, meters) are not camera targets.
const MIN_DEPTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPointConfig {
    pub top_k: usize,
    pub min_conf: f64,
}

impl Default for CameraPointConfig {
    fn default() -> Self {
        CameraPointConfig { top_k: 40, min_conf: 0.1 }
    }
}

/// Image-plane targets of the camera head; same layout as [`TargetMaps`]
/// with [`CAMERA_REG`] regression channels.
pub type CameraTargets = TargetMaps;

/// Feature cells whose centers fall inside the image-plane bounding
/// rectangle of a box are positive for it, the nearer box winning a shared
/// cell. A box whose center projects into the image but whose rectangle
/// covers no cell center claims the cell holding its center, if free.
/// Boxes reaching behind the camera plane are skipped.
pub fn assign_camera_targets(gt: &[Box3D], calib: &Calibration, z: f64) -> Result<CameraTargets> {
    let rows = (calib.intrinsics.height as f64 * z).round() as usize;
    let cols = (calib.intrinsics.width as f64 * z).round() as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("camera feature raster is empty at scale {z}")));
    }
    let centers: Vec<Vec3> = gt.iter().map(|b| b.center).collect();
    let proj = project_to_image(&calib.intrinsics, &calib.cam_from_ego, &centers);
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; rows * cols];
    let mut claimed = vec![false; gt.len()];
    for (b, pr) in proj.iter().enumerate() {
        if !pr.valid || pr.depth < MIN_DEPTH {
            continue;
        }
        let corners = project_to_image(&calib.intrinsics, &calib.cam_from_ego, &gt[b].corners());
        if corners.iter().any(|c| c.depth <= 0.0) {
            continue;
        }
        let (mut u0, mut u1, mut v0, mut v1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for c in &corners {
            u0 = u0.min(c.u * z);
            u1 = u1.max(c.u * z);
            v0 = v0.min(c.v * z);
            v1 = v1.max(c.v * z);
        }
        // cells with centers in [lo, hi]
        let span = |lo: f64, hi: f64, n: usize| {
            let first = (lo - 0.5).ceil().max(0.0) as usize;
            let last = ((hi - 0.5).floor()).min(n as f64 - 1.0);
            if last < 0.0 {
                0..0
            } else {
                first..(last as usize + 1).max(first)
            }
        };
        for r in span(v0, v1, rows) {
            for c in span(u0, u1, cols) {
                claimed[b] = true;
                let slot = &mut owner[r * cols + c];
                if slot.map_or(true, |(d, _)| pr.depth < d) {
                    *slot = Some((pr.depth, b));
                }
            }
        }
    }
    for (b, pr) in proj.iter().enumerate() {
        if claimed[b] || !pr.valid || pr.depth < MIN_DEPTH {
            continue;
        }
        let r = ((pr.v * z).floor() as usize).min(rows - 1);
        let c = ((pr.u * z).floor() as usize).min(cols - 1);
        owner[r * cols + c].get_or_insert((pr.depth, b));
    }
    let mut cls = Tensor::zeros([1, rows, cols, ClassId::ALL.len()]);
    let mut reg = Tensor::zeros([1, rows, cols, CAMERA_REG]);
    let mut mask = Tensor::zeros([1, rows, cols, 1]);
    for r in 0..rows {
        for c in 0..cols {
            let Some((depth, b)) = owner[r * cols + c] else { continue };
            let pr = &proj[b];
            cls.set(0, r, c, gt[b].class_id.index(), 1.0);
            mask.set(0, r, c, 0, 1.0);
            let t = reg.pixel_mut(0, r, c);
            t[0] = (pr.u * z - (c as f64 + 0.5)) as f32;
            t[1] = (pr.v * z - (r as f64 + 0.5)) as f32;
            t[2] = depth.ln() as f32;
        }
    }
    Ok(TargetMaps { cls, reg, mask })
}

fn check_camera_dense(dense: &DenseOutput) -> Result<()> {
    let [_, h, w, _] = dense.cls_logits.shape();
    if dense.reg.shape() != [1, h, w, CAMERA_REG] {
        return Err(Error::Shape(format!(
            "camera head regression {:?} does not match logits {:?}",
            dense.reg.shape(),
            dense.cls_logits.shape()
        )));
    }
    Ok(())
}

/// Ego-frame centroid predicted by feature cell `(r, c)`.
fn cell_centroid(dense: &DenseOutput, calib: &Calibration, z: f64, r: usize, c: usize) -> Vec3 {
    let t = dense.reg.pixel(0, r, c);
    let u = (c as f64 + 0.5 + t[0] as f64) / z;
    let v = (r as f64 + 0.5 + t[1] as f64) / z;
    let depth = (t[2] as f64).clamp(-2.0, 6.0).exp();
    calib.cam_from_ego.inverse().apply(calib.intrinsics.backproject(u, v, depth))
}

/// Up to `top_k` cells with objectness (max class score) at least
/// `min_conf`, best first (ties by cell order), decoded to ego-frame centroids.
pub fn camera_pseudo_points(dense: &DenseOutput, calib: &Calibration, z: f64, cfg: &CameraPointConfig) -> Result<Vec<PseudoPoint>> {
    check_camera_dense(dense)?;
    let [_, h, w, _] = dense.cls_logits.shape();
    let mut cells: Vec<(f64, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let best = dense.cls_logits.pixel(0, r, c).iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let conf = sigmoid_scalar(best as f64);
            if conf >= cfg.min_conf {
                cells.push((conf, r * w + c));
            }
        }
    }
    cells.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cells.truncate(cfg.top_k);
    Ok(cells
        .into_iter()
        .map(|(conf, k)| PseudoPoint {
            position: cell_centroid(dense, calib, z, k / w, k % w),
            source: PointSource::CameraCentroid,
            confidence: conf as f32,
        })
        .collect())
}

/// BEV detections of the camera-only detector: one box per cell and class
/// above `score_thresh`, at the predicted centroid with the class prior size.
pub fn camera_detections(dense: &DenseOutput, calib: &Calibration, z: f64, frame_id: u64, score_thresh: f64) -> Result<Vec<Detection>> {
    check_camera_dense(dense)?;
    let [_, h, w, nc] = dense.cls_logits.shape();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            for k in 0..nc {
                let score = sigmoid_scalar(dense.cls_logits.get(0, r, c, k) as f64);
                if score < score_thresh {
                    continue;
                }
                let class = ClassId::from_index(k).ok_or_else(|| Error::Shape(format!("no class for channel {k}")))?;
                let p = cell_centroid(dense, calib, z, r, c);
                let (l, wd) = class.prior_size();
                let ph = class.prior_height();
                out.push(Detection {
                    bbox: Box3D {
                        center: [p[0], p[1], ph / 2.0],
                        size: [l, wd, ph],
                        yaw: 0.0,
                        class_id: class,
                        speed: 0.0,
                    },
                    score,
                    frame_id,
                });
            }
        }
    }
    Ok(out)
}
