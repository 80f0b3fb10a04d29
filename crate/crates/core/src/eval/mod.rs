//! Center-distance detection metrics: NMS, AP at several localization
//! thresholds, range-binned AP, recall against lidar point count, and mRAPD.

mod ap;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use ap::{
    ap_from_flags, average_precision, map_from_aps, map_summary, match_detections, range_binned_ap, recall_vs_point_count, ClassReport,
    EvalReport, Matching, RangeAp, RecallBin, ThresholdAp,
};

use crate::error::{Error, Result};
use crate::sim::{Box3D, ClassId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
    pub frame_id: u64,
}

impl Detection {
    pub fn class_id(&self) -> ClassId {
        self.bbox.class_id
    }
}

/// A labelled box with the number of lidar points that fell inside it, when known.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: Box3D,
    pub frame_id: u64,
    pub lidar_points: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub classes: Vec<ClassId>,
    /// Center-distance thresholds in meters.
    pub thresholds: Vec<f64>,
    /// Objects (and detections) beyond this BEV range are ignored.
    pub max_range: f64,
    /// Range bin edges in meters, ascending.
    pub range_bins: Vec<f64>,
    /// Threshold used for the range-binned AP and the recall curves.
    pub ablation_threshold: f64,
    /// Lower edges of the lidar point-count bins; the last bin is open.
    pub point_bins: Vec<usize>,
    /// Minimum score for a detection to count towards recall.
    pub recall_score: f64,
    /// Decoding threshold applied to the dense head output.
    pub score_thresh: f64,
    /// NMS center distance in meters, per class.
    pub nms_dist: Vec<(ClassId, f64)>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            classes: ClassId::ALL.to_vec(),
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            max_range: 70.0,
            range_bins: vec![0.0, 17.5, 35.0, 52.5, 70.0],
            ablation_threshold: 4.0,
            point_bins: vec![0, 1, 5, 10, 20, 50],
            recall_score: 0.3,
            score_thresh: 0.05,
            nms_dist: vec![(ClassId::Car, 2.0), (ClassId::Pedestrian, 0.5)],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::config("eval.thresholds", "need at least one positive threshold"));
        }
        if self.classes.is_empty() {
            return Err(Error::config("eval.classes", "need at least one class"));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::config("eval.max_range", "must be positive"));
        }
        if self.range_bins.len() < 2 || self.range_bins.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("eval.range_bins", "need at least two strictly increasing edges"));
        }
        if self.point_bins.first() != Some(&0) || self.point_bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("eval.point_bins", "must start at 0 and increase strictly"));
        }
        if !(0.0..=1.0).contains(&self.recall_score) || !(0.0..=1.0).contains(&self.score_thresh) {
            return Err(Error::config("eval.recall_score", "scores must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn nms_dist_for(&self, class: ClassId) -> f64 {
        self.nms_dist.iter().find(|(c, _)| *c == class).map_or(1.0, |&(_, d)| d)
    }
}

fn bev_dist2(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    dx * dx + dy * dy
}

/// Indices sorted by descending score, ties broken by frame id and then
/// input position.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].frame_id.cmp(&dets[b].frame_id))
            .then(a.cmp(&b))
    });
    idx
}

/// Greedy per-frame, per-class suppression by BEV center distance. The
/// survivors come back in score order.
pub fn nms_bev(dets: &[Detection], dist_thresh: f64) -> Vec<Detection> {
    let d2 = dist_thresh * dist_thresh;
    let mut kept: HashMap<(u64, ClassId), Vec<usize>> = HashMap::new();
    let mut out = Vec::new();
    for i in score_order(dets) {
        let d = &dets[i];
        let slot = kept.entry((d.frame_id, d.class_id())).or_default();
        if slot.iter().all(|&k| bev_dist2(&dets[k].bbox, &d.bbox) >= d2) {
            slot.push(i);
            out.push(*d);
        }
    }
    out
}

/// Mean relative AP change from nice to bad weather over distance bins, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mrapd {
    pub value: f64,
    pub used_bins: Vec<usize>,
    /// Bins skipped because the nice-weather AP is zero or undefined (NaN),
    /// or the bad-weather AP is undefined.
    pub excluded_bins: Vec<usize>,
}

pub fn mrapd(ap_bad: &[f64], ap_nice: &[f64]) -> Result<Mrapd> {
    if ap_bad.len() != ap_nice.len() {
        return Err(Error::InvalidArgument(format!(
            "mRAPD needs equal-length AP lists, got {} and {}",
            ap_bad.len(),
            ap_nice.len()
        )));
    }
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    for (d, (&a, &b)) in ap_bad.iter().zip(ap_nice).enumerate() {
        if b > 0.0 && a.is_finite() && b.is_finite() {
            sum += (a - b) / b;
            used.push(d);
        } else {
            excluded.push(d);
        }
    }
    if used.is_empty() {
        return Err(Error::InvalidArgument("mRAPD: every bin has zero or undefined nice-weather AP".into()));
    }
    Ok(Mrapd {
        value: sum / used.len() as f64 * 100.0,
        used_bins: used,
        excluded_bins: excluded,
    })
}
