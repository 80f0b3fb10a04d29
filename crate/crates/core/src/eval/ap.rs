use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{bev_dist2, score_order, Detection, EvalConfig, GroundTruth};
use crate::error::{Error, Result};
use crate::sim::ClassId;

/// Greedy assignment of one class's detections to ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Detections taking part (right class, within range), in score order.
    pub order: Vec<usize>,
    /// Matched ground-truth index per entry of `order`.
    pub matched: Vec<Option<usize>>,
    /// Ground-truth boxes taking part.
    pub gts: Vec<usize>,
}

/// Walks detections by descending score; each one takes the nearest
/// still-unmatched ground truth of its frame and class within `thresh`
/// (BEV center distance), ties going to the lower index.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], class: ClassId, thresh: f64, max_range: f64) -> Matching {
    let gt_ids: Vec<usize> = (0..gts.len())
        .filter(|&g| gts[g].bbox.class_id == class && gts[g].bbox.range() <= max_range)
        .collect();
    let mut by_frame: HashMap<u64, Vec<usize>> = HashMap::new();
    for &g in &gt_ids {
        by_frame.entry(gts[g].frame_id).or_default().push(g);
    }
    let mut taken = vec![false; gts.len()];
    let t2 = thresh * thresh;
    let order: Vec<usize> = score_order(dets)
        .into_iter()
        .filter(|&i| dets[i].class_id() == class && dets[i].bbox.range() <= max_range)
        .collect();
    let matched = order
        .iter()
        .map(|&i| {
            let cands = by_frame.get(&dets[i].frame_id)?;
            let mut best: Option<(f64, usize)> = None;
            for &g in cands {
                if taken[g] {
                    continue;
                }
                let d = bev_dist2(&dets[i].bbox, &gts[g].bbox);
                if d <= t2 && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, g));
                }
            }
            let (_, g) = best?;
            taken[g] = true;
            Some(g)
        })
        .collect();
    Matching {
        order,
        matched,
        gts: gt_ids,
    }
}

/// 101-point interpolated AP in percent from true-positive flags in score
/// order; `None` when there is no ground truth.
pub fn ap_from_flags(tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / n_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 0..=100 {
        let r = step as f64 / 100.0;
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    Some(100.0 * sum / 101.0)
}

pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], class: ClassId, thresh: f64, max_range: f64) -> Option<f64> {
    let m = match_detections(dets, gts, class, thresh, max_range);
    let tp: Vec<bool> = m.matched.iter().map(Option::is_some).collect();
    ap_from_flags(&tp, m.gts.len())
}

/// Arithmetic mean of per-threshold APs.
pub fn map_from_aps(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::InvalidArgument("mAP over an empty threshold list".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeAp {
    pub lo: f64,
    pub hi: f64,
    pub n_gt: usize,
    pub ap: Option<f64>,
}

fn bin_of(r: f64, edges: &[f64]) -> Option<usize> {
    let last = edges.len() - 1;
    (0..last).find(|&b| r >= edges[b] && (r < edges[b + 1] || (b + 1 == last && r <= edges[last])))
}

/// AP per range bin. Matching runs once over the full range; ground truth is
/// binned by its own range, a true positive by its matched ground truth and a
/// false positive by its own range.
pub fn range_binned_ap(dets: &[Detection], gts: &[GroundTruth], class: ClassId, thresh: f64, max_range: f64, edges: &[f64]) -> Vec<RangeAp> {
    let m = match_detections(dets, gts, class, thresh, max_range);
    let nb = edges.len().saturating_sub(1);
    let mut n_gt = vec![0usize; nb];
    for &g in &m.gts {
        if let Some(b) = bin_of(gts[g].bbox.range(), edges) {
            n_gt[b] += 1;
        }
    }
    let mut flags: Vec<Vec<bool>> = vec![Vec::new(); nb];
    for (&i, mg) in m.order.iter().zip(&m.matched) {
        let r = match mg {
            Some(g) => gts[*g].bbox.range(),
            None => dets[i].bbox.range(),
        };
        if let Some(b) = bin_of(r, edges) {
            flags[b].push(mg.is_some());
        }
    }
    (0..nb)
        .map(|b| RangeAp {
            lo: edges[b],
            hi: edges[b + 1],
            n_gt: n_gt[b],
            ap: ap_from_flags(&flags[b], n_gt[b]),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallBin {
    pub lo: usize,
    /// Exclusive upper edge; `None` for the open last bin.
    pub hi: Option<usize>,
    pub n_gt: usize,
    pub n_detected: usize,
    pub recall: Option<f64>,
}

/// Recall per lidar point-count bin, counting detections with
/// `score >= min_score` only. `lower_edges` must start at 0.
pub fn recall_vs_point_count(
    dets: &[Detection],
    gts: &[GroundTruth],
    class: ClassId,
    thresh: f64,
    max_range: f64,
    min_score: f64,
    lower_edges: &[usize],
) -> Result<Vec<RecallBin>> {
    if lower_edges.first() != Some(&0) || lower_edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!("point bins {lower_edges:?} must start at 0 and increase")));
    }
    let kept: Vec<Detection> = dets.iter().filter(|d| d.score >= min_score).copied().collect();
    let m = match_detections(&kept, gts, class, thresh, max_range);
    let mut hit = vec![false; gts.len()];
    for g in m.matched.iter().flatten() {
        hit[*g] = true;
    }
    let mut bins: Vec<RecallBin> = lower_edges
        .iter()
        .enumerate()
        .map(|(b, &lo)| RecallBin {
            lo,
            hi: lower_edges.get(b + 1).copied(),
            n_gt: 0,
            n_detected: 0,
            recall: None,
        })
        .collect();
    for &g in &m.gts {
        let n = gts[g]
            .lidar_points
            .ok_or_else(|| Error::MissingAssociations(format!("ground truth {g} in frame {} has no point count", gts[g].frame_id)))?;
        let b = lower_edges.iter().rposition(|&lo| n >= lo).expect("first edge is 0");
        bins[b].n_gt += 1;
        bins[b].n_detected += hit[g] as usize;
    }
    for b in &mut bins {
        if b.n_gt > 0 {
            b.recall = Some(b.n_detected as f64 / b.n_gt as f64);
        }
    }
    Ok(bins)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: ClassId,
    pub n_gt: usize,
    pub n_det: usize,
    pub ap: Vec<ThresholdAp>,
    /// `None` when the class has no ground truth in range.
    pub map: Option<f64>,
    pub range_ap: Vec<RangeAp>,
    /// `None` when some ground truth lacks a point count.
    pub recall_vs_points: Option<Vec<RecallBin>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_frames: usize,
    pub classes: Vec<ClassReport>,
}

impl EvalReport {
    pub fn class(&self, class: ClassId) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == class)
    }

    /// mAP of `class`, or 0 if it is undefined.
    pub fn map_of(&self, class: ClassId) -> f64 {
        self.class(class).and_then(|c| c.map).unwrap_or(0.0)
    }
}

pub fn map_summary(dets: &[Detection], gts: &[GroundTruth], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut frames: Vec<u64> = gts.iter().map(|g| g.frame_id).collect();
    frames.sort_unstable();
    frames.dedup();
    let mut classes = Vec::new();
    for &class in &cfg.classes {
        let ap: Vec<ThresholdAp> = cfg
            .thresholds
            .iter()
            .map(|&t| ThresholdAp {
                threshold: t,
                ap: average_precision(dets, gts, class, t, cfg.max_range),
            })
            .collect();
        let map = ap.iter().map(|a| a.ap).collect::<Option<Vec<f64>>>().map(|v| map_from_aps(&v)).transpose()?;
        let recall = match recall_vs_point_count(dets, gts, class, cfg.ablation_threshold, cfg.max_range, cfg.recall_score, &cfg.point_bins) {
            Ok(r) => Some(r),
            Err(Error::MissingAssociations(_)) => None,
            Err(e) => return Err(e),
        };
        classes.push(ClassReport {
            class,
            n_gt: gts.iter().filter(|g| g.bbox.class_id == class && g.bbox.range() <= cfg.max_range).count(),
            n_det: dets.iter().filter(|d| d.class_id() == class && d.bbox.range() <= cfg.max_range).count(),
            ap,
            map,
            range_ap: range_binned_ap(dets, gts, class, cfg.ablation_threshold, cfg.max_range, &cfg.range_bins),
            recall_vs_points: recall,
        });
    }
    Ok(EvalReport {
        label: String::new(),
        config_hash: String::new(),
        seed: 0,
        n_frames: frames.len(),
        classes,
    })
}
