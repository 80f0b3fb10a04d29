//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use bevfuse::eval::{Detection, GroundTruth};
use bevfuse::nn::Tensor;
use bevfuse::sim::{Box3D, ClassId};
use rand::Rng;

pub type T64 = Tensor<f64>;

/// Relative error with a floor on the denominator, so entries whose true
/// gradient is (numerically) zero are compared in absolute terms.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Step of the finite-difference stencil. Inputs are perturbed by up to `2 * FD_STEP`.
pub const FD_STEP: f64 = 1e-4;

/// Five-point central finite differences of `loss` w.r.t. every entry of
/// every input, compared with `analytic`. Returns the largest relative error.
///
/// The fourth-order stencil allows a step large enough that rounding in the
/// loss sum stays far below the tolerance.
pub fn fd_max_rel(inputs: &[T64], analytic: &[T64], loss: impl Fn(&[T64]) -> f64) -> f64 {
    const H: f64 = FD_STEP;
    assert_eq!(inputs.len(), analytic.len());
    let mut work: Vec<T64> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[t].shape(), "gradient shape of input {t}");
        for k in 0..inputs[t].len() {
            let x0 = inputs[t].data()[k];
            let mut at = |d: f64| {
                work[t].data_mut()[k] = x0 + d;
                loss(&work)
            };
            let numeric = (at(-2.0 * H) - 8.0 * at(-H) + 8.0 * at(H) - at(2.0 * H)) / (12.0 * H);
            work[t].data_mut()[k] = x0;
            worst = worst.max(rel_err(grad.data()[k], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut impl Rng, shape: [usize; 4], scale: f64) -> T64 {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale))
}

/// `sum(y * r)`: turns a tensor output into a scalar with a known upstream gradient `r`.
pub fn project(y: &T64, r: &T64) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Brute-force reference for center-distance AP in percent.
///
/// Detections are visited by (score desc, frame id, input index); each takes
/// the closest unclaimed same-frame ground truth within `thresh` (lowest
/// index on ties). The precision envelope is integrated at recalls
/// `0, 0.01, ..., 1` with exact rational comparisons.
pub fn brute_force_ap(dets: &[Detection], gts: &[GroundTruth], class: ClassId, thresh: f64, max_range: f64) -> Option<f64> {
    let in_range = |b: &Box3D| (b.center[0] * b.center[0] + b.center[1] * b.center[1]).sqrt() <= max_range;
    let gt_ok: Vec<bool> = gts.iter().map(|g| g.bbox.class_id == class && in_range(&g.bbox)).collect();
    let n_gt = gt_ok.iter().filter(|&&b| b).count();
    if n_gt == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].bbox.class_id == class && in_range(&dets[i].bbox))
        .collect();
    idx.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].frame_id.cmp(&dets[b].frame_id))
            .then(a.cmp(&b))
    });
    let mut claimed = vec![false; gts.len()];
    let mut tp = Vec::new();
    for &i in &idx {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if !gt_ok[g] || claimed[g] || gt.frame_id != dets[i].frame_id {
                continue;
            }
            let dx = gt.bbox.center[0] - dets[i].bbox.center[0];
            let dy = gt.bbox.center[1] - dets[i].bbox.center[1];
            let d = dx * dx + dy * dy;
            if d <= thresh * thresh {
                match best {
                    Some((bd, _)) if bd <= d => {}
                    _ => best = Some((d, g)),
                }
            }
        }
        if let Some((_, g)) = best {
            claimed[g] = true;
        }
        tp.push(best.is_some());
    }
    // (hits, rank) for every prefix
    let mut pts = Vec::new();
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        pts.push((hits, k + 1));
    }
    let mut sum = 0.0;
    for step in 0..=100usize {
        // best precision among prefixes whose recall hits/n_gt >= step/100
        let best = pts
            .iter()
            .filter(|&&(h, _)| h * 100 >= step * n_gt)
            .map(|&(h, r)| h as f64 / r as f64)
            .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))));
        sum += best.unwrap_or(0.0);
    }
    Some(100.0 * sum / 101.0)
}

/// Random detection/ground-truth instance over a few frames in a 40 m square.
pub fn random_instance(rng: &mut impl Rng, max_dets: usize, max_gts: usize) -> (Vec<Detection>, Vec<GroundTruth>) {
    let n_frames = rng.gen_range(1..=3u64);
    let bx = |rng: &mut dyn rand::RngCore, class: ClassId| Box3D {
        center: [rng.gen_range(0.0..40.0), rng.gen_range(-20.0..20.0), 0.8],
        size: [4.0, 1.8, 1.5],
        yaw: 0.0,
        class_id: class,
        speed: 0.0,
    };
    let class = |rng: &mut dyn rand::RngCore| if rng.gen_bool(0.8) { ClassId::Car } else { ClassId::Pedestrian };
    let n_gt = rng.gen_range(0..=max_gts);
    let gts: Vec<GroundTruth> = (0..n_gt)
        .map(|_| {
            let c = class(rng);
            GroundTruth {
                bbox: bx(rng, c),
                frame_id: rng.gen_range(0..n_frames),
                lidar_points: None,
            }
        })
        .collect();
    let n_det = rng.gen_range(0..=max_dets);
    let dets = (0..n_det)
        .map(|_| {
            // half the detections are jittered copies of some ground truth
            let (mut b, frame) = if !gts.is_empty() && rng.gen_bool(0.5) {
                let g = &gts[rng.gen_range(0..gts.len())];
                (g.bbox, g.frame_id)
            } else {
                let c = class(rng);
                (bx(rng, c), rng.gen_range(0..n_frames))
            };
            b.center[0] += rng.gen_range(-3.0..3.0);
            b.center[1] += rng.gen_range(-3.0..3.0);
            // coarse scores so ties occur
            let score = (rng.gen_range(0..20) as f64) / 20.0;
            Detection { bbox: b, score, frame_id: frame }
        })
        .collect();
    (dets, gts)
}

/// Reference mean pooling: group image pixels by BEV cell, then sum and
/// divide per cell.
pub fn two_pass_mean(features: &Tensor, pairs: &[(u32, u32)], bev: (usize, usize)) -> Tensor {
    let k = features.c();
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(cell, pix) in pairs {
        members.entry(cell as usize).or_default().push(pix as usize);
    }
    let mut out = Tensor::zeros([1, bev.0, bev.1, k]);
    for (cell, pix) in members {
        for ch in 0..k {
            let mut s = 0.0f32;
            for &p in &pix {
                s += features.data()[p * k + ch];
            }
            if pix.len() > 1 {
                s /= pix.len() as f32;
            }
            out.data_mut()[cell * k + ch] = s;
        }
    }
    out
}
