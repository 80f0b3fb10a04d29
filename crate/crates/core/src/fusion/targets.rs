use serde::{Deserialize, Serialize};

use super::head::{DenseOutput, REG_CHANNELS};
use crate::error::Result;
use crate::geometry::GridSpec;
use crate::nn::{focal_loss, l2_loss, Tensor};
use crate::sim::{Box3D, ClassId};

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps {
    pub cls: Tensor,
    pub reg: Tensor,
    pub mask: Tensor,
}

impl TargetMaps {
    pub fn positives(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// Regression target of box `b` seen from a cell centered at `(cx, cy)`.
pub(crate) fn encode_box(b: &Box3D, cx: f64, cy: f64, cell: f64) -> [f32; REG_CHANNELS] {
    let (pl, pw) = b.class_id.prior_size();
    [
        ((b.center[0] - cx) / cell) as f32,
        ((b.center[1] - cy) / cell) as f32,
        (b.size[0] / pl).ln() as f32,
        (b.size[1] / pw).ln() as f32,
        b.yaw.sin() as f32,
        b.yaw.cos() as f32,
    ]
}

/// Cells whose centers fall inside a box footprint are positive for its class,
/// the nearest box center winning where footprints overlap. A box too small
/// to contain any cell center claims the cell holding its center, if free.
pub fn assign_targets(gt: &[Box3D], grid: &GridSpec) -> Result<TargetMaps> {
    let (rows, cols) = grid.dims(grid.scale)?;
    let n_cls = ClassId::ALL.len();
    let cell = grid.cell_at(grid.scale);
    // per cell: (squared distance to the owning box center, box index)
    let mut owner: Vec<Option<(f64, usize)>> = vec![None; rows * cols];
    let mut claimed = vec![false; gt.len()];
    for (b, bx) in gt.iter().enumerate() {
        let r = bx.footprint_radius();
        let i0 = ((bx.center[0] - r - grid.x_min) / cell).floor().max(0.0) as usize;
        let j0 = ((bx.center[1] - r - grid.y_min) / cell).floor().max(0.0) as usize;
        let i1 = (((bx.center[0] + r - grid.x_min) / cell).ceil().max(0.0) as usize).min(rows);
        let j1 = (((bx.center[1] + r - grid.y_min) / cell).ceil().max(0.0) as usize).min(cols);
        for i in i0..i1 {
            for j in j0..j1 {
                let (cx, cy) = grid.cell_center(i, j, grid.scale);
                if !bx.contains([cx, cy, bx.center[2]], 0.0) {
                    continue;
                }
                claimed[b] = true;
                let d = (cx - bx.center[0]).powi(2) + (cy - bx.center[1]).powi(2);
                let slot = &mut owner[i * cols + j];
                if slot.map_or(true, |(bd, _)| d < bd) {
                    *slot = Some((d, b));
                }
            }
        }
    }
    for (b, bx) in gt.iter().enumerate() {
        if claimed[b] {
            continue;
        }
        if let Some((i, j)) = grid.index(bx.center, grid.scale).inside() {
            let slot = &mut owner[i * cols + j];
            if slot.is_none() {
                let (cx, cy) = grid.cell_center(i, j, grid.scale);
                *slot = Some(((cx - bx.center[0]).powi(2) + (cy - bx.center[1]).powi(2), b));
            }
        }
    }
    let mut cls = Tensor::zeros([1, rows, cols, n_cls]);
    let mut reg = Tensor::zeros([1, rows, cols, REG_CHANNELS]);
    let mut mask = Tensor::zeros([1, rows, cols, 1]);
    for i in 0..rows {
        for j in 0..cols {
            let Some((_, b)) = owner[i * cols + j] else { continue };
            let bx = &gt[b];
            cls.set(0, i, j, bx.class_id.index(), 1.0);
            mask.set(0, i, j, 0, 1.0);
            let (cx, cy) = grid.cell_center(i, j, grid.scale);
            reg.pixel_mut(0, i, j).copy_from_slice(&encode_box(bx, cx, cy, cell));
        }
    }
    Ok(TargetMaps { cls, reg, mask })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_reg: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cls: 1.0,
            w_reg: 2.0,
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_reg: f64,
    pub total: f64,
    pub w_cls: f64,
    pub w_reg: f64,
}

/// `L = w_cls * L_cls + w_reg * L_reg`, with focal `L_cls` over every cell
/// normalized by the positive count and masked L2 `L_reg` over positive cells.
/// Returns the breakdown and the gradient w.r.t. the concatenated
/// `(cls_logits, reg)` head output.
pub fn total_loss(dense: &DenseOutput, targets: &TargetMaps, w: &LossWeights) -> Result<(LossBreakdown, Tensor)> {
    let norm = targets.positives().max(1) as f64;
    let (l_cls, mut g_cls) = focal_loss(&dense.cls_logits, &targets.cls, w.gamma, w.alpha, norm)?;
    let (l_reg, mut g_reg) = l2_loss(&dense.reg, &targets.reg, &targets.mask)?;
    let (l_cls, l_reg) = (l_cls as f64, l_reg as f64);
    g_cls.scale(w.w_cls as f32);
    g_reg.scale(w.w_reg as f32);
    let grad = DenseOutput {
        cls_logits: g_cls,
        reg: g_reg,
    }
    .concat()?;
    Ok((
        LossBreakdown {
            l_cls,
            l_reg,
            total: w.w_cls * l_cls + w.w_reg * l_reg,
            w_cls: w.w_cls,
            w_reg: w.w_reg,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::decode_dense;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn grid() -> GridSpec {
        GridSpec {
            x_min: 0.0,
            y_min: -10.0,
            cell_size: 0.25,
            nx: 80,
            ny: 80,
            scale: 0.5,
        }
    }

    fn car(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> Box3D {
        Box3D {
            center: [x, y, 0.75],
            size: [l, w, 1.5],
            yaw,
            class_id: ClassId::Car,
            speed: 0.0,
        }
    }

    #[test]
    fn no_boxes_all_negative() {
        let t = assign_targets(&[], &grid()).unwrap();
        assert_eq!(t.positives(), 0);
        assert_eq!(t.cls.sum(), 0.0);
    }

    #[test]
    fn axis_aligned_box_matches_rasterization() {
        // 0.5 m output cells; a 4 x 2 m box at an off-grid position
        let b = car(10.1, 0.3, 4.0, 2.0, 0.0);
        let t = assign_targets(&[b], &grid()).unwrap();
        let mut count = 0;
        for i in 0..40 {
            for j in 0..40 {
                let (cx, cy) = (0.25 + 0.5 * i as f64, -10.0 + 0.25 + 0.5 * j as f64);
                if (cx - 10.1).abs() <= 2.0 && (cy - 0.3).abs() <= 1.0 {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 32);
        assert_eq!(t.positives(), count);
    }

    #[test]
    fn center_cell_target() {
        let (cx, cy) = grid().cell_center(20, 20, 0.5);
        let b = car(cx, cy, 4.6, 1.9, 0.4);
        let t = assign_targets(&[b], &grid()).unwrap();
        let r = t.reg.pixel(0, 20, 20);
        let expect = [0.0, 0.0, (4.6f64 / 4.4).ln() as f32, (1.9f64 / 1.85).ln() as f32, 0.4f64.sin() as f32, 0.4f64.cos() as f32];
        assert_eq!(r, &expect);
    }

    #[test]
    fn tiny_box_claims_its_center_cell() {
        let p = Box3D {
            center: [10.05, 0.05, 0.85],
            size: [0.3, 0.3, 1.7],
            yaw: 0.0,
            class_id: ClassId::Pedestrian,
            speed: 0.0,
        };
        let t = assign_targets(&[p], &grid()).unwrap();
        assert_eq!(t.positives(), 1);
        let (i, j) = grid().index(p.center, 0.5).inside().unwrap();
        assert_eq!(t.cls.get(0, i, j, ClassId::Pedestrian.index()), 1.0);
    }

    #[test]
    fn overlap_goes_to_nearest_center() {
        let a = car(10.0, 0.0, 4.0, 2.0, 0.0);
        let b = car(12.6, 0.0, 4.0, 2.0, 0.0);
        let t = assign_targets(&[a, b], &grid()).unwrap();
        // cell center x = 11.25 lies in both; 1.25 from a, 1.35 from b
        let (i, j) = grid().index([11.25, 0.25, 0.0], 0.5).inside().unwrap();
        let dx = t.reg.get(0, i, j, 0) as f64 * 0.5;
        assert!((dx - (10.0 - 11.25)).abs() < 1e-6);
    }

    #[test]
    fn loss_identity_and_degenerate_weights() {
        let b = car(10.1, 0.3, 4.0, 2.0, 0.2);
        let t = assign_targets(&[b], &grid()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let dense = DenseOutput {
            cls_logits: Tensor::from_fn([1, 40, 40, 2], |_, _, _, _| rng.gen_range(-3.0..3.0)),
            reg: Tensor::from_fn([1, 40, 40, 6], |_, _, _, _| rng.gen_range(-1.0..1.0)),
        };
        let w = LossWeights::default();
        let (l, g) = total_loss(&dense, &t, &w).unwrap();
        assert_eq!(l.total, w.w_cls * l.l_cls + w.w_reg * l.l_reg);
        assert_eq!(g.shape(), [1, 40, 40, 8]);
        let w0 = LossWeights { w_reg: 0.0, ..w };
        let (l0, _) = total_loss(&dense, &t, &w0).unwrap();
        assert_eq!(l0.total, w0.w_cls * l0.l_cls);
    }

    #[test]
    fn perfect_prediction_has_tiny_loss() {
        let b = car(10.1, 0.3, 4.0, 2.0, 0.2);
        let t = assign_targets(&[b], &grid()).unwrap();
        let dense = DenseOutput {
            cls_logits: t.cls.map(|v| if v > 0.5 { 30.0 } else { -30.0 }),
            reg: t.reg.clone(),
        };
        let (l, _) = total_loss(&dense, &t, &LossWeights::default()).unwrap();
        assert_eq!(l.l_reg, 0.0);
        assert!(l.l_cls < 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn encode_decode_round_trip(x in 3.0f64..17.0, y in -7.0f64..7.0, l in 3.5f64..5.0, w in 1.6f64..2.1, yaw in -3.1f64..3.1) {
            let b = car(x, y, l, w, yaw);
            let g = grid();
            let t = assign_targets(&[b], &g).unwrap();
            prop_assert!(t.positives() > 0);
            let dense = DenseOutput {
                cls_logits: t.cls.map(|v| if v > 0.5 { 50.0 } else { -50.0 }),
                reg: t.reg.clone(),
            };
            let dets = decode_dense(&dense, &g, 0, 0.5).unwrap();
            prop_assert_eq!(dets.len(), t.positives());
            let half_diag = 0.5 * 0.5 * 2f64.sqrt();
            for d in dets {
                let dist = (d.bbox.center[0] - x).hypot(d.bbox.center[1] - y);
                prop_assert!(dist <= half_diag);
                prop_assert!((d.bbox.size[0] / l - 1.0).abs() < 1e-5);
                prop_assert!((d.bbox.size[1] / w - 1.0).abs() < 1e-5);
            }
        }
    }
}
