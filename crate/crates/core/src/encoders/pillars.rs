use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, Modality};
use crate::error::Result;
use crate::geometry::GridSpec;
use crate::nn::{ConvCache, Conv, Grads, Group, ParamStore, Tensor};
use crate::sim::RadarScan;

pub const PILLAR_FEATURES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PillarConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for PillarConfig {
    fn default() -> Self {
        PillarConfig { hidden: 16, out: 16 }
    }
}

/// Radar points bucketed into BEV cells. Per-point features are
/// `(x, y, z, v, rcs, dx, dy)` with `(dx, dy)` the offset to the cell center
/// in cell units; the other values are divided by fixed scales.
#[derive(Clone, Debug, PartialEq)]
pub struct PillarGrid {
    pub grid: GridSpec,
    pub features: Vec<[f32; PILLAR_FEATURES]>,
    pub cells: Vec<(usize, usize)>,
}

impl PillarGrid {
    pub fn build(scan: &RadarScan, grid: &GridSpec) -> Self {
        let mut out = PillarGrid {
            grid: *grid,
            features: Vec::new(),
            cells: Vec::new(),
        };
        for p in &scan.points {
            let pos = [p.x as f64, p.y as f64, p.z as f64];
            let Some((i, j)) = grid.index(pos, 1.0).inside() else {
                continue;
            };
            let (cx, cy) = grid.cell_center(i, j, 1.0);
            out.features.push([
                (pos[0] / 50.0) as f32,
                (pos[1] / 50.0) as f32,
                (pos[2] / 2.0) as f32,
                p.v / 10.0,
                p.rcs / 10.0,
                ((pos[0] - cx) / grid.cell_size) as f32,
                ((pos[1] - cy) / grid.cell_size) as f32,
            ]);
            out.cells.push((i, j));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Shared two-layer perceptron applied per point, then a per-cell max.
#[derive(Clone, Debug)]
pub struct PillarNet {
    l1: Conv,
    l2: Conv,
}

pub struct PillarCache {
    c1: Option<ConvCache<f32>>,
    c2: Option<ConvCache<f32>>,
    /// For each `(cell, channel)` of the output, the winning point or `u32::MAX`.
    argmax: Vec<u32>,
    n_points: usize,
}

impl PillarNet {
    pub fn new(store: &mut ParamStore, prefix: &str, group: Group, cfg: &PillarConfig, rng: &mut impl Rng) -> Self {
        PillarNet {
            l1: Conv::new(store, &format!("{prefix}.mlp0"), group, 1, PILLAR_FEATURES, cfg.hidden, 1, true, rng),
            l2: Conv::new(store, &format!("{prefix}.mlp1"), group, 1, cfg.hidden, cfg.out, 1, true, rng),
        }
    }

    pub fn out_channels(&self, ps: &ParamStore) -> usize {
        self.l2.out_channels(ps)
    }

    /// Returns the `(1, nx, ny, out)` pooled map at the grid's full resolution.
    pub fn forward(&self, ps: &ParamStore, pillars: &PillarGrid) -> Result<(Tensor, PillarCache)> {
        let c = self.out_channels(ps);
        let (nx, ny) = (pillars.grid.nx, pillars.grid.ny);
        let mut out = Tensor::zeros([1, nx, ny, c]);
        let mut argmax = vec![u32::MAX; nx * ny * c];
        if pillars.is_empty() {
            return Ok((out, PillarCache { c1: None, c2: None, argmax, n_points: 0 }));
        }
        let flat: Vec<f32> = pillars.features.iter().flatten().copied().collect();
        let x = Tensor::from_vec([1, pillars.len(), 1, PILLAR_FEATURES], flat)?;
        let (h1, c1) = self.l1.forward(ps, &x)?;
        let (h2, c2) = self.l2.forward(ps, &h1)?;
        // first point wins ties, so the result does not depend on float quirks
        for (k, &(i, j)) in pillars.cells.iter().enumerate() {
            let cell = i * ny + j;
            let feats = h2.pixel(0, k, 0);
            let dst = out.pixel_mut(0, i, j);
            for ch in 0..c {
                let slot = cell * c + ch;
                if argmax[slot] == u32::MAX || feats[ch] > dst[ch] {
                    dst[ch] = feats[ch];
                    argmax[slot] = k as u32;
                }
            }
        }
        Ok((
            out,
            PillarCache {
                c1: Some(c1),
                c2: Some(c2),
                argmax,
                n_points: pillars.len(),
            },
        ))
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &PillarCache, dy: &Tensor) -> Result<()> {
        let (Some(c1), Some(c2)) = (&cache.c1, &cache.c2) else {
            return Ok(());
        };
        let c = dy.c();
        let mut dh2 = Tensor::zeros([1, cache.n_points, 1, c]);
        for (slot, &k) in cache.argmax.iter().enumerate() {
            if k != u32::MAX {
                let v = dh2.get(0, k as usize, 0, slot % c) + dy.data()[slot];
                dh2.set(0, k as usize, 0, slot % c, v);
            }
        }
        let dh1 = self.l2.backward(ps, grads, c2, &dh2, true)?.expect("requested");
        self.l1.backward(ps, grads, c1, &dh1, false)?;
        Ok(())
    }
}

/// Encodes a radar scan into a pooled pillar feature map at the grid's full
/// resolution (`scale = 1`).
pub fn encode_pillars(scan: &RadarScan, grid: &GridSpec, net: &PillarNet, ps: &ParamStore) -> Result<(FeatureMap, PillarGrid, PillarCache)> {
    let pillars = PillarGrid::build(scan, grid);
    let (t, cache) = net.forward(ps, &pillars)?;
    let full = GridSpec { scale: 1.0, ..*grid };
    Ok((FeatureMap::bev(t, full, Modality::R)?, pillars, cache))
}
