use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::nn::Tensor;
use crate::sim::LidarScan;

/// Uniform height bins over `[z_min, z_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccupancyConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub bins: usize,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        OccupancyConfig {
            z_min: -0.5,
            z_max: 3.5,
            bins: 8,
        }
    }
}

impl OccupancyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 || !(self.z_max > self.z_min) {
            return Err(Error::config("model.occupancy", "need at least one bin over a non-empty z range"));
        }
        Ok(())
    }

    pub fn bin(&self, z: f64) -> Option<usize> {
        if !(z >= self.z_min && z < self.z_max) {
            return None;
        }
        let dz = (self.z_max - self.z_min) / self.bins as f64;
        Some((((z - self.z_min) / dz) as usize).min(self.bins - 1))
    }
}

/// Binary `(1, nx, ny, bins)` occupancy at the grid's full resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub tensor: Tensor,
    pub grid: GridSpec,
    pub z: OccupancyConfig,
}

pub fn encode_occupancy(scan: &LidarScan, grid: &GridSpec, z: &OccupancyConfig) -> OccupancyGrid {
    let mut tensor = Tensor::zeros([1, grid.nx, grid.ny, z.bins.max(1)]);
    for p in &scan.points {
        let Some((i, j)) = grid.index([p.x as f64, p.y as f64, p.z as f64], 1.0).inside() else {
            continue;
        };
        if let Some(b) = z.bin(p.z as f64) {
            tensor.set(0, i, j, b, 1.0);
        }
    }
    OccupancyGrid {
        tensor,
        grid: *grid,
        z: *z,
    }
}
