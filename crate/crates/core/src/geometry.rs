//! Rigid poses, pinhole projection and BEV grid indexing.
//!
//! Ego frame: x forward (driving direction), y left, z up. BEV grid rows
//! index x, columns index y. Camera frame: z along the optical axis, x right,
//! y down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Rigid transform `p -> R p + t` mapping a sensor frame into the ego frame
/// (or any frame pair, by composition).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: [[f64; 3]; 3],
    translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1 (within 1e-9).
    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self> {
        let r = rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("rotation is not orthonormal: {r:?}")));
                }
            }
        }
        if (det3(&r) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("rotation determinant is not +1".into()));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Rotation about +z by `yaw`, then translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Pose {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    /// Camera-from-ego pose for a forward-looking camera mounted at `position`
    /// (ego frame) with its optical axis along ego +x.
    pub fn forward_camera(position: Vec3) -> Self {
        let rotation = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let mut translation = [0.0; 3];
        for (i, t) in translation.iter_mut().enumerate() {
            *t = -(0..3).map(|k| rotation[i][k] * position[k]).sum::<f64>();
        }
        Pose {
            rotation,
            translation,
        }
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    #[inline]
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        let t = self.apply(other.translation);
        Pose {
            rotation,
            translation: t,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let mut rt = [[0.0; 3]; 3];
        for (i, row) in rt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[j][i];
            }
        }
        let t = self.translation;
        let mut translation = [0.0; 3];
        for (i, out) in translation.iter_mut().enumerate() {
            *out = -(0..3).map(|k| rt[i][k] * t[k]).sum::<f64>();
        }
        Pose {
            rotation: rt,
            translation,
        }
    }
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

pub fn transform_points(pose: &Pose, points: &[Vec3]) -> Vec<Vec3> {
    points.iter().map(|&p| pose.apply(p)).collect()
}

/// Pinhole intrinsics. Pixel coordinates are continuous: pixel `(row, col)`
/// covers `[col, col+1) x [row, row+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidArgument("principal point outside the image".into()));
        }
        Ok(())
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Camera-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        [(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Projects ego-frame points; points behind the camera or outside the image
/// are flagged invalid but kept so indices stay aligned with the input.
pub fn project_to_image(intr: &CameraIntrinsics, cam_from_ego: &Pose, points_ego: &[Vec3]) -> Vec<Projection> {
    points_ego
        .iter()
        .map(|&p| {
            let c = cam_from_ego.apply(p);
            let depth = c[2];
            if depth <= 0.0 {
                return Projection {
                    u: f64::NAN,
                    v: f64::NAN,
                    depth,
                    valid: false,
                };
            }
            let u = intr.fx * c[0] / depth + intr.cx;
            let v = intr.fy * c[1] / depth + intr.cy;
            Projection {
                u,
                v,
                depth,
                valid: intr.contains(u, v),
            }
        })
        .collect()
}

/// Metric BEV raster. A feature map at scale `scale` has
/// `(scale * nx, scale * ny)` cells of size `cell_size / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x_min: f64,
    pub y_min: f64,
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    /// Output feature-map scale of the branch built on this grid.
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BevCell {
    Inside { i: usize, j: usize },
    OutOfBounds,
}

impl BevCell {
    pub fn inside(self) -> Option<(usize, usize)> {
        match self {
            BevCell::Inside { i, j } => Some((i, j)),
            BevCell::OutOfBounds => None,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidArgument(format!("degenerate grid {self:?}")));
        }
        self.dims(self.scale).map(|_| ())
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.cell_size * self.nx as f64
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.cell_size * self.ny as f64
    }

    /// Raster dimensions `(rows, cols)` at `scale`; errors unless both are integral.
    pub fn dims(&self, scale: f64) -> Result<(usize, usize)> {
        let r = self.nx as f64 * scale;
        let c = self.ny as f64 * scale;
        if !(scale > 0.0) || (r - r.round()).abs() > 1e-9 || (c - c.round()).abs() > 1e-9 || r < 0.5 || c < 0.5 {
            return Err(Error::InvalidArgument(format!(
                "grid {}x{} is not divisible at scale {scale}",
                self.nx, self.ny
            )));
        }
        Ok((r.round() as usize, c.round() as usize))
    }

    pub fn out_dims(&self) -> (usize, usize) {
        self.dims(self.scale).expect("validated grid")
    }

    pub fn cell_at(&self, scale: f64) -> f64 {
        self.cell_size / scale
    }

    pub fn index(&self, p: Vec3, scale: f64) -> BevCell {
        let Ok((rows, cols)) = self.dims(scale) else {
            return BevCell::OutOfBounds;
        };
        let cs = self.cell_at(scale);
        let fi = ((p[0] - self.x_min) / cs).floor();
        let fj = ((p[1] - self.y_min) / cs).floor();
        if !(fi >= 0.0 && fj >= 0.0) || fi >= rows as f64 || fj >= cols as f64 {
            return BevCell::OutOfBounds;
        }
        BevCell::Inside {
            i: fi as usize,
            j: fj as usize,
        }
    }

    pub fn cell_center(&self, i: usize, j: usize, scale: f64) -> (f64, f64) {
        let cs = self.cell_at(scale);
        (self.x_min + (i as f64 + 0.5) * cs, self.y_min + (j as f64 + 0.5) * cs)
    }

    /// Same metric extent (within 1e-6 m).
    pub fn same_extent(&self, other: &GridSpec) -> bool {
        (self.x_min - other.x_min).abs() < 1e-6
            && (self.y_min - other.y_min).abs() < 1e-6
            && (self.x_max() - other.x_max()).abs() < 1e-6
            && (self.y_max() - other.y_max()).abs() < 1e-6
    }
}

pub fn bev_index(grid: &GridSpec, p: Vec3, scale: f64) -> BevCell {
    grid.index(p, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(cell: f64) -> GridSpec {
        GridSpec {
            x_min: 0.0,
            y_min: 0.0,
            cell_size: cell,
            nx: 40,
            ny: 20,
            scale: 0.5,
        }
    }

    #[test]
    fn transform_examples() {
        assert_eq!(transform_points(&Pose::identity(), &[[1.0, 2.0, 3.0]]), vec![[1.0, 2.0, 3.0]]);
        let t = Pose::from_yaw(0.0, [1.0, 0.0, 0.0]);
        assert_eq!(transform_points(&t, &[[0.0; 3]]), vec![[1.0, 0.0, 0.0]]);
        let r = Pose::from_yaw(std::f64::consts::FRAC_PI_2, [0.0; 3]);
        let p = r.apply([1.0, 0.0, 0.0]);
        assert!(p[0].abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn pose_rejects_reflection() {
        let refl = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(Pose::new(refl, [0.0; 3]).is_err());
        assert!(Pose::new(*Pose::forward_camera([0.0; 3]).rotation(), [0.0; 3]).is_ok());
    }

    #[test]
    fn projection_examples() {
        let intr = CameraIntrinsics {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            width: 200,
            height: 100,
        };
        let id = Pose::identity();
        let p = project_to_image(&intr, &id, &[[0.0, 0.0, 7.0], [0.0, 0.0, -1.0], [1.0, 0.0, 2.0]]);
        assert_eq!((p[0].u, p[0].v, p[0].depth, p[0].valid), (50.0, 50.0, 7.0, true));
        assert!(!p[1].valid);
        // independent scalar evaluation: 100 * 1 / 2 + 50
        let u = 100.0 * 1.0 / 2.0 + 50.0;
        assert_eq!((p[2].u, p[2].v, p[2].depth, p[2].valid), (u, 50.0, 2.0, true));
    }

    #[test]
    fn forward_camera_sees_ahead() {
        let intr = CameraIntrinsics {
            fx: 64.0,
            fy: 64.0,
            cx: 64.0,
            cy: 48.0,
            width: 128,
            height: 96,
        };
        let cam = Pose::forward_camera([0.0, 0.0, 1.5]);
        let p = project_to_image(&intr, &cam, &[[10.0, 0.0, 1.5], [10.0, 1.0, 0.0], [-5.0, 0.0, 0.0]]);
        assert!(p[0].valid && (p[0].u - 64.0).abs() < 1e-12 && (p[0].v - 48.0).abs() < 1e-12);
        // a point to the left projects left of centre and below the horizon
        assert!(p[1].u < 64.0 && p[1].v > 48.0);
        assert!(!p[2].valid);
    }

    #[test]
    fn bev_examples() {
        assert_eq!(grid(0.1).index([0.05, 0.05, 0.0], 1.0), BevCell::Inside { i: 0, j: 0 });
        assert_eq!(grid(0.1).index([-0.01, 0.05, 0.0], 1.0), BevCell::OutOfBounds);
        // floor(1.25 / 0.5) = 2, floor(0.75 / 0.5) = 1
        assert_eq!(grid(0.5).index([1.25, 0.75, 0.0], 1.0), BevCell::Inside { i: 2, j: 1 });
        assert_eq!(grid(0.5).index([20.0, 1.0, 0.0], 1.0), BevCell::OutOfBounds);
        assert!(grid(0.5).dims(0.33).is_err());
        assert_eq!(grid(0.5).dims(0.5).unwrap(), (20, 10));
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (-3.2f64..3.2, -2.0f64..2.0, -2.0f64..2.0, -50.0f64..50.0, -50.0f64..50.0, -5.0f64..5.0).prop_map(
            |(yaw, pitch, roll, x, y, z)| {
                let rz = Pose::from_yaw(yaw, [0.0; 3]);
                let (sp, cp) = pitch.sin_cos();
                let ry = Pose::new([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]], [0.0; 3]).unwrap();
                let (sr, cr) = roll.sin_cos();
                let rx = Pose::new([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]], [x, y, z]).unwrap();
                rx.compose(&ry).compose(&rz)
            },
        )
    }

    proptest! {
        #[test]
        fn inverse_roundtrip(pose in arb_pose(), pts in prop::collection::vec(prop::array::uniform3(-100.0f64..100.0), 1..20)) {
            let back = transform_points(&pose.inverse(), &transform_points(&pose, &pts));
            for (a, b) in back.iter().zip(&pts) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
            // composed rotation stays a proper rotation
            prop_assert!(Pose::new(*pose.compose(&pose).rotation(), [0.0; 3]).is_ok());
        }

        #[test]
        fn projection_is_ray_invariant(x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.5f64..50.0, k in 0.1f64..10.0) {
            let intr = CameraIntrinsics { fx: 80.0, fy: 70.0, cx: 40.0, cy: 30.0, width: 80, height: 60 };
            let a = project_to_image(&intr, &Pose::identity(), &[[x, y, z], [k * x, k * y, k * z]]);
            prop_assert!((a[0].u - a[1].u).abs() < 1e-9 && (a[0].v - a[1].v).abs() < 1e-9);
            prop_assert_eq!(a[0].valid, a[1].valid);
        }

        #[test]
        fn cell_center_roundtrip(i in 0usize..40, j in 0usize..20, x0 in -30.0f64..30.0, y0 in -30.0f64..30.0, cell in 0.05f64..2.0) {
            let g = GridSpec { x_min: x0, y_min: y0, cell_size: cell, nx: 40, ny: 20, scale: 0.5 };
            let (cx, cy) = g.cell_center(i, j, 1.0);
            prop_assert_eq!(g.index([cx, cy, 0.0], 1.0), BevCell::Inside { i, j });
            if i < 20 && j < 10 {
                let (cx, cy) = g.cell_center(i, j, 0.5);
                prop_assert_eq!(g.index([cx, cy, 0.0], 0.5), BevCell::Inside { i, j });
            }
        }
    }

    #[test]
    fn angle_normalization() {
        use std::f64::consts::PI;
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }
}
