use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scene::{ClassId, ObstacleKind, Scene};
use super::{rng_for, stream};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSpec {
    pub intrinsics: CameraIntrinsics,
    /// Mounting point in the ego frame; the optical axis looks along ego +x.
    pub position: Vec3,
    /// Std of the per-pixel background noise.
    pub noise_std: f64,
    /// Std of the per-pixel object texture noise.
    pub texture_std: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            intrinsics: CameraIntrinsics {
                fx: 64.0,
                fy: 64.0,
                cx: 64.0,
                cy: 48.0,
                width: 128,
                height: 96,
            },
            position: [0.0, 0.0, 1.5],
            noise_std: 0.02,
            texture_std: 0.04,
        }
    }
}

impl CameraSpec {
    pub fn cam_from_ego(&self) -> Pose {
        Pose::forward_camera(self.position)
    }
}

/// Row-major `(height, width, 3)` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraImage {
    pub data: Vec<f32>,
    pub intrinsics: CameraIntrinsics,
    pub cam_from_ego: Pose,
}

impl CameraImage {
    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width() + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

const NEAR_PLANE: f64 = 0.5;

fn class_color(class: ClassId, rng: &mut impl Rng) -> [f64; 3] {
    match class {
        ClassId::Car => {
            const PALETTE: [[f64; 3]; 4] = [[0.80, 0.15, 0.10], [0.90, 0.50, 0.10], [0.85, 0.80, 0.15], [0.75, 0.25, 0.35]];
            PALETTE[rng.gen_range(0..PALETTE.len())]
        }
        ClassId::Pedestrian => {
            const PALETTE: [[f64; 3]; 2] = [[0.20, 0.25, 0.80], [0.50, 0.20, 0.70]];
            PALETTE[rng.gen_range(0..PALETTE.len())]
        }
    }
}

fn obstacle_color(kind: ObstacleKind) -> [f64; 3] {
    match kind {
        ObstacleKind::Wall => [0.50, 0.50, 0.50],
        ObstacleKind::Bush => [0.20, 0.50, 0.20],
        ObstacleKind::Container => [0.30, 0.40, 0.55],
        ObstacleKind::Pole => [0.25, 0.25, 0.25],
    }
}

fn background(intr: &CameraIntrinsics, row: usize) -> [f64; 3] {
    let v = row as f64 + 0.5;
    if v < intr.cy {
        let t = v / intr.cy.max(1.0);
        [0.55 + 0.15 * t, 0.70 + 0.10 * t, 0.90]
    } else {
        let t = (v - intr.cy) / (intr.height as f64 - intr.cy).max(1.0);
        [0.33 + 0.07 * t, 0.33 + 0.07 * t, 0.31 + 0.06 * t]
    }
}

/// Monotone-chain convex hull, counter-clockwise.
fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    })
}

/// Convex image hull of a box, or `None` when any corner is behind the near
/// plane or the hull misses the image.
pub(crate) fn image_hull(corners: &[Vec3; 8], intr: &CameraIntrinsics, cam_from_ego: &Pose) -> Option<Vec<[f64; 2]>> {
    let mut pts = Vec::with_capacity(8);
    for &c in corners {
        let p = cam_from_ego.apply(c);
        if p[2] < NEAR_PLANE {
            return None;
        }
        pts.push([intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy]);
    }
    let hull = convex_hull(pts);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &hull {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    if hi[0] < 0.0 || hi[1] < 0.0 || lo[0] >= intr.width as f64 || lo[1] >= intr.height as f64 {
        return None;
    }
    Some(hull)
}

struct Drawable {
    depth: f64,
    corners: [Vec3; 8],
    color: [f64; 3],
    rng: rand_chacha::ChaCha8Rng,
}

/// Painter's-algorithm render: background, then object hulls from far to near.
pub fn render_camera(scene: &Scene, cam: &CameraSpec) -> CameraImage {
    let intr = cam.intrinsics;
    let (w, h) = (intr.width, intr.height);
    let cam_from_ego = cam.cam_from_ego();
    let mut bg_rng = rng_for(scene.seed, stream::CAMERA);
    let mut img = vec![0.0f64; w * h * 3];
    for row in 0..h {
        let base = background(&intr, row);
        for col in 0..w {
            for ch in 0..3 {
                let n: f64 = bg_rng.sample(StandardNormal);
                img[(row * w + col) * 3 + ch] = base[ch] + cam.noise_std * n;
            }
        }
    }

    let mut drawables: Vec<Drawable> = Vec::new();
    for (i, b) in scene.boxes.iter().enumerate() {
        let mut rng = rng_for(scene.seed, stream::CAMERA_OBJECT + i as u64);
        drawables.push(Drawable {
            depth: cam_from_ego.apply(b.center)[2],
            corners: b.corners(),
            color: class_color(b.class_id, &mut rng),
            rng,
        });
    }
    for (j, o) in scene.obstacles.iter().enumerate() {
        drawables.push(Drawable {
            depth: cam_from_ego.apply(o.center)[2],
            corners: o.corners(),
            color: obstacle_color(o.kind),
            rng: rng_for(scene.seed, stream::CAMERA_OBJECT + 100_000 + j as u64),
        });
    }
    drawables.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    for d in &mut drawables {
        let Some(hull) = image_hull(&d.corners, &intr, &cam_from_ego) else {
            continue;
        };
        let rng = &mut d.rng;
        let shade = rng.gen_range(0.85..1.15);
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &hull {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let c0 = lo[0].floor().max(0.0) as usize;
        let c1 = (hi[0].ceil().max(0.0) as usize).min(w);
        let r0 = lo[1].floor().max(0.0) as usize;
        let r1 = (hi[1].ceil().max(0.0) as usize).min(h);
        for row in r0..r1 {
            for col in c0..c1 {
                if !inside_convex(&hull, [col as f64 + 0.5, row as f64 + 0.5]) {
                    continue;
                }
                for ch in 0..3 {
                    let n: f64 = rng.sample(StandardNormal);
                    img[(row * w + col) * 3 + ch] = d.color[ch] * shade + cam.texture_std * n;
                }
            }
        }
    }

    let contrast = scene.weather.normalized().camera_contrast;
    let data = img
        .into_iter()
        .map(|v| (0.5 + contrast * (v - 0.5)).clamp(0.0, 1.0) as f32)
        .collect();
    CameraImage {
        data,
        intrinsics: intr,
        cam_from_ego,
    }
}
