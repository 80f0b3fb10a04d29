use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scene::{ObstacleKind, Scene};
use super::{rng_for, stream};
use crate::geometry::Vec3;

/// Scanning lidar: elevation rings x azimuth steps, one return per ray.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarSpec {
    pub position: Vec3,
    pub azimuth_range_deg: [f64; 2],
    pub azimuth_res_deg: f64,
    pub elevation_range_deg: [f64; 2],
    pub elevation_res_deg: f64,
    pub max_range: f64,
    /// Std of the range noise in meters (nice weather); clipped at 3 sigma.
    pub range_noise_std: f64,
    /// Emit returns from the ground plane z = 0.
    pub ground_returns: bool,
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec {
            position: [0.0, 0.0, 1.8],
            azimuth_range_deg: [-80.0, 80.0],
            azimuth_res_deg: 0.4,
            elevation_range_deg: [-15.0, 2.0],
            elevation_res_deg: 0.5,
            max_range: 120.0,
            range_noise_std: 0.02,
            ground_returns: true,
        }
    }
}

impl LidarSpec {
    fn angles(range: [f64; 2], res: f64) -> Vec<f64> {
        if !(res > 0.0) || range[1] < range[0] {
            return Vec::new();
        }
        let n = ((range[1] - range[0]) / res + 1e-9).floor() as usize + 1;
        (0..n).map(|i| (range[0] + i as f64 * res).to_radians()).collect()
    }

    pub fn ray_count(&self) -> usize {
        Self::angles(self.azimuth_range_deg, self.azimuth_res_deg).len()
            * Self::angles(self.elevation_range_deg, self.elevation_res_deg).len()
    }

    /// Largest range perturbation a point can receive under `noise_factor`.
    pub fn max_noise(&self, noise_factor: f64) -> f64 {
        3.0 * self.range_noise_std * noise_factor
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// `box_ids[k]` is the index of the labelled box that produced point `k`, or -1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LidarScan {
    pub points: Vec<LidarPoint>,
    pub box_ids: Vec<i32>,
}

impl LidarScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Axis-aligned box in its own frame, with yaw-only ego rotation.
pub(crate) struct Target {
    center: Vec3,
    half: Vec3,
    cos: f64,
    sin: f64,
    pub(crate) reflectivity: f64,
    pub(crate) box_id: i32,
}

impl Target {
    pub(crate) fn new(center: Vec3, size: [f64; 3], yaw: f64, reflectivity: f64, box_id: i32) -> Self {
        Target {
            center,
            half: [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0],
            cos: yaw.cos(),
            sin: yaw.sin(),
            reflectivity,
            box_id,
        }
    }

    /// Entry distance of the ray `o + t d` (t > 0) into the box, if any.
    pub(crate) fn intersect(&self, o: Vec3, d: Vec3) -> Option<f64> {
        let rx = o[0] - self.center[0];
        let ry = o[1] - self.center[1];
        let lo = [self.cos * rx + self.sin * ry, -self.sin * rx + self.cos * ry, o[2] - self.center[2]];
        let ld = [self.cos * d[0] + self.sin * d[1], -self.sin * d[0] + self.cos * d[1], d[2]];
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if ld[k].abs() < 1e-12 {
                if lo[k].abs() > self.half[k] {
                    return None;
                }
                continue;
            }
            let a = (-self.half[k] - lo[k]) / ld[k];
            let b = (self.half[k] - lo[k]) / ld[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        if t1 < t0 || t1 <= 0.0 {
            return None;
        }
        Some(if t0 > 0.0 { t0 } else { t1 })
    }
}

fn obstacle_reflectivity(kind: ObstacleKind) -> f64 {
    match kind {
        ObstacleKind::Wall => 0.3,
        ObstacleKind::Bush => 0.2,
        ObstacleKind::Container => 0.5,
        ObstacleKind::Pole => 0.35,
    }
}

pub(crate) fn targets(scene: &Scene) -> Vec<Target> {
    use super::scene::ClassId;
    let mut out = Vec::with_capacity(scene.boxes.len() + scene.obstacles.len());
    for (i, b) in scene.boxes.iter().enumerate() {
        let refl = match b.class_id {
            ClassId::Car => 0.6,
            ClassId::Pedestrian => 0.4,
        };
        out.push(Target::new(b.center, b.size, b.yaw, refl, i as i32));
    }
    for o in &scene.obstacles {
        out.push(Target::new(o.center, o.size, o.yaw, obstacle_reflectivity(o.kind), -1));
    }
    out
}

const GROUND_REFLECTIVITY: f64 = 0.1;

/// Casts every ray against the scene's boxes, obstacles and (optionally) the
/// ground. The noise and dropout draws are taken once per ray whether or not
/// it hits, so a bad-weather scan is always a subset of the nice one.
pub fn render_lidar(scene: &Scene, sensor: &LidarSpec) -> LidarScan {
    let weather = scene.weather.normalized();
    let targets = targets(scene);
    let mut noise_rng = rng_for(scene.seed, stream::LIDAR);
    let mut drop_rng = rng_for(scene.seed, stream::LIDAR_DROPOUT);
    let azimuths = LidarSpec::angles(sensor.azimuth_range_deg, sensor.azimuth_res_deg);
    let elevations = LidarSpec::angles(sensor.elevation_range_deg, sensor.elevation_res_deg);
    let o = sensor.position;
    let sigma = sensor.range_noise_std * weather.lidar_noise_factor;
    let mut scan = LidarScan::default();

    for &el in &elevations {
        let (se, ce) = el.sin_cos();
        for &az in &azimuths {
            let n_range: f64 = noise_rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0);
            let n_int: f64 = noise_rng.sample(StandardNormal);
            let u_drop: f64 = drop_rng.gen();
            let (sa, ca) = az.sin_cos();
            let d = [ce * ca, ce * sa, se];

            let mut best: Option<(f64, f64, i32)> = None;
            for t in &targets {
                if let Some(dist) = t.intersect(o, d) {
                    if best.map_or(true, |b| dist < b.0) {
                        best = Some((dist, t.reflectivity, t.box_id));
                    }
                }
            }
            if sensor.ground_returns && d[2] < 0.0 && o[2] > 0.0 {
                let dist = -o[2] / d[2];
                if best.map_or(true, |b| dist < b.0) {
                    best = Some((dist, GROUND_REFLECTIVITY, -1));
                }
            }
            let Some((dist, refl, box_id)) = best else {
                continue;
            };
            if dist > sensor.max_range {
                continue;
            }
            if u_drop < weather.dropout_probability(dist) {
                continue;
            }
            let r = dist + sigma * n_range;
            scan.points.push(LidarPoint {
                x: (o[0] + d[0] * r) as f32,
                y: (o[1] + d[1] * r) as f32,
                z: (o[2] + d[2] * r) as f32,
                intensity: (refl + 0.05 * n_int).clamp(0.0, 1.0) as f32,
            });
            scan.box_ids.push(box_id);
        }
    }
    scan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{Box3D, ClassId};
    use crate::sim::{WeatherCondition, WeatherKind};

    fn car_at(x: f64) -> Box3D {
        Box3D {
            center: [x, 0.0, 0.75],
            size: [4.5, 1.8, 1.5],
            yaw: 0.0,
            class_id: ClassId::Car,
            speed: 0.0,
        }
    }

    fn no_ground() -> LidarSpec {
        LidarSpec {
            ground_returns: false,
            ..LidarSpec::default()
        }
    }

    #[test]
    fn empty_scene_without_ground_is_empty() {
        assert!(render_lidar(&Scene::empty(3), &no_ground()).is_empty());
        assert!(!render_lidar(&Scene::empty(3), &LidarSpec::default()).is_empty());
    }

    #[test]
    fn slab_hits_front_face() {
        let t = Target::new([10.0, 0.0, 1.0], [2.0, 2.0, 2.0], 0.0, 0.5, 0);
        let d = t.intersect([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]).unwrap();
        assert!((d - 9.0).abs() < 1e-12);
        assert!(t.intersect([0.0, 0.0, 1.0], [-1.0, 0.0, 0.0]).is_none());
        assert!(t.intersect([0.0, 5.0, 1.0], [1.0, 0.0, 0.0]).is_none());
        // rotated 90 degrees: the 2 m extent is unchanged for a cube
        let r = Target::new([10.0, 0.0, 1.0], [4.0, 2.0, 2.0], std::f64::consts::FRAC_PI_2, 0.5, 0);
        assert!((r.intersect([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]).unwrap() - 9.0).abs() < 1e-9);
    }

    #[test]
    fn nearer_box_occludes() {
        let mut s = Scene::empty(1);
        s.boxes = vec![car_at(20.0), car_at(30.0)];
        let scan = render_lidar(&s, &no_ground());
        let hidden = scan.box_ids.iter().filter(|&&i| i == 1).count();
        let front = scan.box_ids.iter().filter(|&&i| i == 0).count();
        assert!(front > 50);
        // only rays passing over the front car's roof reach the far one
        assert!(hidden < front / 4, "front {front}, hidden {hidden}");
    }

    #[test]
    fn points_lie_within_noise_inflated_box() {
        let mut s = Scene::empty(9);
        s.boxes = vec![car_at(15.0), Box3D { yaw: 0.6, center: [25.0, 6.0, 0.8], ..car_at(0.0) }];
        s.weather = WeatherCondition::bad_default();
        let spec = LidarSpec::default();
        let scan = render_lidar(&s, &spec);
        let margin = spec.max_noise(s.weather.lidar_noise_factor) + 1e-4;
        for (p, &id) in scan.points.iter().zip(&scan.box_ids) {
            if id >= 0 {
                let q = [p.x as f64, p.y as f64, p.z as f64];
                assert!(s.boxes[id as usize].contains(q, margin));
            }
            assert!((0.0..=1.0).contains(&p.intensity));
        }
    }

    #[test]
    fn bad_weather_subset() {
        let mut s = Scene::empty(4);
        s.boxes = vec![car_at(12.0), car_at(40.0)];
        let nice = render_lidar(&s, &LidarSpec::default());
        s.weather = WeatherCondition::bad_default();
        let bad = render_lidar(&s, &LidarSpec::default());
        assert!(bad.len() < nice.len());
        // with the same kind but nice normalization, output is identical
        s.weather.kind = WeatherKind::Nice;
        assert_eq!(render_lidar(&s, &LidarSpec::default()), nice);
    }

    #[test]
    fn range_decay_monte_carlo() {
        let spec = no_ground();
        let mut near = 0usize;
        let mut far = 0usize;
        for seed in 0..50 {
            let mut s = Scene::empty(seed);
            s.boxes = vec![car_at(20.0)];
            near += render_lidar(&s, &spec).len();
            s.boxes = vec![car_at(100.0)];
            far += render_lidar(&s, &spec).len();
        }
        assert!(far < near, "near {near}, far {far}");
        assert!(far > 0);
    }
}
