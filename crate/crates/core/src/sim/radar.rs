use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::lidar::targets;
use super::scene::{ClassId, ObstacleKind, Scene};
use super::{rng_for, stream};
use crate::geometry::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarSpec {
    pub position: Vec3,
    pub fov_deg: f64,
    pub max_range: f64,
    pub mean_points_car: f64,
    pub mean_points_pedestrian: f64,
    pub mean_points_obstacle: f64,
    /// Range noise std (m), clipped at 3 sigma.
    pub range_noise_std: f64,
    /// Azimuth noise std (deg), clipped at 3 sigma.
    pub azimuth_noise_deg: f64,
    /// Elevation (z) noise std (m), clipped at 3 sigma.
    pub elevation_noise_std: f64,
    pub velocity_noise_std: f64,
    /// Drop probability per return of a static object hidden behind another.
    pub static_occluded_miss: f64,
    /// Mean number of clutter returns per scan.
    pub false_alarm_mean: f64,
}

impl Default for RadarSpec {
    fn default() -> Self {
        RadarSpec {
            position: [0.0, 0.0, 0.5],
            fov_deg: 160.0,
            max_range: 150.0,
            mean_points_car: 3.0,
            mean_points_pedestrian: 1.0,
            mean_points_obstacle: 1.5,
            range_noise_std: 0.15,
            azimuth_noise_deg: 0.5,
            elevation_noise_std: 1.0,
            velocity_noise_std: 0.1,
            static_occluded_miss: 0.7,
            false_alarm_mean: 6.0,
        }
    }
}

impl RadarSpec {
    /// Horizontal and vertical bounds on the position error of a return at `range`.
    pub fn max_error(&self, range: f64) -> (f64, f64) {
        let lateral = range * (3.0 * self.azimuth_noise_deg).to_radians().sin();
        (3.0 * self.range_noise_std + lateral, 3.0 * self.elevation_noise_std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Radial velocity in m/s, negative when approaching.
    pub v: f32,
    /// Radar cross section in dBsm.
    pub rcs: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RadarScan {
    pub points: Vec<RadarPoint>,
    pub box_ids: Vec<i32>,
}

impl RadarScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn clipped(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    std * rng.sample::<f64, _>(StandardNormal).clamp(-3.0, 3.0)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

fn rcs_dist(class: Option<ClassId>, kind: Option<ObstacleKind>) -> (f64, f64) {
    match (class, kind) {
        (Some(ClassId::Car), _) => (10.0, 3.0),
        (Some(ClassId::Pedestrian), _) => (-5.0, 3.0),
        (_, Some(ObstacleKind::Container)) => (12.0, 4.0),
        (_, Some(ObstacleKind::Wall)) => (8.0, 5.0),
        (_, Some(ObstacleKind::Pole)) => (3.0, 3.0),
        _ => (-2.0, 4.0),
    }
}

struct Emitter {
    center: Vec3,
    size: [f64; 3],
    yaw: f64,
    velocity: [f64; 2],
    mean: f64,
    rcs: (f64, f64),
    box_id: i32,
}

/// Sparse returns per object with range/azimuth/elevation noise and radial
/// velocity. Weather is ignored.
pub fn render_radar(scene: &Scene, sensor: &RadarSpec) -> RadarScan {
    let mut rng = rng_for(scene.seed, stream::RADAR);
    let o = sensor.position;
    let half_fov = (sensor.fov_deg / 2.0).to_radians();
    let occluders = targets(scene);

    let mut emitters: Vec<Emitter> = scene
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Emitter {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            velocity: b.velocity(),
            mean: match b.class_id {
                ClassId::Car => sensor.mean_points_car,
                ClassId::Pedestrian => sensor.mean_points_pedestrian,
            },
            rcs: rcs_dist(Some(b.class_id), None),
            box_id: i as i32,
        })
        .collect();
    emitters.extend(scene.obstacles.iter().map(|ob| Emitter {
        center: ob.center,
        size: ob.size,
        yaw: ob.yaw,
        velocity: [0.0, 0.0],
        mean: sensor.mean_points_obstacle,
        rcs: rcs_dist(None, Some(ob.kind)),
        box_id: -1,
    }));

    let mut scan = RadarScan::default();
    for (k, e) in emitters.iter().enumerate() {
        let count = poisson(&mut rng, e.mean);
        let dx = e.center[0] - o[0];
        let dy = e.center[1] - o[1];
        let dist = dx.hypot(dy);
        let visible = dist <= sensor.max_range && dy.atan2(dx).abs() <= half_fov;
        // Horizontal line of sight at the object's mid height.
        let static_object = e.velocity[0].hypot(e.velocity[1]) < 1e-9;
        let occluded = {
            let from = [o[0], o[1], e.center[2]];
            let dir = [dx / dist.max(1e-9), dy / dist.max(1e-9), 0.0];
            let own = occluders[k].intersect(from, dir).unwrap_or(dist);
            occluders
                .iter()
                .enumerate()
                .any(|(j, t)| j != k && t.intersect(from, dir).is_some_and(|d| d < own))
        };
        let (c, s) = (e.yaw.cos(), e.yaw.sin());
        for _ in 0..count {
            let lx = rng.gen_range(-0.5..0.5) * e.size[0];
            let ly = rng.gen_range(-0.5..0.5) * e.size[1];
            let n_range = clipped(&mut rng, sensor.range_noise_std);
            let n_az = clipped(&mut rng, sensor.azimuth_noise_deg.to_radians());
            let n_z = clipped(&mut rng, sensor.elevation_noise_std);
            let n_v = sensor.velocity_noise_std * rng.sample::<f64, _>(StandardNormal);
            let rcs = Normal::new(e.rcs.0, e.rcs.1).map(|n| n.sample(&mut rng)).unwrap_or(e.rcs.0);
            let miss: f64 = rng.gen();
            if !visible || (static_object && occluded && miss < sensor.static_occluded_miss) {
                continue;
            }
            let px = e.center[0] + c * lx - s * ly - o[0];
            let py = e.center[1] + s * lx + c * ly - o[1];
            let r = px.hypot(py);
            let az = py.atan2(px);
            let radial = (e.velocity[0] * px + e.velocity[1] * py) / r.max(1e-9);
            let (r_n, az_n) = (r + n_range, az + n_az);
            scan.points.push(RadarPoint {
                x: (o[0] + r_n * az_n.cos()) as f32,
                y: (o[1] + r_n * az_n.sin()) as f32,
                z: (e.center[2] + n_z) as f32,
                v: (radial + n_v) as f32,
                rcs: rcs as f32,
            });
            scan.box_ids.push(e.box_id);
        }
    }

    let n_false = poisson(&mut rng, sensor.false_alarm_mean);
    for _ in 0..n_false {
        let r = rng.gen_range(2.0..sensor.max_range.max(2.5) * 0.6);
        let az = rng.gen_range(-half_fov..=half_fov);
        let z = 0.5 + rng.sample::<f64, _>(StandardNormal);
        let v = 0.3 * rng.sample::<f64, _>(StandardNormal);
        let rcs = -10.0 + 5.0 * rng.sample::<f64, _>(StandardNormal);
        scan.points.push(RadarPoint {
            x: (o[0] + r * az.cos()) as f32,
            y: (o[1] + r * az.sin()) as f32,
            z: z as f32,
            v: v as f32,
            rcs: rcs as f32,
        });
        scan.box_ids.push(-1);
    }
    scan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scene::{Box3D, Obstacle};
    use crate::sim::WeatherCondition;

    fn quiet() -> RadarSpec {
        RadarSpec {
            false_alarm_mean: 0.0,
            ..RadarSpec::default()
        }
    }

    fn car(center: Vec3, yaw: f64, speed: f64) -> Box3D {
        Box3D {
            center,
            size: [4.5, 1.8, 1.5],
            yaw,
            class_id: ClassId::Car,
            speed,
        }
    }

    #[test]
    fn stationary_object_has_zero_velocity() {
        let spec = RadarSpec {
            velocity_noise_std: 0.0,
            mean_points_car: 20.0,
            ..quiet()
        };
        let mut s = Scene::empty(2);
        s.boxes = vec![car([20.0, 3.0, 0.75], 0.4, 0.0)];
        let scan = render_radar(&s, &spec);
        assert!(!scan.is_empty());
        assert!(scan.points.iter().all(|p| p.v == 0.0));
    }

    #[test]
    fn approaching_object_has_negative_velocity() {
        let spec = RadarSpec {
            mean_points_car: 20.0,
            ..quiet()
        };
        let mut s = Scene::empty(5);
        s.boxes = vec![car([40.0, 0.0, 0.75], std::f64::consts::PI, 10.0)];
        let scan = render_radar(&s, &spec);
        assert!(!scan.is_empty());
        for p in &scan.points {
            // lateral offsets within the footprint shave a little off the radial part
            assert!((p.v + 10.0).abs() < 0.5, "v = {}", p.v);
        }
    }

    #[test]
    fn elevation_residual_std_monte_carlo() {
        let spec = RadarSpec {
            mean_points_car: 5.0,
            ..quiet()
        };
        let mut residuals = Vec::new();
        let mut seed = 0;
        while residuals.len() < 1000 {
            let mut s = Scene::empty(seed);
            s.boxes = vec![car([25.0, -4.0, 0.75], 0.0, 5.0)];
            let scan = render_radar(&s, &spec);
            residuals.extend(scan.points.iter().map(|p| p.z as f64 - 0.75));
            seed += 1;
        }
        let n = residuals.len() as f64;
        let mean = residuals.iter().sum::<f64>() / n;
        let std = (residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((0.8..=1.2).contains(&std), "std {std}");
    }

    #[test]
    fn static_occluded_object_is_missed_more_often() {
        let spec = RadarSpec {
            mean_points_car: 4.0,
            mean_points_obstacle: 0.0,
            ..quiet()
        };
        let wall = Obstacle {
            center: [15.0, 0.0, 1.0],
            size: [0.5, 3.0, 2.0],
            yaw: 0.0,
            kind: ObstacleKind::Wall,
        };
        let (mut open, mut hidden) = (0, 0);
        for seed in 0..100 {
            let mut s = Scene::empty(seed);
            s.boxes = vec![car([30.0, 0.0, 0.75], 0.0, 0.0)];
            open += render_radar(&s, &spec).len();
            s.obstacles = vec![wall];
            hidden += render_radar(&s, &spec).len();
        }
        assert!((hidden as f64) < 0.5 * open as f64, "open {open}, hidden {hidden}");
    }

    #[test]
    fn points_within_inflated_box_and_weather_independent() {
        let spec = RadarSpec {
            mean_points_car: 5.0,
            ..quiet()
        };
        let mut s = Scene::empty(8);
        s.boxes = vec![car([30.0, 5.0, 0.75], 0.3, 4.0), car([12.0, -3.0, 0.75], -1.0, 0.0)];
        let scan = render_radar(&s, &spec);
        for (p, &id) in scan.points.iter().zip(&scan.box_ids) {
            let b = &s.boxes[id as usize];
            let (h, v) = spec.max_error(b.range() + b.footprint_radius());
            assert!(b.contains([p.x as f64, p.y as f64, b.center[2]], h + 1e-3));
            assert!((p.z as f64 - b.center[2]).abs() <= v + 1e-4);
        }
        s.weather = WeatherCondition::bad_default();
        assert_eq!(render_radar(&s, &spec), scan);
    }

    #[test]
    fn radar_z_noise_exceeds_lidar() {
        assert!(RadarSpec::default().elevation_noise_std > crate::sim::LidarSpec::default().range_noise_std);
    }
}
