use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{rng_for, stream, WeatherCondition};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Pose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassId {
    Car,
    Pedestrian,
}

impl ClassId {
    pub const ALL: [ClassId; 2] = [ClassId::Car, ClassId::Pedestrian];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ClassId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Car => "car",
            ClassId::Pedestrian => "pedestrian",
        }
    }

    /// Typical (length, width) used as the size-regression anchor.
    pub fn prior_size(self) -> (f64, f64) {
        match self {
            ClassId::Car => (4.4, 1.85),
            ClassId::Pedestrian => (0.7, 0.7),
        }
    }

    /// Typical height; decoded boxes sit on the ground with this height.
    pub fn prior_height(self) -> f64 {
        match self {
            ClassId::Car => 1.55,
            ClassId::Pedestrian => 1.7,
        }
    }
}

impl std::str::FromStr for ClassId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(ClassId::Car),
            "pedestrian" => Ok(ClassId::Pedestrian),
            _ => Err(Error::InvalidArgument(format!("unknown class {s:?}"))),
        }
    }
}

/// Labelled object. `size` is (length, width, height); `speed` is along the heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: Vec3,
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: ClassId,
    pub speed: f64,
}

impl Box3D {
    /// Ego-from-box transform.
    pub fn pose(&self) -> Pose {
        Pose::from_yaw(self.yaw, self.center)
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.speed * self.yaw.cos(), self.speed * self.yaw.sin()]
    }

    pub fn corners(&self) -> [Vec3; 8] {
        box_corners(self.center, self.size, self.yaw)
    }

    pub fn range(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }

    /// Radius of the circle enclosing the footprint.
    pub fn footprint_radius(&self) -> f64 {
        0.5 * self.size[0].hypot(self.size[1])
    }

    /// Whether ego-frame `p` lies within the box grown by `margin` on every side.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        box_contains(self.center, self.size, self.yaw, p, margin)
    }
}

pub(crate) fn box_corners(center: Vec3, size: [f64; 3], yaw: f64) -> [Vec3; 8] {
    let pose = Pose::from_yaw(yaw, center);
    let [l, w, h] = [size[0] / 2.0, size[1] / 2.0, size[2] / 2.0];
    let mut out = [[0.0; 3]; 8];
    for (k, c) in out.iter_mut().enumerate() {
        let sx = if k & 1 == 0 { -l } else { l };
        let sy = if k & 2 == 0 { -w } else { w };
        let sz = if k & 4 == 0 { -h } else { h };
        *c = pose.apply([sx, sy, sz]);
    }
    out
}

pub(crate) fn box_contains(center: Vec3, size: [f64; 3], yaw: f64, p: Vec3, margin: f64) -> bool {
    let local = Pose::from_yaw(yaw, center).inverse().apply(p);
    (0..3).all(|k| local[k].abs() <= size[k] / 2.0 + margin)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObstacleKind {
    Wall,
    Bush,
    Container,
    Pole,
}

impl ObstacleKind {
    const ALL: [ObstacleKind; 4] = [ObstacleKind::Wall, ObstacleKind::Bush, ObstacleKind::Container, ObstacleKind::Pole];

    fn sample_size(self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self {
            ObstacleKind::Wall => [rng.gen_range(5.0..12.0), rng.gen_range(0.4..0.8), rng.gen_range(1.0..2.5)],
            ObstacleKind::Bush => [rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0), rng.gen_range(0.8..2.0)],
            ObstacleKind::Container => [rng.gen_range(5.5..8.0), rng.gen_range(2.2..2.6), rng.gen_range(2.0..3.0)],
            ObstacleKind::Pole => [0.3, 0.3, rng.gen_range(2.5..4.0)],
        }
    }
}

/// Unlabelled structure: seen by every sensor, never a detection target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec3,
    pub size: [f64; 3],
    pub yaw: f64,
    pub kind: ObstacleKind,
}

impl Obstacle {
    pub fn corners(&self) -> [Vec3; 8] {
        box_corners(self.center, self.size, self.yaw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub boxes: Vec<Box3D>,
    pub obstacles: Vec<Obstacle>,
    pub seed: u64,
    pub weather: WeatherCondition,
}

impl Scene {
    pub fn empty(seed: u64) -> Self {
        Scene {
            boxes: Vec::new(),
            obstacles: Vec::new(),
            seed,
            weather: WeatherCondition::nice(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Forward extent of object centers (meters).
    pub x_range: [f64; 2],
    /// Lateral extent of object centers (meters).
    pub y_range: [f64; 2],
    /// Inclusive labelled-object count range.
    pub count_range: [usize; 2],
    /// Relative sampling weight per class.
    pub class_mix: Vec<(ClassId, f64)>,
    /// Car speed range in m/s for moving cars.
    pub speed_range: [f64; 2],
    /// Fraction of objects that move.
    pub moving_fraction: f64,
    /// Probability that an object gets an obstacle between it and the sensor.
    pub occluder_prob: f64,
    /// Inclusive count range of free-standing obstacles.
    pub obstacle_range: [usize; 2],
    /// Minimum distance from the ego origin for any placed center.
    pub min_range: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            x_range: [3.0, 70.0],
            y_range: [-20.0, 20.0],
            count_range: [6, 14],
            class_mix: vec![(ClassId::Car, 0.75), (ClassId::Pedestrian, 0.25)],
            speed_range: [3.0, 15.0],
            moving_fraction: 0.5,
            occluder_prob: 0.15,
            obstacle_range: [4, 10],
            min_range: 4.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let extent_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[1] > r[0];
        if !extent_ok(self.x_range) || !extent_ok(self.y_range) {
            return Err(Error::config("scene.x_range", "world extent must be non-empty"));
        }
        if self.count_range[0] > self.count_range[1] {
            return Err(Error::config("scene.count_range", "min exceeds max"));
        }
        if self.obstacle_range[0] > self.obstacle_range[1] {
            return Err(Error::config("scene.obstacle_range", "min exceeds max"));
        }
        let total: f64 = self.class_mix.iter().map(|c| c.1).sum();
        if self.class_mix.is_empty() || self.class_mix.iter().any(|c| !(c.1 >= 0.0)) || !(total > 0.0) {
            return Err(Error::config("scene.class_mix", "class mix is empty"));
        }
        if !(self.speed_range[0] >= 0.0 && self.speed_range[1] >= self.speed_range[0]) {
            return Err(Error::config("scene.speed_range", "invalid speed range"));
        }
        for (key, p) in [("scene.moving_fraction", self.moving_fraction), ("scene.occluder_prob", self.occluder_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, "probability outside [0, 1]"));
            }
        }
        Ok(())
    }

    fn sample_class(&self, rng: &mut ChaCha8Rng) -> ClassId {
        let total: f64 = self.class_mix.iter().map(|c| c.1).sum();
        let mut u = rng.gen::<f64>() * total;
        for &(class, w) in &self.class_mix {
            if u < w {
                return class;
            }
            u -= w;
        }
        self.class_mix.last().expect("validated").0
    }
}

struct Placed {
    x: f64,
    y: f64,
    r: f64,
}

fn free(placed: &[Placed], x: f64, y: f64, r: f64) -> bool {
    placed.iter().all(|p| (p.x - x).hypot(p.y - y) > p.r + r + 0.3)
}

const MAX_ATTEMPTS: usize = 60;

/// Samples labelled boxes, occluders and free-standing obstacles. Weather is
/// nice; callers assign weather separately so it never shifts the layout.
pub fn sample_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = rng_for(seed, stream::SCENE);
    let n_boxes = rng.gen_range(cfg.count_range[0]..=cfg.count_range[1]);
    let mut placed: Vec<Placed> = Vec::new();
    let mut scene = Scene::empty(seed);
    let in_extent = |x: f64, y: f64| {
        x >= cfg.x_range[0] && x <= cfg.x_range[1] && y >= cfg.y_range[0] && y <= cfg.y_range[1] && x.hypot(y) >= cfg.min_range
    };

    for _ in 0..n_boxes {
        let class = cfg.sample_class(&mut rng);
        let size: [f64; 3] = match class {
            ClassId::Car => [rng.gen_range(3.8..5.0), rng.gen_range(1.7..2.0), rng.gen_range(1.4..1.7)],
            ClassId::Pedestrian => [rng.gen_range(0.5..0.9), rng.gen_range(0.5..0.9), rng.gen_range(1.5..1.9)],
        };
        let moving = rng.gen::<f64>() < cfg.moving_fraction;
        let yaw = match class {
            ClassId::Car if rng.gen::<f64>() < 0.7 => {
                let base = if rng.gen::<bool>() { 0.0 } else { PI };
                normalize_angle(base + rng.gen_range(-0.2..0.2))
            }
            _ => normalize_angle(rng.gen_range(-PI..PI)),
        };
        let speed = match (moving, class) {
            (false, _) => 0.0,
            (true, ClassId::Car) => rng.gen_range(cfg.speed_range[0]..=cfg.speed_range[1]),
            (true, ClassId::Pedestrian) => rng.gen_range(0.5..2.0),
        };
        let r = 0.5 * size[0].hypot(size[1]);
        for _ in 0..MAX_ATTEMPTS {
            let x = rng.gen_range(cfg.x_range[0]..=cfg.x_range[1]);
            let y = rng.gen_range(cfg.y_range[0]..=cfg.y_range[1]);
            if in_extent(x, y) && free(&placed, x, y, r) {
                placed.push(Placed { x, y, r });
                scene.boxes.push(Box3D {
                    center: [x, y, size[2] / 2.0],
                    size,
                    yaw,
                    class_id: class,
                    speed,
                });
                break;
            }
        }
    }

    // Occluders sit on the line of sight, offset sideways so the object is
    // partly hidden.
    for b in scene.boxes.clone() {
        if rng.gen::<f64>() >= cfg.occluder_prob {
            continue;
        }
        let kind = if rng.gen::<bool>() { ObstacleKind::Wall } else { ObstacleKind::Bush };
        let size: [f64; 3] = kind.sample_size(&mut rng);
        let frac = rng.gen_range(0.4..0.75);
        let bearing = b.center[1].atan2(b.center[0]);
        let dist = b.range() * frac;
        let lateral = rng.gen_range(-0.6..0.6) * b.footprint_radius().max(size[0] / 2.0);
        let x = dist * bearing.cos() - lateral * bearing.sin();
        let y = dist * bearing.sin() + lateral * bearing.cos();
        let r = 0.5 * size[0].hypot(size[1]);
        if in_extent(x, y) && free(&placed, x, y, r) {
            placed.push(Placed { x, y, r });
            scene.obstacles.push(Obstacle {
                center: [x, y, size[2] / 2.0],
                size,
                // broadside to the sensor
                yaw: normalize_angle(bearing + PI / 2.0),
                kind,
            });
        }
    }

    let n_obstacles = rng.gen_range(cfg.obstacle_range[0]..=cfg.obstacle_range[1]);
    for _ in 0..n_obstacles {
        let kind = ObstacleKind::ALL[rng.gen_range(0..ObstacleKind::ALL.len())];
        let size: [f64; 3] = kind.sample_size(&mut rng);
        let yaw = normalize_angle(rng.gen_range(-PI..PI));
        let r = 0.5 * size[0].hypot(size[1]);
        for _ in 0..MAX_ATTEMPTS {
            let x = rng.gen_range(cfg.x_range[0]..=cfg.x_range[1]);
            let y = rng.gen_range(cfg.y_range[0]..=cfg.y_range[1]);
            if in_extent(x, y) && free(&placed, x, y, r) {
                placed.push(Placed { x, y, r });
                scene.obstacles.push(Obstacle {
                    center: [x, y, size[2] / 2.0],
                    size,
                    yaw,
                    kind,
                });
                break;
            }
        }
    }
    Ok(scene)
}
