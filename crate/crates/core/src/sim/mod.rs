//! Deterministic synthetic lidar/radar/camera frames with ground truth.
//!
//! Every renderer is a pure function of `(scene, sensor spec)`; randomness is
//! drawn from ChaCha streams keyed by the scene seed and a per-sensor stream
//! id, so re-rendering a scene under different weather reuses the same draws.

mod camera;
mod dataset;
mod lidar;
mod radar;
mod scene;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use camera::{render_camera, CameraImage, CameraSpec};
pub use dataset::{read_dataset, read_manifest, write_dataset, DatasetManifest, DATASET_VERSION};
pub use lidar::{render_lidar, LidarPoint, LidarScan, LidarSpec};
pub use radar::{render_radar, RadarPoint, RadarScan, RadarSpec};
pub use scene::{sample_scene, Box3D, ClassId, Obstacle, ObstacleKind, Scene, SceneConfig};

use crate::error::Result;

pub(crate) mod stream {
    pub const SCENE: u64 = 1;
    pub const LIDAR: u64 = 2;
    pub const LIDAR_DROPOUT: u64 = 3;
    pub const RADAR: u64 = 4;
    pub const CAMERA: u64 = 5;
    pub const CAMERA_OBJECT: u64 = 1000;
    pub const WEATHER: u64 = 6;
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherKind {
    Nice,
    Bad,
}

/// Degradation applied by the lidar and camera renderers. Radar ignores it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherCondition {
    pub kind: WeatherKind,
    /// Per-point lidar drop probability at zero range.
    pub lidar_dropout_base: f64,
    /// Additional drop probability per meter of range.
    pub lidar_range_dropout_coeff: f64,
    /// Multiplier on lidar range noise.
    pub lidar_noise_factor: f64,
    /// Image contrast factor in (0, 1].
    pub camera_contrast: f64,
}

impl WeatherCondition {
    pub fn nice() -> Self {
        WeatherCondition {
            kind: WeatherKind::Nice,
            lidar_dropout_base: 0.0,
            lidar_range_dropout_coeff: 0.0,
            lidar_noise_factor: 1.0,
            camera_contrast: 1.0,
        }
    }

    pub fn bad_default() -> Self {
        WeatherCondition {
            kind: WeatherKind::Bad,
            lidar_dropout_base: 0.15,
            lidar_range_dropout_coeff: 0.008,
            lidar_noise_factor: 2.5,
            camera_contrast: 0.7,
        }
    }

    /// Nice weather always means no degradation.
    pub fn normalized(self) -> Self {
        match self.kind {
            WeatherKind::Nice => Self::nice(),
            WeatherKind::Bad => self,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lidar_dropout_base)
            && self.lidar_range_dropout_coeff >= 0.0
            && self.lidar_noise_factor >= 1.0
            && self.camera_contrast > 0.0
            && self.camera_contrast <= 1.0;
        if !ok {
            return Err(crate::Error::config("sim.bad_weather", format!("out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn dropout_probability(&self, range: f64) -> f64 {
        (self.lidar_dropout_base + self.lidar_range_dropout_coeff * range).clamp(0.0, 1.0)
    }
}

/// Scene and sensor settings for dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub scene: SceneConfig,
    pub lidar: LidarSpec,
    pub radar: RadarSpec,
    pub camera: CameraSpec,
    /// Parameters used whenever a frame is rendered in bad weather.
    pub bad_weather: WeatherCondition,
    /// Probability that a generated frame is a bad-weather frame (when not forced).
    pub bad_weather_fraction: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scene: SceneConfig::default(),
            lidar: LidarSpec::default(),
            radar: RadarSpec::default(),
            camera: CameraSpec::default(),
            bad_weather: WeatherCondition::bad_default(),
            bad_weather_fraction: 0.3,
        }
    }
}

/// One synchronized sample from all sensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorFrame {
    pub frame_id: u64,
    pub scene: Scene,
    pub lidar: LidarScan,
    pub radar: RadarScan,
    pub camera: CameraImage,
}

impl SensorFrame {
    /// Number of lidar points associated with each ground-truth box.
    pub fn lidar_points_per_box(&self) -> Vec<usize> {
        let mut counts = vec![0; self.scene.boxes.len()];
        for &id in &self.lidar.box_ids {
            if id >= 0 {
                counts[id as usize] += 1;
            }
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeatherChoice {
    /// Draw from `bad_weather_fraction`.
    Sampled,
    Force(WeatherKind),
}

/// Generates frame `frame_id` of a dataset; the scene seed is
/// `dataset_seed + frame_id`, so frames are independent of generation order.
pub fn generate_frame(cfg: &SimConfig, dataset_seed: u64, frame_id: u64, weather: WeatherChoice) -> Result<SensorFrame> {
    use rand::Rng;
    let seed = dataset_seed.wrapping_add(frame_id);
    let kind = match weather {
        WeatherChoice::Force(k) => k,
        WeatherChoice::Sampled => {
            let mut rng = rng_for(seed, stream::WEATHER);
            if rng.gen::<f64>() < cfg.bad_weather_fraction {
                WeatherKind::Bad
            } else {
                WeatherKind::Nice
            }
        }
    };
    let mut scene = sample_scene(seed, &cfg.scene)?;
    scene.weather = match kind {
        WeatherKind::Nice => WeatherCondition::nice(),
        WeatherKind::Bad => cfg.bad_weather,
    };
    Ok(render_frame(frame_id, scene, cfg))
}

pub fn render_frame(frame_id: u64, scene: Scene, cfg: &SimConfig) -> SensorFrame {
    let lidar = render_lidar(&scene, &cfg.lidar);
    let radar = render_radar(&scene, &cfg.radar);
    let camera = render_camera(&scene, &cfg.camera);
    SensorFrame {
        frame_id,
        scene,
        lidar,
        radar,
        camera,
    }
}

/// Generates `count` frames in parallel (order-independent seeds).
pub fn generate_frames(cfg: &SimConfig, dataset_seed: u64, count: usize, weather: WeatherChoice) -> Result<Vec<SensorFrame>> {
    generate_frame_range(cfg, dataset_seed, 0..count as u64, weather)
}

/// Generates the frames with ids in `ids`. Two calls with the same ids and
/// different forced weather render the same scenes.
pub fn generate_frame_range(cfg: &SimConfig, dataset_seed: u64, ids: std::ops::Range<u64>, weather: WeatherChoice) -> Result<Vec<SensorFrame>> {
    use rayon::prelude::*;
    cfg.bad_weather.validate()?;
    ids.into_par_iter()
        .map(|id| generate_frame(cfg, dataset_seed, id, weather))
        .collect()
}
