//! Experiment configuration: one strict JSON document plus dotted overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoders::{BevFpnConfig, Modality};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fusion::{ModelConfig, PointSource, TrainConfig};
use crate::geometry::GridSpec;
use crate::sim::{SimConfig, WeatherChoice, WeatherKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeatherSplit {
    Sampled,
    Nice,
    Bad,
}

impl WeatherSplit {
    pub fn choice(self) -> WeatherChoice {
        match self {
            WeatherSplit::Sampled => WeatherChoice::Sampled,
            WeatherSplit::Nice => WeatherChoice::Force(WeatherKind::Nice),
            WeatherSplit::Bad => WeatherChoice::Force(WeatherKind::Bad),
        }
    }
}

/// A named run of consecutive frame ids. Splits sharing ids render the same
/// scenes, which is how the nice/bad weather pair is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub first_id: u64,
    pub frames: usize,
    pub weather: WeatherSplit,
    /// Farthest forward object center; defaults to the scene setting.
    #[serde(default)]
    pub x_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub splits: Vec<SplitSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let split = |name: &str, first_id, frames, weather, x_max| SplitSpec {
            name: name.into(),
            first_id,
            frames,
            weather,
            x_max,
        };
        DataConfig {
            seed: 2024,
            splits: vec![
                split("train", 0, 200, WeatherSplit::Sampled, None),
                split("val", 1_000_000, 50, WeatherSplit::Sampled, None),
                split("val_nice", 2_000_000, 50, WeatherSplit::Nice, None),
                split("val_bad", 2_000_000, 50, WeatherSplit::Bad, None),
                split("val_far", 3_000_000, 50, WeatherSplit::Nice, Some(112.0)),
            ],
        }
    }
}

impl DataConfig {
    pub fn split(&self, name: &str) -> Result<&SplitSpec> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::config("data.splits", format!("no split named {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Letters from `L`, `C`, `R`.
    pub modalities: String,
    /// Points that carry camera features into BEV; the modality default when absent.
    pub point_sources: Option<Vec<PointSource>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            modalities: "LCR".into(),
            point_sources: None,
        }
    }
}

impl FusionConfig {
    pub fn active(&self) -> Result<Vec<Modality>> {
        Modality::parse_set(&self.modalities).map_err(|e| Error::config("fusion.modalities", e.to_string()))
    }

    pub fn sources(&self) -> Result<Vec<PointSource>> {
        Ok(match &self.point_sources {
            Some(s) => s.clone(),
            None => PointSource::defaults_for(&self.active()?),
        })
    }
}

/// Evaluation beyond the training extent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FarawayConfig {
    pub split: String,
    /// Forward extent of the evaluation grid in meters.
    pub x_max: f64,
    /// Range bin edges of the report; the bins past the training extent are the far bins.
    pub range_bins: Vec<f64>,
}

impl Default for FarawayConfig {
    fn default() -> Self {
        FarawayConfig {
            split: "val_far".into(),
            x_max: 112.0,
            range_bins: vec![0.0, 35.0, 70.0, 100.0, 112.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub faraway: FarawayConfig,
}

impl ExperimentConfig {
    /// The laptop-scale setup used by the acceptance suite: quarter-scale
    /// BEV output and narrower alignment stacks.
    pub fn desk() -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.model.grid = GridSpec {
            scale: 0.25,
            ..cfg.model.grid
        };
        cfg.model.lidar_fpn = BevFpnConfig {
            stages: vec![16, 32, 64],
            out_channels: 32,
            out_stage: 1,
        };
        cfg.model.align_hidden = 32;
        // per-bin recall needs a few hundred cars per point-count bin
        for s in cfg.data.splits.iter_mut().filter(|s| s.name == "val") {
            s.frames = 600;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.scene.validate()?;
        self.sim.bad_weather.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.fusion.active()?;
        let mut names: Vec<&str> = self.data.splits.iter().map(|s| s.name.as_str()).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("data.splits", "split names must be unique"));
        }
        for s in &self.data.splits {
            if s.name.is_empty() || s.name.contains(['/', '\\', '.']) {
                return Err(Error::config("data.splits", format!("split name {:?} is not a plain directory name", s.name)));
            }
            if let Some(x) = s.x_max {
                if !(x > self.sim.scene.x_range[0]) {
                    return Err(Error::config("data.splits", format!("split {:?}: x_max must exceed the scene's near edge", s.name)));
                }
            }
        }
        let far = &self.faraway;
        if far.range_bins.len() < 2 || far.range_bins.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::config("faraway.range_bins", "need at least two increasing edges"));
        }
        let g = &self.model.grid;
        if !(far.x_max > g.x_min + g.nx as f64 * g.cell_size) {
            return Err(Error::config("faraway.x_max", "must extend beyond the training grid"));
        }
        Ok(())
    }

    /// Simulator settings for one split.
    pub fn sim_for(&self, split: &SplitSpec) -> SimConfig {
        let mut sim = self.sim.clone();
        if let Some(x) = split.x_max {
            sim.scene.x_range[1] = x;
        }
        sim
    }

    /// The model config widened to the faraway evaluation extent.
    pub fn faraway_model(&self) -> Result<ModelConfig> {
        let g = &self.model.grid;
        let nx = ((self.faraway.x_max - g.x_min) / g.cell_size).round() as usize;
        let cfg = self.model.with_extent(g.x_min, g.y_min, nx, g.ny);
        cfg.validate().map_err(|e| Error::config("faraway.x_max", e.to_string()))?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON serialization, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    /// Parses `text`, applies `key=value` overrides and validates.
    pub fn from_json_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", format!("not valid JSON: {e}")))?;
        if !value.is_object() {
            return Err(Error::config("<root>", "expected a JSON object"));
        }
        // Unknown keys are rejected by the typed parse; overrides are checked
        // against the fully populated tree so a typo names its own key.
        let full = serde_json::to_value(Self::parse_value(value.clone())?).expect("config serializes");
        for ov in overrides {
            apply_override(&mut value, &full, ov)?;
        }
        let cfg = Self::parse_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_with(&text, overrides).map_err(|e| match e {
            Error::Config { key, msg } => Error::config(key, format!("{msg} (in {})", path.display())),
            other => other,
        })
    }

    fn parse_value(value: Value) -> Result<Self> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let key = if path == "." { "<root>".to_string() } else { path };
            Error::config(key, e.into_inner().to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a string.
fn apply_override(root: &mut Value, full: &Value, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(ov, "override must look like key.path=value"))?;
    let parts: Vec<&str> = key.split('.').collect();
    let mut probe = full;
    for p in &parts {
        probe = probe
            .get(p)
            .ok_or_else(|| Error::config(key, "no such config key"))?;
    }
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for (k, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(key, "cannot descend into a non-object"))?;
        if k + 1 == parts.len() {
            obj.insert(p.to_string(), new);
            return Ok(());
        }
        // materialize defaulted sections so the leaf has a parent
        let default = full_child(full, &parts[..=k]);
        cur = obj.entry(p.to_string()).or_insert(default);
    }
    unreachable!("split yields at least one part")
}

fn full_child(full: &Value, path: &[&str]) -> Value {
    let mut v = full;
    for p in path {
        v = &v[*p];
    }
    v.clone()
}
