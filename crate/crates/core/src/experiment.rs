//! Dataset splits, staged training of the model family, and the ablation
//! suites shared by the CLI and the acceptance tests.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SplitSpec};
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::eval::{map_summary, mrapd, EvalConfig, EvalReport, Mrapd, RangeAp, RecallBin};
use crate::fusion::{fuse_train, ground_truth, pretrain, FrameInputs, Model, ModelConfig, PointSource, StageReport};
use crate::sim::{generate_frame_range, read_dataset, write_dataset, ClassId, SensorFrame};

/// The six detectors compared by the modality grid, in report order.
pub const MODALITY_GRID: [&str; 6] = ["C", "R", "CR", "L", "LC", "LCR"];

/// Point-source variants of the camera-radar detector.
pub const CR_POINT_VARIANTS: [(&str, &[PointSource]); 4] = [
    ("CR(+C)", &[PointSource::CameraCentroid]),
    ("CR(+R)", &[PointSource::Radar]),
    ("CR(+C,R)", &[PointSource::CameraCentroid, PointSource::Radar]),
    ("CR(+L)", &[PointSource::Lidar]),
];

pub fn generate_split(cfg: &ExperimentConfig, split: &SplitSpec) -> Result<Vec<SensorFrame>> {
    let sim = cfg.sim_for(split);
    sim.scene.validate()?;
    generate_frame_range(&sim, cfg.data.seed, split.first_id..split.first_id + split.frames as u64, split.weather.choice())
}

/// Writes every split to `out/<name>/` and the resolved config to `out/config.json`.
pub fn generate_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    for split in &cfg.data.splits {
        let frames = generate_split(cfg, split)?;
        write_dataset(&frames, &out.join(&split.name), Some(&cfg.sim_for(split)))?;
    }
    write_json(&out.join("config.json"), cfg)
}

/// Frames of split `name`, read from `data/<name>` when a dataset directory
/// is given, generated in memory otherwise.
pub fn load_split(cfg: &ExperimentConfig, data: Option<&Path>, name: &str) -> Result<Vec<SensorFrame>> {
    match data {
        Some(dir) => read_dataset(&dir.join(name)),
        None => generate_split(cfg, cfg.data.split(name)?),
    }
}

pub fn prepare(frames: &[SensorFrame], model: &ModelConfig) -> Vec<FrameInputs> {
    frames.par_iter().map(|f| FrameInputs::new(f, model)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn fusion_key(active: &[Modality], sources: &[PointSource]) -> String {
    let src: Vec<&str> = sources
        .iter()
        .map(|s| match s {
            PointSource::Lidar => "l",
            PointSource::Radar => "r",
            PointSource::CameraCentroid => "c",
        })
        .collect();
    format!("{}_{}", Modality::set_name(active), src.join(""))
}

/// Pretrained branches plus every fusion model trained from them so far.
pub struct Zoo {
    pub cfg: ExperimentConfig,
    pub train: Vec<FrameInputs>,
    pub base: Model,
    pub fused: BTreeMap<String, Model>,
    pub stages: Vec<StageReport>,
}

impl Zoo {
    /// Runs stage 1 for every branch.
    pub fn pretrain(cfg: &ExperimentConfig, train: Vec<FrameInputs>) -> Result<Self> {
        let mut base = Model::new(&cfg.model)?;
        let mut stages = Vec::new();
        for m in Modality::ALL {
            stages.push(pretrain(&mut base, m, &train, &cfg.train)?);
        }
        Ok(Zoo {
            cfg: cfg.clone(),
            train,
            base,
            fused: BTreeMap::new(),
            stages,
        })
    }

    pub fn from_base(cfg: &ExperimentConfig, train: Vec<FrameInputs>, base: Model) -> Self {
        Zoo {
            cfg: cfg.clone(),
            train,
            base,
            fused: BTreeMap::new(),
            stages: Vec::new(),
        }
    }

    /// The detector for `active`: the branch's own for one modality, a
    /// fusion model (trained on first use) otherwise.
    pub fn model(&mut self, active: &[Modality], sources: Option<&[PointSource]>) -> Result<&Model> {
        if active.len() == 1 {
            return Ok(&self.base);
        }
        let sources = sources.map(<[PointSource]>::to_vec).unwrap_or_else(|| PointSource::defaults_for(active));
        let key = fusion_key(active, &sources);
        if !self.fused.contains_key(&key) {
            let mut m = self.base.clone();
            let report = fuse_train(&mut m, active, &sources, &self.train, &self.cfg.train)?;
            self.stages.push(report);
            self.fused.insert(key.clone(), m);
        }
        Ok(&self.fused[&key])
    }

    /// Saves the pretrained model to `dir/base` and each fusion model to `dir/<key>`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.base.save(&dir.join("base"))?;
        for (k, m) in &self.fused {
            m.save(&dir.join(k))?;
        }
        write_json(&dir.join("stages.json"), &self.stages)
    }
}

/// Evaluation report of `model` over `frames`, stamped with the config hash and seed.
pub fn evaluate(model: &Model, active: &[Modality], frames: &[FrameInputs], cfg: &ExperimentConfig, eval: &EvalConfig, label: &str) -> Result<EvalReport> {
    let dets = model.detect_all(frames, active, eval)?;
    let mut report = map_summary(&dets, &ground_truth(frames), eval)?;
    report.label = label.to_string();
    report.config_hash = cfg.hash();
    report.seed = cfg.data.seed;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityGridReport {
    pub config_hash: String,
    pub seed: u64,
    pub reports: Vec<EvalReport>,
}

impl ModalityGridReport {
    pub fn map(&self, label: &str, class: ClassId) -> Option<f64> {
        self.reports.iter().find(|r| r.label == label).map(|r| r.map_of(class))
    }
}

pub fn modality_grid(zoo: &mut Zoo, val: &[FrameInputs]) -> Result<ModalityGridReport> {
    let mut reports = Vec::new();
    for set in MODALITY_GRID {
        let active = Modality::parse_set(set)?;
        let cfg = zoo.cfg.clone();
        let model = zoo.model(&active, None)?;
        reports.push(evaluate(model, &active, val, &cfg, &cfg.eval, set)?);
    }
    Ok(ModalityGridReport {
        config_hash: zoo.cfg.hash(),
        seed: zoo.cfg.data.seed,
        reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherRow {
    pub label: String,
    pub class: ClassId,
    pub nice: Vec<RangeAp>,
    pub bad: Vec<RangeAp>,
    /// `None` when no bin has a positive nice-weather AP.
    pub mrapd: Option<Mrapd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherReport {
    pub config_hash: String,
    pub seed: u64,
    pub threshold: f64,
    pub rows: Vec<WeatherRow>,
}

impl WeatherReport {
    pub fn mrapd(&self, label: &str, class: ClassId) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.class == class)
            .and_then(|r| r.mrapd.as_ref())
            .map(|m| m.value)
    }
}

/// Range-binned AP under nice and bad weather on the same scenes, and the
/// resulting mean relative AP change, for each modality set.
pub fn weather(zoo: &mut Zoo, nice: &[FrameInputs], bad: &[FrameInputs], sets: &[&str]) -> Result<WeatherReport> {
    let cfg = zoo.cfg.clone();
    let mut rows = Vec::new();
    for set in sets {
        let active = Modality::parse_set(set)?;
        let model = zoo.model(&active, None)?;
        let rn = evaluate(model, &active, nice, &cfg, &cfg.eval, set)?;
        let rb = evaluate(model, &active, bad, &cfg, &cfg.eval, set)?;
        for &class in &cfg.eval.classes {
            let (Some(cn), Some(cb)) = (rn.class(class), rb.class(class)) else { continue };
            let ap = |v: &[RangeAp]| v.iter().map(|b| b.ap.unwrap_or(f64::NAN)).collect::<Vec<f64>>();
            rows.push(WeatherRow {
                label: set.to_string(),
                class,
                nice: cn.range_ap.clone(),
                bad: cb.range_ap.clone(),
                mrapd: mrapd(&ap(&cb.range_ap), &ap(&cn.range_ap)).ok(),
            });
        }
    }
    Ok(WeatherReport {
        config_hash: cfg.hash(),
        seed: cfg.data.seed,
        threshold: cfg.eval.ablation_threshold,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub label: String,
    pub class: ClassId,
    pub bins: Vec<RecallBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointDensityReport {
    pub config_hash: String,
    pub seed: u64,
    pub threshold: f64,
    pub min_score: f64,
    pub rows: Vec<RecallRow>,
}

impl PointDensityReport {
    pub fn row(&self, label: &str, class: ClassId) -> Option<&RecallRow> {
        self.rows.iter().find(|r| r.label == label && r.class == class)
    }
}

/// Recall against the number of lidar points on each object.
pub fn point_density(zoo: &mut Zoo, val: &[FrameInputs], sets: &[&str]) -> Result<PointDensityReport> {
    let cfg = zoo.cfg.clone();
    let mut rows = Vec::new();
    for set in sets {
        let active = Modality::parse_set(set)?;
        let model = zoo.model(&active, None)?;
        let r = evaluate(model, &active, val, &cfg, &cfg.eval, set)?;
        for c in &r.classes {
            let bins = c
                .recall_vs_points
                .clone()
                .ok_or_else(|| Error::MissingAssociations(format!("{set}: ground truth without point counts")))?;
            rows.push(RecallRow {
                label: set.to_string(),
                class: c.class,
                bins,
            });
        }
    }
    Ok(PointDensityReport {
        config_hash: cfg.hash(),
        seed: cfg.data.seed,
        threshold: cfg.eval.ablation_threshold,
        min_score: cfg.eval.recall_score,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledReport {
    pub label: String,
    pub sources: Vec<PointSource>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrPointsReport {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<LabelledReport>,
}

impl CrPointsReport {
    pub fn map(&self, label: &str, class: ClassId) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label).map(|r| r.report.map_of(class))
    }
}

/// The camera-radar detector trained with each choice of camera-feature carrier points.
pub fn cr_points(zoo: &mut Zoo, val: &[FrameInputs]) -> Result<CrPointsReport> {
    let cfg = zoo.cfg.clone();
    let active = [Modality::C, Modality::R];
    let mut rows = Vec::new();
    for (label, sources) in CR_POINT_VARIANTS {
        let model = zoo.model(&active, Some(sources))?;
        rows.push(LabelledReport {
            label: label.to_string(),
            sources: sources.to_vec(),
            report: evaluate(model, &active, val, &cfg, &cfg.eval, label)?,
        });
    }
    Ok(CrPointsReport {
        config_hash: cfg.hash(),
        seed: cfg.data.seed,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FarawayReport {
    pub config_hash: String,
    pub seed: u64,
    /// Forward extent of the training grid; bins beyond it are unseen ranges.
    pub train_extent: f64,
    pub rows: Vec<EvalReport>,
}

impl FarawayReport {
    /// Range-binned AP of `label` for `class`.
    pub fn range_ap(&self, label: &str, class: ClassId) -> Option<&[RangeAp]> {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .and_then(|r| r.class(class))
            .map(|c| c.range_ap.as_slice())
    }
}

/// Models trained on the near grid, evaluated on a longer grid over scenes
/// that reach past the training extent.
pub fn faraway(zoo: &mut Zoo, far: &[FrameInputs], sets: &[&str]) -> Result<FarawayReport> {
    let cfg = zoo.cfg.clone();
    let wide = cfg.faraway_model()?;
    let mut eval = cfg.eval.clone();
    eval.range_bins = cfg.faraway.range_bins.clone();
    eval.max_range = *eval.range_bins.last().expect("validated");
    let mut rows = Vec::new();
    for set in sets {
        let active = Modality::parse_set(set)?;
        let model = zoo.model(&active, None)?.with_config(wide.clone())?;
        rows.push(evaluate(&model, &active, far, &cfg, &eval, set)?);
    }
    let g = &cfg.model.grid;
    Ok(FarawayReport {
        config_hash: cfg.hash(),
        seed: cfg.data.seed,
        train_extent: g.x_min + g.nx as f64 * g.cell_size,
        rows,
    })
}
