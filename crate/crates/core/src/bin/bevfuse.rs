use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use bevfuse::config::ExperimentConfig;
use bevfuse::encoders::Modality;
use bevfuse::eval::{map_summary, Detection, EvalReport, GroundTruth};
use bevfuse::experiment::{self, read_json, write_json, Zoo};
use bevfuse::fusion::{fuse_train, ground_truth, pretrain, Model, PointSource};
use bevfuse::plot::{curves_csv, curves_svg, objectness_heatmap, Series};
use bevfuse::sim::{read_dataset, ClassId};
use bevfuse::{Error, Result};

#[derive(Parser)]
#[command(name = "bevfuse", version, about = "Lidar/camera/radar BEV fusion experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON); defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config leaf, e.g. `--set train.adam.lr=0.002`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.overrides),
            None => ExperimentConfig::from_json_with("{}", &self.overrides),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Pretrain,
    Fuse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    ModalityGrid,
    Weather,
    PointDensity,
    CrPoints,
    Faraway,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render every configured split to `OUT/<split>/`.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Frame count for every split, overriding the config.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Stage 1 (per-branch) or stage 2 (fusion) training.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        stage: Stage,
        /// Letters from L, C, R.
        #[arg(long)]
        modalities: String,
        /// Dataset root produced by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        /// Starting weights; required for the fuse stage.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Camera-feature carrier points for fusion, e.g. `lidar,radar`.
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detections of a trained model over one dataset split.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        weights: PathBuf,
        /// A split directory (one `manifest.json`).
        #[arg(long)]
        data: PathBuf,
        /// Detector to run; defaults to the fused set, or the only pretrained branch.
        #[arg(long)]
        modalities: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores predictions against a split's ground truth.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `detections.json` written by `infer`, or its directory.
        #[arg(long)]
        pred: PathBuf,
        /// Split directory with the ground truth.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preset ablation sweeps; trains whatever the suite needs.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        suite: Suite,
        /// Dataset root; splits are generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained base model, skipping stage 1.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Curves from a report, or objectness heatmaps from a model.
    Plot {
        #[arg(long, conflicts_with_all = ["weights", "data"])]
        report: Option<PathBuf>,
        #[arg(long, requires = "data")]
        weights: Option<PathBuf>,
        #[arg(long, requires = "weights")]
        data: Option<PathBuf>,
        #[arg(long)]
        modalities: Option<String>,
        /// Frame ids to render; the first frame when absent.
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// What `infer` writes and `eval` reads.
#[derive(Serialize, Deserialize)]
struct Predictions {
    modalities: String,
    detections: Vec<Detection>,
}

fn parse_set(s: &str) -> Result<Vec<Modality>> {
    Modality::parse_set(s).map_err(|e| Error::InvalidArgument(format!("--modalities: {e}")))
}

fn default_set(model: &Model) -> Result<Vec<Modality>> {
    if let Some(f) = &model.fusion {
        return Ok(f.modalities.clone());
    }
    match model.pretrained.as_slice() {
        [m] => Ok(vec![*m]),
        [] => Err(Error::MissingWeights("the model has no trained detector".into())),
        _ => Err(Error::InvalidArgument("several branches are trained; pass --modalities".into())),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { cfg, out, frames } => {
            let mut cfg = cfg.load()?;
            if let Some(n) = frames {
                for s in &mut cfg.data.splits {
                    s.frames = n;
                }
            }
            experiment::generate_dataset(&cfg, &out)
        }
        Cmd::Train {
            cfg,
            stage,
            modalities,
            data,
            split,
            weights,
            sources,
            out,
        } => {
            let cfg = cfg.load()?;
            let active = parse_set(&modalities)?;
            let frames = read_dataset(&data.join(&split))?;
            let mut model = match (&weights, stage) {
                (Some(w), _) => Model::load(w)?,
                (None, Stage::Pretrain) => Model::new(&cfg.model)?,
                (None, Stage::Fuse) => return Err(Error::MissingWeights("the fuse stage needs --weights from the pretrain stage".into())),
            };
            let inputs = experiment::prepare(&frames, &model.cfg);
            let reports = match stage {
                Stage::Pretrain => active
                    .iter()
                    .map(|&m| pretrain(&mut model, m, &inputs, &cfg.train))
                    .collect::<Result<Vec<_>>>()?,
                Stage::Fuse => {
                    let sources = match sources {
                        Some(list) => list.iter().map(|s| PointSource::parse(s)).collect::<Result<Vec<_>>>()?,
                        None => cfg.fusion.point_sources.clone().unwrap_or_else(|| PointSource::defaults_for(&active)),
                    };
                    vec![fuse_train(&mut model, &active, &sources, &inputs, &cfg.train)?]
                }
            };
            model.save(&out)?;
            write_json(&out.join("train_report.json"), &reports)
        }
        Cmd::Infer {
            cfg,
            weights,
            data,
            modalities,
            out,
        } => {
            let cfg = cfg.load()?;
            let model = Model::load(&weights)?;
            let active = match modalities {
                Some(s) => parse_set(&s)?,
                None => default_set(&model)?,
            };
            let frames = read_dataset(&data)?;
            let inputs = experiment::prepare(&frames, &model.cfg);
            let detections = model.detect_all(&inputs, &active, &cfg.eval)?;
            write_json(
                &out.join("detections.json"),
                &Predictions {
                    modalities: Modality::set_name(&active),
                    detections,
                },
            )
        }
        Cmd::Eval { cfg, pred, gt, out } => {
            let cfg = cfg.load()?;
            let pred = if pred.is_dir() { pred.join("detections.json") } else { pred };
            let p: Predictions = read_json(&pred)?;
            let frames = read_dataset(&gt)?;
            let truth: Vec<GroundTruth> = frames
                .iter()
                .flat_map(|f| {
                    let counts = f.lidar_points_per_box();
                    f.scene.boxes.iter().zip(counts).map(move |(b, n)| GroundTruth {
                        bbox: *b,
                        frame_id: f.frame_id,
                        lidar_points: Some(n),
                    })
                })
                .collect();
            let mut report = map_summary(&p.detections, &truth, &cfg.eval)?;
            report.label = p.modalities;
            report.config_hash = cfg.hash();
            report.seed = cfg.data.seed;
            write_json(&out.join("report.json"), &report)
        }
        Cmd::Ablate {
            cfg,
            suite,
            data,
            weights,
            out,
        } => {
            let cfg = cfg.load()?;
            let data = data.as_deref();
            let load = |name: &str| -> Result<_> { Ok(experiment::prepare(&experiment::load_split(&cfg, data, name)?, &cfg.model)) };
            let train = load("train")?;
            let mut zoo = match &weights {
                Some(w) => {
                    let base = Model::load(w)?;
                    if base.cfg != cfg.model {
                        return Err(Error::config("model", format!("differs from the model stored in {}", w.display())));
                    }
                    Zoo::from_base(&cfg, train, base)
                }
                None => Zoo::pretrain(&cfg, train)?,
            };
            let report_path = out.join("report.json");
            match suite {
                Suite::ModalityGrid => write_json(&report_path, &experiment::modality_grid(&mut zoo, &load("val")?)?)?,
                Suite::Weather => write_json(
                    &report_path,
                    &experiment::weather(&mut zoo, &load("val_nice")?, &load("val_bad")?, &["L", "LC", "LCR"])?,
                )?,
                Suite::PointDensity => write_json(&report_path, &experiment::point_density(&mut zoo, &load("val")?, &["L", "LC"])?)?,
                Suite::CrPoints => write_json(&report_path, &experiment::cr_points(&mut zoo, &load("val")?)?)?,
                Suite::Faraway => write_json(
                    &report_path,
                    &experiment::faraway(&mut zoo, &load(&cfg.faraway.split)?, &["L", "LC"])?,
                )?,
            }
            zoo.save(&out.join("models"))
        }
        Cmd::Plot {
            report,
            weights,
            data,
            modalities,
            frames,
            out,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            match (report, weights, data) {
                (Some(r), _, _) => plot_report(&r, &out),
                (None, Some(w), Some(d)) => plot_heatmaps(&w, &d, modalities.as_deref(), frames.as_deref(), &out),
                _ => Err(Error::InvalidArgument("plot needs --report, or --weights with --data".into())),
            }
        }
    }
}

/// Collects every evaluation report inside an arbitrary report document.
fn find_reports(v: &serde_json::Value, out: &mut Vec<EvalReport>) {
    if let Ok(r) = serde_json::from_value::<EvalReport>(v.clone()) {
        out.push(r);
        return;
    }
    match v {
        serde_json::Value::Array(a) => a.iter().for_each(|x| find_reports(x, out)),
        serde_json::Value::Object(o) => o.values().for_each(|x| find_reports(x, out)),
        _ => {}
    }
}

fn write_curves(out: &Path, stem: &str, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let csv = out.join(format!("{stem}.csv"));
    std::fs::write(&csv, curves_csv(series)).map_err(|e| Error::io(&csv, e))?;
    let svg = out.join(format!("{stem}.svg"));
    std::fs::write(&svg, curves_svg(title, x_label, y_label, series)).map_err(|e| Error::io(&svg, e))
}

fn plot_report(path: &Path, out: &Path) -> Result<()> {
    let value: serde_json::Value = read_json(path)?;
    let mut reports = Vec::new();
    find_reports(&value, &mut reports);
    if reports.is_empty() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: "no evaluation reports found".into(),
        });
    }
    for class in ClassId::ALL {
        let mut range = Vec::new();
        let mut recall = Vec::new();
        for r in &reports {
            let Some(c) = r.class(class) else { continue };
            range.push(Series {
                label: r.label.clone(),
                points: c.range_ap.iter().map(|b| ((b.lo + b.hi) / 2.0, b.ap)).collect(),
            });
            if let Some(bins) = &c.recall_vs_points {
                recall.push(Series {
                    label: r.label.clone(),
                    points: bins.iter().map(|b| (b.lo as f64, b.recall)).collect(),
                });
            }
        }
        let name = format!("{class:?}").to_lowercase();
        write_curves(out, &format!("range_ap_{name}"), &format!("AP vs range ({name})"), "range bin center (m)", "AP", &range)?;
        if !recall.is_empty() {
            write_curves(
                out,
                &format!("recall_points_{name}"),
                &format!("recall vs lidar points ({name})"),
                "lidar points (bin lower edge)",
                "recall",
                &recall,
            )?;
        }
    }
    Ok(())
}

fn plot_heatmaps(weights: &Path, data: &Path, modalities: Option<&str>, frames: Option<&[u64]>, out: &Path) -> Result<()> {
    let model = Model::load(weights)?;
    let active = match modalities {
        Some(s) => parse_set(s)?,
        None => default_set(&model)?,
    };
    let all = read_dataset(data)?;
    let wanted: Vec<_> = match frames {
        Some(ids) => ids
            .iter()
            .map(|id| {
                all.iter()
                    .find(|f| f.frame_id == *id)
                    .ok_or_else(|| Error::InvalidArgument(format!("frame {id} is not in {}", data.display())))
            })
            .collect::<Result<_>>()?,
        None => all.iter().take(1).collect(),
    };
    let eval = bevfuse::eval::EvalConfig::default();
    for f in wanted {
        let inp = bevfuse::fusion::FrameInputs::new(f, &model.cfg);
        let res = model.infer(&inp, &active, &eval)?;
        let Some(dense) = res.dense else {
            return Err(Error::InvalidArgument("the camera-only detector has no BEV output to draw".into()));
        };
        let gt: Vec<_> = ground_truth(std::slice::from_ref(&inp)).into_iter().map(|g| g.bbox).collect();
        let img = objectness_heatmap(&dense.scores(), &model.cfg.grid, &gt)?;
        img.write_ppm(&out.join(format!("heatmap_{}_{:06}.ppm", Modality::set_name(&active), f.frame_id)))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bevfuse: error: {e}");
            ExitCode::FAILURE
        }
    }
}
