use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::{camera_detections, camera_pseudo_points, CameraPointConfig, CAMERA_REG};
use super::head::{decode_dense, DenseOutput, DetectionHead, HeadCache, REG_CHANNELS};
use super::scatter::{scatter_index, scatter_mean, ScatterIndex};
use super::{Calibration, PointSource, PseudoPoint};
use crate::encoders::{
    camera_input, encode_occupancy, BevFpn, BevFpnConfig, Blend, BlendConfig, CameraFpn, CameraFpnConfig, Modality, OccupancyConfig,
    PillarConfig, PillarGrid, PillarNet,
};
use crate::error::{Error, Result};
use crate::eval::{nms_bev, score_order, Detection, EvalConfig, GroundTruth};
use crate::geometry::GridSpec;
use crate::nn::layers::StackCache;
use crate::nn::{resize_bilinear, Conv, ConvCache, ConvStack, Group, ParamStore, Tensor};
use crate::sim::{Box3D, ClassId, LidarScan, RadarScan, SensorFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Lidar BEV grid; `scale` is the shared output scale `S`.
    pub grid: GridSpec,
    /// Radar pillar cell size in meters.
    pub radar_cell: f64,
    pub occupancy: OccupancyConfig,
    pub lidar_fpn: BevFpnConfig,
    pub pillars: PillarConfig,
    pub radar_fpn: BevFpnConfig,
    pub camera_fpn: CameraFpnConfig,
    pub blend: BlendConfig,
    pub camera_head_hidden: usize,
    pub align_hidden: usize,
    /// Number of 3x3 layers after the leading 1x1 in each alignment stack.
    pub align_n3: usize,
    pub head_hidden: usize,
    pub head_n3: usize,
    /// Initial foreground probability of every classification output.
    pub prior_pi: f64,
    pub camera_points: CameraPointConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid: GridSpec {
                x_min: 0.0,
                y_min: -20.0,
                cell_size: 0.25,
                nx: 280,
                ny: 160,
                scale: 0.5,
            },
            radar_cell: 0.5,
            occupancy: OccupancyConfig::default(),
            lidar_fpn: BevFpnConfig {
                stages: vec![16, 32, 64],
                out_channels: 32,
                out_stage: 0,
            },
            pillars: PillarConfig::default(),
            radar_fpn: BevFpnConfig {
                stages: vec![32, 48],
                out_channels: 32,
                out_stage: 1,
            },
            camera_fpn: CameraFpnConfig::default(),
            blend: BlendConfig::default(),
            camera_head_hidden: 32,
            align_hidden: 96,
            align_n3: 4,
            head_hidden: 32,
            head_n3: 3,
            prior_pi: 0.01,
            camera_points: CameraPointConfig::default(),
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate().map_err(|e| Error::config("model.grid", e.to_string()))?;
        self.occupancy.validate()?;
        self.lidar_fpn.validate("model.lidar_fpn")?;
        self.radar_fpn.validate("model.radar_fpn")?;
        self.camera_fpn.validate()?;
        if (self.lidar_fpn.out_scale() - self.grid.scale).abs() > 1e-12 {
            return Err(Error::config(
                "model.lidar_fpn.out_stage",
                format!("output scale {} differs from grid scale {}", self.lidar_fpn.out_scale(), self.grid.scale),
            ));
        }
        if self.radar_fpn.out_channels != self.lidar_fpn.out_channels {
            return Err(Error::config("model.radar_fpn.out_channels", "must equal the lidar K_bev so the heads are interchangeable"));
        }
        self.radar_grid()?;
        if self.blend.z_div == 0 || self.blend.channels == 0 {
            return Err(Error::config("model.blend", "z_div and channels must be positive"));
        }
        for (key, v) in [
            ("model.camera_head_hidden", self.camera_head_hidden),
            ("model.align_hidden", self.align_hidden),
            ("model.head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(self.prior_pi > 0.0 && self.prior_pi < 1.0) {
            return Err(Error::config("model.prior_pi", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn k_bev(&self) -> usize {
        self.lidar_fpn.out_channels
    }

    /// Radar pillar grid over the lidar grid's extent; its `scale` is the
    /// radar FPN output scale.
    pub fn radar_grid(&self) -> Result<GridSpec> {
        let ratio = self.radar_cell / self.grid.cell_size;
        let nx = self.grid.nx as f64 / ratio;
        let ny = self.grid.ny as f64 / ratio;
        if !(ratio > 0.0) || (nx - nx.round()).abs() > 1e-9 || (ny - ny.round()).abs() > 1e-9 {
            return Err(Error::config("model.radar_cell", "the lidar extent must be a whole number of radar cells"));
        }
        Ok(GridSpec {
            cell_size: self.radar_cell,
            nx: nx.round() as usize,
            ny: ny.round() as usize,
            scale: self.radar_fpn.out_scale(),
            ..self.grid
        })
    }

    pub fn camera_scale(&self) -> f64 {
        1.0 / self.blend.z_div as f64
    }

    /// The same model on a different grid with identical cell size and output
    /// scale (e.g. a longer range for evaluation beyond the training extent).
    pub fn with_extent(&self, x_min: f64, y_min: f64, nx: usize, ny: usize) -> ModelConfig {
        ModelConfig {
            grid: GridSpec {
                x_min,
                y_min,
                nx,
                ny,
                ..self.grid
            },
            ..self.clone()
        }
    }
}

/// One frame prepared for the networks.
#[derive(Clone, Debug)]
pub struct FrameInputs {
    pub frame_id: u64,
    pub lidar: LidarScan,
    pub radar: RadarScan,
    /// Camera input tensor `(1, H, W, 3 or 5)`.
    pub image: Tensor,
    pub calib: Calibration,
    pub gt: Vec<Box3D>,
    /// Lidar returns inside each ground-truth box.
    pub gt_lidar_points: Vec<usize>,
}

impl FrameInputs {
    pub fn new(frame: &SensorFrame, cfg: &ModelConfig) -> Self {
        FrameInputs {
            frame_id: frame.frame_id,
            lidar: frame.lidar.clone(),
            radar: frame.radar.clone(),
            image: camera_input(&frame.camera, cfg.camera_fpn.coord_channels),
            calib: Calibration {
                intrinsics: frame.camera.intrinsics,
                cam_from_ego: frame.camera.cam_from_ego,
            },
            gt: frame.scene.boxes.clone(),
            gt_lidar_points: frame.lidar_points_per_box(),
        }
    }

    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.gt
            .iter()
            .zip(&self.gt_lidar_points)
            .map(|(b, &n)| GroundTruth {
                bbox: *b,
                frame_id: self.frame_id,
                lidar_points: Some(n),
            })
            .collect()
    }
}

/// Which modalities a fusion model combines and which points carry camera
/// features into BEV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSetup {
    pub modalities: Vec<Modality>,
    pub sources: Vec<PointSource>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    pretrained: Vec<Modality>,
    fusion: Option<FusionSetup>,
}

/// Frozen per-frame inputs of the fusion layers.
#[derive(Clone, Debug, Default)]
pub struct FusionFeatures {
    pub lidar: Option<Tensor>,
    pub radar: Option<Tensor>,
    /// Image features with their point-driven scatter index.
    pub camera: Option<(Tensor, ScatterIndex)>,
}

pub(crate) struct FuseCache {
    align: Vec<(Modality, StackCache)>,
    scatter: Option<ConvCache<f32>>,
    head: HeadCache,
}

/// Detector output for one frame.
#[derive(Clone, Debug)]
pub struct Inference {
    /// BEV dense output (absent for the camera-only detector).
    pub dense: Option<DenseOutput>,
    /// Image-plane camera head output, when the camera branch ran.
    pub camera_dense: Option<DenseOutput>,
    /// Detections after NMS.
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub lidar_fpn: BevFpn,
    pub lidar_head: DetectionHead,
    pub pillar_net: PillarNet,
    pub radar_fpn: BevFpn,
    pub radar_head: DetectionHead,
    pub camera_fpn: CameraFpn,
    pub blend: Blend,
    pub camera_head: DetectionHead,
    pub scatter_conv: Conv,
    pub align: Vec<(Modality, ConvStack)>,
    pub head: DetectionHead,
    /// Branches whose single-modality detector has been trained.
    pub pretrained: Vec<Modality>,
    pub fusion: Option<FusionSetup>,
}

const MAX_DETECTIONS: usize = 100;

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut ps = ParamStore::new();
        let n_cls = ClassId::ALL.len();
        let k_bev = cfg.k_bev();
        let lidar_fpn = BevFpn::new(&mut ps, "lidar_fpn", Group::LidarFpn, cfg.occupancy.bins, &cfg.lidar_fpn, &mut rng);
        let lidar_head = DetectionHead::new(
            &mut ps,
            "lidar_head",
            Group::LidarHead,
            k_bev,
            cfg.head_hidden,
            cfg.head_n3,
            n_cls,
            REG_CHANNELS,
            cfg.prior_pi,
            &mut rng,
        );
        let pillar_net = PillarNet::new(&mut ps, "radar_fpn.pillar", Group::RadarFpn, &cfg.pillars, &mut rng);
        let radar_fpn = BevFpn::new(&mut ps, "radar_fpn", Group::RadarFpn, cfg.pillars.out, &cfg.radar_fpn, &mut rng);
        let radar_head = DetectionHead::new(
            &mut ps,
            "radar_head",
            Group::RadarHead,
            k_bev,
            cfg.head_hidden,
            cfg.head_n3,
            n_cls,
            REG_CHANNELS,
            cfg.prior_pi,
            &mut rng,
        );
        let camera_fpn = CameraFpn::new(&mut ps, "camera_fpn", Group::CameraFpn, &cfg.camera_fpn, &mut rng);
        let blend_in = cfg.camera_fpn.out_channels().iter().sum();
        let blend = Blend::new(&mut ps, "camera_fpn.blend", Group::CameraFpn, blend_in, &cfg.blend, &mut rng);
        let camera_head = DetectionHead::new(
            &mut ps,
            "camera_head",
            Group::CameraHead,
            cfg.blend.channels,
            cfg.camera_head_hidden,
            1,
            n_cls,
            CAMERA_REG,
            cfg.prior_pi,
            &mut rng,
        );
        let scatter_conv = Conv::new(&mut ps, "align_c.scatter", Group::AlignC, 1, cfg.blend.channels, k_bev, 1, false, &mut rng);
        let align = [(Modality::L, Group::AlignL, "align_l"), (Modality::C, Group::AlignC, "align_c"), (Modality::R, Group::AlignR, "align_r")]
            .into_iter()
            .map(|(m, g, name)| (m, ConvStack::blend(&mut ps, name, g, k_bev, cfg.align_hidden, k_bev, cfg.align_n3, &mut rng)))
            .collect();
        let head = DetectionHead::new(
            &mut ps,
            "head",
            Group::Head,
            k_bev,
            cfg.head_hidden,
            cfg.head_n3,
            n_cls,
            REG_CHANNELS,
            cfg.prior_pi,
            &mut rng,
        );
        Ok(Model {
            cfg: cfg.clone(),
            params: ps,
            lidar_fpn,
            lidar_head,
            pillar_net,
            radar_fpn,
            radar_head,
            camera_fpn,
            blend,
            camera_head,
            scatter_conv,
            align,
            head,
            pretrained: Vec::new(),
            fusion: None,
        })
    }

    /// The same weights evaluated on another grid (see [`ModelConfig::with_extent`]).
    pub fn with_config(&self, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut m = self.clone();
        m.cfg = cfg;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = ModelMeta {
            config: self.cfg.clone(),
            pretrained: self.pretrained.clone(),
            fusion: self.fusion.clone(),
        };
        self.params.save(dir, serde_json::to_value(meta).expect("model metadata serializes"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = ParamStore::read_manifest(dir)?;
        let meta: ModelMeta = serde_json::from_value(manifest.model).map_err(|e| Error::Malformed {
            path: dir.join("manifest.json"),
            msg: format!("model metadata: {e}"),
        })?;
        let mut m = Model::new(&meta.config)?;
        m.params.load_into(dir)?;
        m.pretrained = meta.pretrained;
        m.fusion = meta.fusion;
        Ok(m)
    }

    pub fn align_stack(&self, m: Modality) -> &ConvStack {
        &self.align.iter().find(|(x, _)| *x == m).expect("every modality has a stack").1
    }

    pub fn out_dims(&self) -> Result<(usize, usize)> {
        self.cfg.grid.dims(self.cfg.grid.scale)
    }

    pub fn occupancy(&self, inp: &FrameInputs) -> Tensor {
        encode_occupancy(&inp.lidar, &self.cfg.grid, &self.cfg.occupancy).tensor
    }

    pub fn pillars(&self, inp: &FrameInputs) -> Result<PillarGrid> {
        Ok(PillarGrid::build(&inp.radar, &self.cfg.radar_grid()?))
    }

    /// `F^L_bev` on the output raster.
    pub fn lidar_features(&self, inp: &FrameInputs) -> Result<Tensor> {
        self.lidar_fpn.infer(&self.params, &self.occupancy(inp))
    }

    /// `F^R_bev`, upscaled to the lidar output raster.
    pub fn radar_features(&self, inp: &FrameInputs) -> Result<Tensor> {
        let (pmap, _) = self.pillar_net.forward(&self.params, &self.pillars(inp)?)?;
        let small = self.radar_fpn.infer(&self.params, &pmap)?;
        let (rows, cols) = self.out_dims()?;
        resize_bilinear(&small, rows, cols)
    }

    /// `F^C` and the camera head's dense output.
    pub fn camera_features(&self, inp: &FrameInputs) -> Result<(Tensor, DenseOutput)> {
        let (maps, _) = self.camera_fpn.forward(&self.params, &inp.image)?;
        let refs: Vec<&Tensor> = maps.iter().collect();
        let z = self.cfg.camera_scale();
        let (h, w) = (inp.image.h(), inp.image.w());
        let (f_c, _) = self.blend.forward(&self.params, &refs, h / self.cfg.blend.z_div, w / self.cfg.blend.z_div)?;
        debug_assert_eq!(f_c.h() as f64, h as f64 * z);
        let dense = self.camera_head.infer(&self.params, &f_c)?;
        Ok((f_c, dense))
    }

    pub fn pseudo_points(&self, inp: &FrameInputs, sources: &[PointSource], camera_dense: Option<&DenseOutput>) -> Result<Vec<PseudoPoint>> {
        let mut out = Vec::new();
        for s in sources {
            match s {
                PointSource::Lidar => out.extend(inp.lidar.points.iter().map(|p| PseudoPoint {
                    position: [p.x as f64, p.y as f64, p.z as f64],
                    source: PointSource::Lidar,
                    confidence: 1.0,
                })),
                PointSource::Radar => out.extend(inp.radar.points.iter().map(|p| PseudoPoint {
                    position: [p.x as f64, p.y as f64, p.z as f64],
                    source: PointSource::Radar,
                    confidence: 1.0,
                })),
                PointSource::CameraCentroid => {
                    let dense = camera_dense.ok_or_else(|| Error::InvalidArgument("camera centroids need the camera head output".into()))?;
                    out.extend(camera_pseudo_points(dense, &inp.calib, self.cfg.camera_scale(), &self.cfg.camera_points)?);
                }
            }
        }
        Ok(out)
    }

    /// Frozen branch outputs needed by a fusion model over `active`.
    pub fn fusion_features(&self, inp: &FrameInputs, active: &[Modality], sources: &[PointSource]) -> Result<FusionFeatures> {
        let mut f = FusionFeatures::default();
        if active.contains(&Modality::L) {
            f.lidar = Some(self.lidar_features(inp)?);
        }
        if active.contains(&Modality::R) {
            f.radar = Some(self.radar_features(inp)?);
        }
        if active.contains(&Modality::C) {
            let (f_c, dense) = self.camera_features(inp)?;
            let points = self.pseudo_points(inp, sources, Some(&dense))?;
            let idx = scatter_index(&points, &inp.calib, self.cfg.camera_scale(), &self.cfg.grid)?;
            f.camera = Some((f_c, idx));
        }
        Ok(f)
    }

    /// Alignment, additive fusion and the fusion head. Returns the raw head
    /// output (`n_cls + 6` channels).
    pub(crate) fn fuse_forward(&self, f: &FusionFeatures, active: &[Modality]) -> Result<(Tensor, FuseCache)> {
        let mut sum: Option<Tensor> = None;
        let mut align = Vec::new();
        let mut scatter = None;
        for m in Modality::ALL {
            if !active.contains(&m) {
                continue;
            }
            let input = match m {
                Modality::L => f.lidar.clone().ok_or_else(|| Error::InvalidArgument("lidar features missing".into()))?,
                Modality::R => f.radar.clone().ok_or_else(|| Error::InvalidArgument("radar features missing".into()))?,
                Modality::C => {
                    let (f_c, idx) = f.camera.as_ref().ok_or_else(|| Error::InvalidArgument("camera features missing".into()))?;
                    let mean = scatter_mean(f_c, idx)?;
                    let (s, sc) = self.scatter_conv.forward(&self.params, &mean)?;
                    scatter = Some(sc);
                    s
                }
            };
            let (a, cache) = self.align_stack(m).forward(&self.params, &input)?;
            align.push((m, cache));
            match &mut sum {
                Some(acc) => acc.add_assign(&a)?,
                None => sum = Some(a),
            }
        }
        let fused = sum.ok_or_else(|| Error::InvalidArgument("no active modality".into()))?;
        let (out, head) = self.head.forward(&self.params, &fused)?;
        Ok((out, FuseCache { align, scatter, head }))
    }

    pub(crate) fn fuse_backward(&self, grads: &mut crate::nn::Grads, cache: &FuseCache, d_out: &Tensor) -> Result<()> {
        let d_fused = self.head.backward(&self.params, grads, &cache.head, d_out, true)?.expect("requested");
        for (m, c) in &cache.align {
            let need = *m == Modality::C;
            let dx = self.align_stack(*m).backward(&self.params, grads, c, &d_fused, need)?;
            if let (Some(dx), Some(sc)) = (dx, &cache.scatter) {
                self.scatter_conv.backward(&self.params, grads, sc, &dx, false)?;
            }
        }
        Ok(())
    }

    fn finish(&self, mut dets: Vec<Detection>, eval: &EvalConfig) -> Vec<Detection> {
        dets.retain(|d| d.bbox.center.iter().chain(&d.bbox.size).all(|v| v.is_finite()));
        let mut kept = Vec::new();
        for class in ClassId::ALL {
            let of: Vec<Detection> = dets.iter().filter(|d| d.class_id() == class).copied().collect();
            kept.extend(nms_bev(&of, eval.nms_dist_for(class)));
        }
        let order = score_order(&kept);
        order.into_iter().take(MAX_DETECTIONS).map(|i| kept[i]).collect()
    }

    /// Runs the detector for `modalities`: a single modality selects that
    /// branch's own detector, several select the trained fusion model.
    pub fn infer(&self, inp: &FrameInputs, modalities: &[Modality], eval: &EvalConfig) -> Result<Inference> {
        let grid = &self.cfg.grid;
        let n_cls = ClassId::ALL.len();
        match modalities {
            [Modality::L] => {
                let dense = self.lidar_head.infer(&self.params, &self.lidar_features(inp)?)?;
                let dets = decode_dense(&dense, grid, inp.frame_id, eval.score_thresh)?;
                Ok(Inference {
                    detections: self.finish(dets, eval),
                    dense: Some(dense),
                    camera_dense: None,
                })
            }
            [Modality::R] => {
                let dense = self.radar_head.infer(&self.params, &self.radar_features(inp)?)?;
                let dets = decode_dense(&dense, grid, inp.frame_id, eval.score_thresh)?;
                Ok(Inference {
                    detections: self.finish(dets, eval),
                    dense: Some(dense),
                    camera_dense: None,
                })
            }
            [Modality::C] => {
                let (_, cd) = self.camera_features(inp)?;
                let dets = camera_detections(&cd, &inp.calib, self.cfg.camera_scale(), inp.frame_id, eval.score_thresh)?;
                Ok(Inference {
                    detections: self.finish(dets, eval),
                    dense: None,
                    camera_dense: Some(cd),
                })
            }
            _ => {
                let setup = self.fusion.as_ref().ok_or_else(|| Error::MissingWeights("model has no trained fusion layers".into()))?;
                if setup.modalities != modalities {
                    return Err(Error::InvalidArgument(format!(
                        "model was fused for {}, asked for {}",
                        Modality::set_name(&setup.modalities),
                        Modality::set_name(modalities)
                    )));
                }
                let f = self.fusion_features(inp, modalities, &setup.sources)?;
                let (out, _) = self.fuse_forward(&f, modalities)?;
                let dense = DenseOutput::from_head(&out, n_cls)?;
                let dets = decode_dense(&dense, grid, inp.frame_id, eval.score_thresh)?;
                Ok(Inference {
                    detections: self.finish(dets, eval),
                    dense: Some(dense),
                    camera_dense: None,
                })
            }
        }
    }

    /// Detections for every frame, in frame order.
    pub fn detect_all(&self, frames: &[FrameInputs], modalities: &[Modality], eval: &EvalConfig) -> Result<Vec<Detection>> {
        let per: Vec<Vec<Detection>> = frames
            .par_iter()
            .map(|f| self.infer(f, modalities, eval).map(|i| i.detections))
            .collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    }
}

/// Ground truth of a set of frames, in frame order.
pub fn ground_truth(frames: &[FrameInputs]) -> Vec<GroundTruth> {
    frames.iter().flat_map(FrameInputs::ground_truth).collect()
}
