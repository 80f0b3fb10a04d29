use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::assign_camera_targets;
use super::head::DenseOutput;
use super::model::{FrameInputs, FusionFeatures, FusionSetup, Model};
use super::targets::{assign_targets, total_loss, LossWeights};
use super::PointSource;
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::nn::{adam_step, resize_bilinear, resize_bilinear_backward, AdamConfig, AdamState, ConvStack, Grads, Group, ParamStore};
use crate::sim::ClassId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub fuse_epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 4,
            fuse_epochs: 2,
            batch_size: 2,
            seed: 0,
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::config("train.adam.lr", "must be positive and finite"));
        }
        if !(self.loss.w_cls >= 0.0 && self.loss.w_reg >= 0.0) {
            return Err(Error::config("train.loss", "weights must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// `"pretrain"` or `"fuse"`.
    pub stage: String,
    pub modalities: Vec<Modality>,
    pub epochs: usize,
    pub steps: usize,
    /// Mean loss over the training frames before the first step, then the
    /// mean batch loss of every epoch.
    pub loss_trace: Vec<f64>,
}

impl StageReport {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace starts with the initial loss")
    }
}

fn groups_of(m: Modality) -> [Group; 2] {
    match m {
        Modality::L => [Group::LidarFpn, Group::LidarHead],
        Modality::R => [Group::RadarFpn, Group::RadarHead],
        Modality::C => [Group::CameraFpn, Group::CameraHead],
    }
}

fn freeze_all_but(ps: &mut ParamStore, trainable: &[Group]) {
    for g in ps.groups() {
        ps.set_trainable(g, trainable.contains(&g));
    }
}

fn add_grads(a: &mut Grads, b: &Grads) {
    for (x, y) in a.tensors.iter_mut().zip(&b.tensors) {
        x.add_assign(y).expect("same store");
    }
}

/// Loss and (when `grads` is given) gradients of one modality's own detector.
fn branch_loss(model: &Model, m: Modality, inp: &FrameInputs, w: &LossWeights, grads: Option<&mut Grads>) -> Result<f64> {
    let ps = &model.params;
    let n_cls = ClassId::ALL.len();
    match m {
        Modality::L => {
            let (outs, fc) = model.lidar_fpn.forward(ps, &model.occupancy(inp))?;
            let feat = outs.last().expect("fused output");
            let (y, hc) = model.lidar_head.forward(ps, feat)?;
            let targets = assign_targets(&inp.gt, &model.cfg.grid)?;
            let (lb, dy) = total_loss(&DenseOutput::from_head(&y, n_cls)?, &targets, w)?;
            if let Some(g) = grads {
                let df = model.lidar_head.backward(ps, g, &hc, &dy, true)?.expect("requested");
                model.lidar_fpn.backward(ps, g, &fc, &df, false)?;
            }
            Ok(lb.total)
        }
        Modality::R => {
            let (pmap, pc) = model.pillar_net.forward(ps, &model.pillars(inp)?)?;
            let (outs, fc) = model.radar_fpn.forward(ps, &pmap)?;
            let small = outs.last().expect("fused output");
            let (rows, cols) = model.out_dims()?;
            let feat = resize_bilinear(small, rows, cols)?;
            let (y, hc) = model.radar_head.forward(ps, &feat)?;
            let targets = assign_targets(&inp.gt, &model.cfg.grid)?;
            let (lb, dy) = total_loss(&DenseOutput::from_head(&y, n_cls)?, &targets, w)?;
            if let Some(g) = grads {
                let df = model.radar_head.backward(ps, g, &hc, &dy, true)?.expect("requested");
                let ds = resize_bilinear_backward(&df, small.shape())?;
                let dp = model.radar_fpn.backward(ps, g, &fc, &ds, true)?.expect("requested");
                model.pillar_net.backward(ps, g, &pc, &dp)?;
            }
            Ok(lb.total)
        }
        Modality::C => {
            let (maps, cc) = model.camera_fpn.forward(ps, &inp.image)?;
            let refs: Vec<&_> = maps.iter().collect();
            let z_div = model.cfg.blend.z_div;
            let (f_c, bc) = model.blend.forward(ps, &refs, inp.image.h() / z_div, inp.image.w() / z_div)?;
            let (y, hc) = model.camera_head.forward(ps, &f_c)?;
            let targets = assign_camera_targets(&inp.gt, &inp.calib, model.cfg.camera_scale())?;
            let (lb, dy) = total_loss(&DenseOutput::from_head(&y, n_cls)?, &targets, w)?;
            if let Some(g) = grads {
                let df = model.camera_head.backward(ps, g, &hc, &dy, true)?.expect("requested");
                let dmaps = model.blend.backward(ps, g, &bc, &df)?;
                model.camera_fpn.backward(ps, g, &cc, &dmaps)?;
            }
            Ok(lb.total)
        }
    }
}

fn fusion_loss(model: &Model, f: &FusionFeatures, inp: &FrameInputs, active: &[Modality], w: &LossWeights, grads: Option<&mut Grads>) -> Result<f64> {
    let (y, cache) = model.fuse_forward(f, active)?;
    let targets = assign_targets(&inp.gt, &model.cfg.grid)?;
    let (lb, dy) = total_loss(&DenseOutput::from_head(&y, ClassId::ALL.len())?, &targets, w)?;
    if let Some(g) = grads {
        model.fuse_backward(g, &cache, &dy)?;
    }
    Ok(lb.total)
}

/// Shared minibatch loop. `loss(model, k, grads)` evaluates frame `k`.
fn run_epochs<F>(model: &mut Model, n: usize, epochs: usize, cfg: &TrainConfig, salt: u64, loss: F) -> Result<(Vec<f64>, usize)>
where
    F: Fn(&Model, usize, Option<&mut Grads>) -> Result<f64> + Sync,
{
    if n == 0 {
        return Err(Error::InvalidArgument("no training frames".into()));
    }
    let initial: Vec<f64> = (0..n).into_par_iter().map(|k| loss(model, k, None)).collect::<Result<_>>()?;
    let mut trace = vec![initial.iter().sum::<f64>() / n as f64];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt);
    let mut adam = AdamState::new(&model.params);
    let mut steps = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let m: &Model = model;
            let parts: Vec<(f64, Grads)> = batch
                .par_iter()
                .map(|&k| {
                    let mut g = Grads::zeros_like(&m.params);
                    loss(m, k, Some(&mut g)).map(|l| (l, g))
                })
                .collect::<Result<_>>()?;
            let mut it = parts.into_iter();
            let (mut l_sum, mut grads) = it.next().expect("non-empty batch");
            for (l, g) in it {
                l_sum += l;
                add_grads(&mut grads, &g);
            }
            if !l_sum.is_finite() {
                return Err(Error::NonFinite(format!("training loss became {l_sum} at step {steps}")));
            }
            epoch_loss += l_sum;
            grads.scale(1.0 / batch.len() as f32);
            let norm = grads.global_norm();
            if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                grads.scale((cfg.grad_clip / norm) as f32);
            }
            adam_step(&mut model.params, &grads, &mut adam, &cfg.adam)?;
            steps += 1;
        }
        trace.push(epoch_loss / n as f64);
    }
    if !model.params.all_finite() {
        return Err(Error::NonFinite("parameters became non-finite during training".into()));
    }
    Ok((trace, steps))
}

/// Stage 1: trains one branch and its own detection head, everything else
/// frozen.
pub fn pretrain(model: &mut Model, modality: Modality, frames: &[FrameInputs], cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    freeze_all_but(&mut model.params, &groups_of(modality));
    let (loss_trace, steps) = run_epochs(model, frames.len(), cfg.pretrain_epochs, cfg, 0x5151 + modality as u64, |m, k, g| {
        branch_loss(m, modality, &frames[k], &cfg.loss, g)
    })?;
    if !model.pretrained.contains(&modality) {
        model.pretrained.push(modality);
        model.pretrained.sort();
    }
    Ok(StageReport {
        stage: "pretrain".into(),
        modalities: vec![modality],
        epochs: cfg.pretrain_epochs,
        steps,
        loss_trace,
    })
}

/// Makes `stack` pass its first `k` input channels through unchanged (the
/// aligned inputs are non-negative, so the ReLUs are transparent). Spare
/// hidden channels keep their random weights but do not reach the output.
/// Leaves the stack alone when it is narrower than `k`.
fn init_identity(ps: &mut ParamStore, stack: &ConvStack, k: usize) {
    let narrow = stack.layers.iter().any(|l| {
        let [_, _, cin, cout] = ps.value(l.weight).shape();
        cin < k || cout < k
    });
    if narrow {
        return;
    }
    for layer in &stack.layers {
        let w = ps.value_mut(layer.weight);
        let [kh, kw, cin, _] = w.shape();
        for c in 0..k {
            for t in 0..kh * kw {
                for i in 0..cin {
                    w.set(t / kw, t % kw, i, c, 0.0);
                }
            }
            w.set(kh / 2, kw / 2, c, c, 1.0);
        }
        let b = ps.value_mut(layer.bias);
        for c in 0..k {
            b.set(0, 0, 0, c, 0.0);
        }
    }
}

/// Zeroes the output layer so the stack contributes nothing until trained.
fn init_silent(ps: &mut ParamStore, stack: &ConvStack) {
    let last = stack.layers.last().expect("non-empty stack");
    ps.value_mut(last.weight).fill(0.0);
    ps.value_mut(last.bias).fill(0.0);
}

/// Stage 2: freezes every branch and trains the alignment stacks of
/// `active`, the camera scatter projection and the fusion head. The fusion
/// head starts from the lidar head when lidar is active, else the radar
/// head; that branch's alignment starts as the identity and the others start
/// silent, so training begins from the pretrained single-branch detector.
pub fn fuse_train(model: &mut Model, active: &[Modality], sources: &[PointSource], frames: &[FrameInputs], cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    let mut active = active.to_vec();
    active.sort();
    active.dedup();
    if active.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "fusion needs at least two modalities, got {}",
            Modality::set_name(&active)
        )));
    }
    for m in &active {
        if !model.pretrained.contains(m) {
            return Err(Error::MissingWeights(format!("branch {} has not been pretrained", m.letter())));
        }
    }
    if active.contains(&Modality::C) && sources.is_empty() {
        return Err(Error::InvalidArgument("camera fusion needs at least one point source".into()));
    }
    let from = if active.contains(&Modality::L) { "lidar_head." } else { "radar_head." };
    let src = model.params.clone();
    let copied = model.params.copy_from(&src, |name| name.strip_prefix(from).map(|rest| format!("head.{rest}")))?;
    debug_assert!(copied > 0);

    let primary = if active.contains(&Modality::L) { Modality::L } else { Modality::R };
    for m in &active {
        let stack = model.align_stack(*m).clone();
        if *m == primary {
            init_identity(&mut model.params, &stack, model.cfg.k_bev());
        } else {
            init_silent(&mut model.params, &stack);
        }
    }

    let mut groups = vec![Group::Head];
    for m in &active {
        groups.push(match m {
            Modality::L => Group::AlignL,
            Modality::C => Group::AlignC,
            Modality::R => Group::AlignR,
        });
    }
    freeze_all_but(&mut model.params, &groups);

    let features: Vec<FusionFeatures> = frames
        .par_iter()
        .map(|f| model.fusion_features(f, &active, sources))
        .collect::<Result<_>>()?;
    let (loss_trace, steps) = run_epochs(model, frames.len(), cfg.fuse_epochs, cfg, 0xF05E, |m, k, g| {
        fusion_loss(m, &features[k], &frames[k], &active, &cfg.loss, g)
    })?;
    model.fusion = Some(FusionSetup {
        modalities: active.clone(),
        sources: sources.to_vec(),
    });
    Ok(StageReport {
        stage: "fuse".into(),
        modalities: active,
        epochs: cfg.fuse_epochs,
        steps,
        loss_trace,
    })
}
