use rand::Rng;

use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::GridSpec;
use crate::nn::ops::{concat_channels, concat_channels_backward, sigmoid_scalar};
use crate::nn::{Conv, ConvCache, Grads, Group, ParamStore, Tensor};
use crate::sim::{Box3D, ClassId};

/// `(dx, dy, log l/prior, log w/prior, sin yaw, cos yaw)`; offsets are in
/// output cells.
pub const REG_CHANNELS: usize = 6;

/// Log size ratios are clamped to this magnitude before `exp` when decoding.
const MAX_LOG_RATIO: f32 = 5.0;

/// Dense per-cell outputs over the fused BEV raster.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutput {
    pub cls_logits: Tensor,
    pub reg: Tensor,
}

impl DenseOutput {
    pub fn from_head(out: &Tensor, n_cls: usize) -> Result<Self> {
        let reg_c = out.c().checked_sub(n_cls).ok_or_else(|| Error::Shape("head output narrower than the class count".into()))?;
        let mut parts = concat_channels_backward(out, &[n_cls, reg_c])?;
        let reg = parts.pop().expect("two parts");
        let cls_logits = parts.pop().expect("two parts");
        Ok(DenseOutput { cls_logits, reg })
    }

    /// Sigmoid scores, same shape as the logits.
    pub fn scores(&self) -> Tensor {
        self.cls_logits.map(sigmoid_scalar)
    }

    pub fn concat(&self) -> Result<Tensor> {
        concat_channels(&[&self.cls_logits, &self.reg])
    }
}

/// A few 3x3 convs followed by a 1x1 projection to `n_cls + n_reg` channels.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub convs: Vec<Conv>,
    pub out: Conv,
    pub n_cls: usize,
}

pub struct HeadCache {
    convs: Vec<ConvCache<f32>>,
    out: ConvCache<f32>,
}

impl DetectionHead {
    /// The classification biases start at `-ln((1 - pi) / pi)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        group: Group,
        cin: usize,
        hidden: usize,
        n3: usize,
        n_cls: usize,
        n_reg: usize,
        prior_pi: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut convs = Vec::with_capacity(n3);
        let mut c = cin;
        for k in 0..n3 {
            convs.push(Conv::new(store, &format!("{prefix}.c{k}"), group, 3, c, hidden, 1, true, rng));
            c = hidden;
        }
        let out = Conv::new(store, &format!("{prefix}.out"), group, 1, c, n_cls + n_reg, 1, false, rng);
        let b = (-((1.0 - prior_pi) / prior_pi).ln()) as f32;
        for v in &mut store.value_mut(out.bias).data_mut()[..n_cls] {
            *v = b;
        }
        DetectionHead { convs, out, n_cls }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut cur: Option<Tensor> = None;
        for c in &self.convs {
            let (y, cache) = c.forward(ps, cur.as_ref().unwrap_or(x))?;
            caches.push(cache);
            cur = Some(y);
        }
        let (y, out) = self.out.forward(ps, cur.as_ref().unwrap_or(x))?;
        Ok((y, HeadCache { convs: caches, out }))
    }

    pub fn infer(&self, ps: &ParamStore, x: &Tensor) -> Result<DenseOutput> {
        DenseOutput::from_head(&self.forward(ps, x)?.0, self.n_cls)
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &HeadCache, dy: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let want = need_dx || !self.convs.is_empty();
        let Some(mut g) = self.out.backward(ps, grads, &cache.out, dy, want)? else {
            return Ok(None);
        };
        for (k, (c, cc)) in self.convs.iter().zip(&cache.convs).enumerate().rev() {
            match c.backward(ps, grads, cc, &g, need_dx || k > 0)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}

/// Decodes every cell and class whose sigmoid score reaches `score_thresh`.
/// Boxes sit on the ground with the class prior height.
pub fn decode_dense(dense: &DenseOutput, grid: &GridSpec, frame_id: u64, score_thresh: f64) -> Result<Vec<Detection>> {
    let (rows, cols) = grid.dims(grid.scale)?;
    let [_, h, w, _] = dense.cls_logits.shape();
    if (h, w) != (rows, cols) || dense.reg.shape() != [1, rows, cols, REG_CHANNELS] {
        return Err(Error::Shape(format!(
            "dense output {:?}/{:?} does not match grid {rows}x{cols}",
            dense.cls_logits.shape(),
            dense.reg.shape()
        )));
    }
    let cell = grid.cell_at(grid.scale);
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let logits = dense.cls_logits.pixel(0, i, j);
            for (k, &z) in logits.iter().enumerate() {
                let score = sigmoid_scalar(z as f64);
                if score < score_thresh {
                    continue;
                }
                let class = ClassId::from_index(k).ok_or_else(|| Error::Shape(format!("no class for channel {k}")))?;
                let r = dense.reg.pixel(0, i, j);
                let (cx, cy) = grid.cell_center(i, j, grid.scale);
                let (pl, pw) = class.prior_size();
                let ph = class.prior_height();
                out.push(Detection {
                    bbox: Box3D {
                        center: [cx + r[0] as f64 * cell, cy + r[1] as f64 * cell, ph / 2.0],
                        size: [
                            pl * (r[2].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO) as f64).exp(),
                            pw * (r[3].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO) as f64).exp(),
                            ph,
                        ],
                        yaw: (r[4] as f64).atan2(r[5] as f64),
                        class_id: class,
                        speed: 0.0,
                    },
                    score,
                    frame_id,
                });
            }
        }
    }
    Ok(out)
}

/// Runs the head on a BEV map and decodes it.
pub fn head_forward_decode(
    f: &FeatureMap,
    head: &DetectionHead,
    ps: &ParamStore,
    score_thresh: f64,
    frame_id: u64,
) -> Result<(DenseOutput, Vec<Detection>)> {
    let grid = f
        .grid()
        .ok_or_else(|| Error::GridMismatch("the detection head needs a BEV map".into()))?;
    let dense = head.infer(ps, &f.tensor)?;
    let dets = decode_dense(&dense, grid, frame_id, score_thresh)?;
    Ok((dense, dets))
}
