use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureMap, Modality};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::nn::layers::StackCache;
use crate::nn::ops::{concat_channels, concat_channels_backward};
use crate::nn::{resize_bilinear, resize_bilinear_backward, Conv, ConvCache, ConvStack, Grads, Group, ParamStore, Tensor};
use crate::sim::CameraImage;

/// Down-then-up BEV backbone: `stages[k]` channels at stride `2^(k+1)`, then
/// a top-down path with 1x1 laterals back to stage `out_stage`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevFpnConfig {
    pub stages: Vec<usize>,
    pub out_channels: usize,
    pub out_stage: usize,
}

impl BevFpnConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if self.stages.is_empty() || self.stages.contains(&0) || self.out_channels == 0 {
            return Err(Error::config(key, "stages and channels must be non-empty and positive"));
        }
        if self.out_stage >= self.stages.len() {
            return Err(Error::config(key, "out_stage must index a stage"));
        }
        Ok(())
    }

    /// Output resolution relative to the input raster.
    pub fn out_scale(&self) -> f64 {
        0.5f64.powi(self.out_stage as i32 + 1)
    }
}

fn check_ladder(x: &Tensor, levels: usize, what: &str) -> Result<()> {
    let m = 1usize << levels;
    if x.h() % m != 0 || x.w() % m != 0 || x.n() == 0 {
        return Err(Error::Shape(format!(
            "{what}: input {:?} is not divisible by {m} along both spatial axes",
            x.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BevFpn {
    down: Vec<Conv>,
    refine: Vec<Conv>,
    top: Conv,
    /// 1x1 laterals for stages `out_stage .. stages.len() - 1`.
    lateral: Vec<Conv>,
    out: Conv,
    out_stage: usize,
}

pub struct BevFpnCache {
    down: Vec<ConvCache<f32>>,
    refine: Vec<ConvCache<f32>>,
    top: ConvCache<f32>,
    lateral: Vec<ConvCache<f32>>,
    /// Shapes of the top-down maps `p_k` for `k = out_stage + 1 ..= last`.
    p_shapes: Vec<[usize; 4]>,
    out: ConvCache<f32>,
}

impl BevFpn {
    pub fn new(store: &mut ParamStore, prefix: &str, group: Group, cin: usize, cfg: &BevFpnConfig, rng: &mut impl Rng) -> Self {
        let mut down = Vec::new();
        let mut refine = Vec::new();
        let mut prev = cin;
        for (k, &c) in cfg.stages.iter().enumerate() {
            down.push(Conv::new(store, &format!("{prefix}.s{k}.down"), group, 3, prev, c, 2, true, rng));
            refine.push(Conv::new(store, &format!("{prefix}.s{k}.refine"), group, 3, c, c, 1, true, rng));
            prev = c;
        }
        let last = cfg.stages.len() - 1;
        let top = Conv::new(store, &format!("{prefix}.top"), group, 1, cfg.stages[last], cfg.out_channels, 1, false, rng);
        let lateral = (cfg.out_stage..last)
            .map(|k| Conv::new(store, &format!("{prefix}.lat{k}"), group, 1, cfg.stages[k], cfg.out_channels, 1, false, rng))
            .collect();
        let out = Conv::new(store, &format!("{prefix}.out"), group, 3, cfg.out_channels, cfg.out_channels, 1, true, rng);
        BevFpn {
            down,
            refine,
            top,
            lateral,
            out,
            out_stage: cfg.out_stage,
        }
    }

    /// Returns every stage output followed by the fused output map (last).
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Vec<Tensor>, BevFpnCache)> {
        check_ladder(x, self.down.len(), "BEV FPN")?;
        let mut levels: Vec<Tensor> = Vec::with_capacity(self.down.len() + 1);
        let mut down_c = Vec::new();
        let mut refine_c = Vec::new();
        for (d, r) in self.down.iter().zip(&self.refine) {
            let (a, ca) = d.forward(ps, levels.last().unwrap_or(x))?;
            let (b, cb) = r.forward(ps, &a)?;
            down_c.push(ca);
            refine_c.push(cb);
            levels.push(b);
        }
        let last = levels.len() - 1;
        let (mut p, top_c) = self.top.forward(ps, &levels[last])?;
        let mut lateral_c: Vec<ConvCache<f32>> = Vec::new();
        let mut p_shapes = Vec::new();
        for k in (self.out_stage..last).rev() {
            let lvl = &levels[k];
            p_shapes.push(p.shape());
            let mut up = resize_bilinear(&p, lvl.h(), lvl.w())?;
            let (l, lc) = self.lateral[k - self.out_stage].forward(ps, lvl)?;
            up.add_assign(&l)?;
            lateral_c.push(lc);
            p = up;
        }
        lateral_c.reverse();
        p_shapes.reverse();
        let (o, out_c) = self.out.forward(ps, &p)?;
        levels.push(o);
        Ok((
            levels,
            BevFpnCache {
                down: down_c,
                refine: refine_c,
                top: top_c,
                lateral: lateral_c,
                p_shapes,
                out: out_c,
            },
        ))
    }

    pub fn infer(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (mut levels, _) = self.forward(ps, x)?;
        Ok(levels.pop().expect("fused output"))
    }

    /// Back-propagates the gradient of the fused output into the parameters,
    /// returning the input gradient when asked.
    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &BevFpnCache, d_out: &Tensor, need_dx: bool) -> Result<Option<Tensor>> {
        let n = self.down.len();
        let last = n - 1;
        let mut dp = self.out.backward(ps, grads, &cache.out, d_out, true)?.expect("requested");
        let mut dlevels: Vec<Option<Tensor>> = vec![None; n];
        for k in self.out_stage..last {
            let i = k - self.out_stage;
            let dl = self.lateral[i]
                .backward(ps, grads, &cache.lateral[i], &dp, true)?
                .expect("requested");
            dlevels[k] = Some(dl);
            dp = resize_bilinear_backward(&dp, cache.p_shapes[i])?;
        }
        let dtop = self.top.backward(ps, grads, &cache.top, &dp, true)?.expect("requested");
        dlevels[last] = Some(dtop);
        let mut dx_in = None;
        for k in (0..n).rev() {
            let Some(g) = dlevels[k].take() else { continue };
            let da = self.refine[k]
                .backward(ps, grads, &cache.refine[k], &g, true)?
                .expect("requested");
            let dx = self.down[k].backward(ps, grads, &cache.down[k], &da, k > 0 || need_dx)?;
            match (k, dx) {
                (0, dx) => dx_in = dx,
                (_, Some(dx)) => match &mut dlevels[k - 1] {
                    Some(acc) => acc.add_assign(&dx)?,
                    slot => *slot = Some(dx),
                },
                (_, None) => {}
            }
        }
        Ok(dx_in)
    }
}

/// Camera backbone: stride-2 stages, each a strided conv plus a refining
/// conv; `out_levels` selects which stage outputs feed the blend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFpnConfig {
    pub stages: Vec<usize>,
    pub out_levels: Vec<usize>,
    /// Append normalized pixel-coordinate channels to the RGB input.
    pub coord_channels: bool,
}

impl Default for CameraFpnConfig {
    fn default() -> Self {
        CameraFpnConfig {
            stages: vec![16, 32, 48, 64],
            out_levels: vec![1, 2, 3],
            coord_channels: true,
        }
    }
}

impl CameraFpnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::config("model.camera_fpn.stages", "must be non-empty and positive"));
        }
        if self.out_levels.is_empty() || self.out_levels.iter().any(|&l| l >= self.stages.len()) {
            return Err(Error::config("model.camera_fpn.out_levels", "must index existing stages"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        if self.coord_channels {
            5
        } else {
            3
        }
    }

    pub fn out_channels(&self) -> Vec<usize> {
        self.out_levels.iter().map(|&l| self.stages[l]).collect()
    }
}

/// `(1, H, W, 3 or 5)` input tensor: RGB, optionally followed by the
/// column and row coordinates scaled to `[-0.5, 0.5]`.
pub fn camera_input(image: &CameraImage, coord_channels: bool) -> Tensor {
    let (h, w) = (image.height(), image.width());
    let c = if coord_channels { 5 } else { 3 };
    Tensor::from_fn([1, h, w, c], |_, r, col, ch| match ch {
        0..=2 => image.data[(r * w + col) * 3 + ch],
        3 => ((col as f64 + 0.5) / w as f64 - 0.5) as f32,
        _ => ((r as f64 + 0.5) / h as f64 - 0.5) as f32,
    })
}

#[derive(Clone, Debug)]
pub struct CameraFpn {
    down: Vec<Conv>,
    refine: Vec<Conv>,
    out_levels: Vec<usize>,
}

pub struct CameraFpnCache {
    down: Vec<ConvCache<f32>>,
    refine: Vec<ConvCache<f32>>,
}

impl CameraFpn {
    pub fn new(store: &mut ParamStore, prefix: &str, group: Group, cfg: &CameraFpnConfig, rng: &mut impl Rng) -> Self {
        let mut down = Vec::new();
        let mut refine = Vec::new();
        let mut prev = cfg.in_channels();
        for (k, &c) in cfg.stages.iter().enumerate() {
            down.push(Conv::new(store, &format!("{prefix}.s{k}.down"), group, 3, prev, c, 2, true, rng));
            refine.push(Conv::new(store, &format!("{prefix}.s{k}.refine"), group, 3, c, c, 1, true, rng));
            prev = c;
        }
        CameraFpn {
            down,
            refine,
            out_levels: cfg.out_levels.clone(),
        }
    }

    /// Stage outputs at the configured levels, finest first.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Vec<Tensor>, CameraFpnCache)> {
        check_ladder(x, self.down.len(), "camera FPN")?;
        let mut levels: Vec<Tensor> = Vec::new();
        let mut cache = CameraFpnCache {
            down: Vec::new(),
            refine: Vec::new(),
        };
        for (d, r) in self.down.iter().zip(&self.refine) {
            let (a, ca) = d.forward(ps, levels.last().unwrap_or(x))?;
            let (b, cb) = r.forward(ps, &a)?;
            cache.down.push(ca);
            cache.refine.push(cb);
            levels.push(b);
        }
        Ok((self.out_levels.iter().map(|&l| levels[l].clone()).collect(), cache))
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &CameraFpnCache, d_outs: &[Tensor]) -> Result<()> {
        let n = self.down.len();
        let mut dlevels: Vec<Option<Tensor>> = vec![None; n];
        for (&l, g) in self.out_levels.iter().zip(d_outs) {
            match &mut dlevels[l] {
                Some(acc) => acc.add_assign(g)?,
                slot => *slot = Some(g.clone()),
            }
        }
        for k in (0..n).rev() {
            let Some(g) = dlevels[k].take() else { continue };
            let da = self.refine[k]
                .backward(ps, grads, &cache.refine[k], &g, true)?
                .expect("requested");
            if let Some(dx) = self.down[k].backward(ps, grads, &cache.down[k], &da, k > 0)? {
                match &mut dlevels[k - 1] {
                    Some(acc) => acc.add_assign(&dx)?,
                    slot => *slot = Some(dx),
                }
            }
        }
        Ok(())
    }
}

/// Multi-scale blend: resize to a common size, concatenate, then a 1x1 conv
/// followed by `n3` 3x3 convs, all `channels` wide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendConfig {
    pub channels: usize,
    pub n3: usize,
    /// The common scale is `1 / z_div` of the input image.
    pub z_div: usize,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            channels: 96,
            n3: 4,
            z_div: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Blend {
    pub stack: ConvStack,
}

pub struct BlendCache {
    in_shapes: Vec<[usize; 4]>,
    stack: StackCache,
}

impl Blend {
    pub fn new(store: &mut ParamStore, prefix: &str, group: Group, cin: usize, cfg: &BlendConfig, rng: &mut impl Rng) -> Self {
        Blend {
            stack: ConvStack::blend(store, prefix, group, cin, cfg.channels, cfg.channels, cfg.n3, rng),
        }
    }

    pub fn forward(&self, ps: &ParamStore, maps: &[&Tensor], out_h: usize, out_w: usize) -> Result<(Tensor, BlendCache)> {
        if maps.is_empty() {
            return Err(Error::InvalidArgument("blend needs at least one map".into()));
        }
        let resized = maps
            .iter()
            .map(|m| resize_bilinear(m, out_h, out_w))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = resized.iter().collect();
        let cat = concat_channels(&refs)?;
        let (y, stack) = self.stack.forward(ps, &cat)?;
        Ok((
            y,
            BlendCache {
                in_shapes: maps.iter().map(|m| m.shape()).collect(),
                stack,
            },
        ))
    }

    /// Gradients w.r.t. each input map.
    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &BlendCache, dy: &Tensor) -> Result<Vec<Tensor>> {
        let dcat = self.stack.backward(ps, grads, &cache.stack, dy, true)?.expect("requested");
        let chans: Vec<usize> = cache.in_shapes.iter().map(|s| s[3]).collect();
        let parts = concat_channels_backward(&dcat, &chans)?;
        parts
            .iter()
            .zip(&cache.in_shapes)
            .map(|(g, &s)| resize_bilinear_backward(g, s))
            .collect()
    }
}

/// Blends multi-scale camera maps into the image-plane feature map at scale
/// `1 / z_div` of the camera described by `intr`.
pub fn blend_multiscale(maps: &[&Tensor], intr: &CameraIntrinsics, z_div: usize, blend: &Blend, ps: &ParamStore) -> Result<FeatureMap> {
    if z_div == 0 || intr.height % z_div != 0 || intr.width % z_div != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} is not divisible by {z_div}",
            intr.height, intr.width
        )));
    }
    let (y, _) = blend.forward(ps, maps, intr.height / z_div, intr.width / z_div)?;
    FeatureMap::image(y, *intr, 1.0 / z_div as f64, Modality::C)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use sha2::{Digest, Sha256};

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(5)
    }

    fn bev_cfg() -> BevFpnConfig {
        BevFpnConfig {
            stages: vec![8, 12, 16],
            out_channels: 8,
            out_stage: 1,
        }
    }

    // biases start at zero
    #[test]
    fn zero_input_gives_zero_output() {
        let mut ps = ParamStore::new();
        let fpn = BevFpn::new(&mut ps, "l", Group::LidarFpn, 4, &bev_cfg(), &mut rng());
        let (levels, _) = fpn.forward(&ps, &Tensor::zeros([1, 16, 24, 4])).unwrap();
        assert!(levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn doubling_input_doubles_outputs() {
        let mut ps = ParamStore::new();
        let fpn = BevFpn::new(&mut ps, "l", Group::LidarFpn, 4, &bev_cfg(), &mut rng());
        let (a, _) = fpn.forward(&ps, &Tensor::full([1, 16, 24, 4], 0.5)).unwrap();
        let (b, _) = fpn.forward(&ps, &Tensor::full([1, 32, 48, 4], 0.5)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((2 * x.h(), 2 * x.w()), (y.h(), y.w()));
        }
        // fused output sits at stage 1, i.e. 1/4 of the input
        assert_eq!(a.last().unwrap().shape(), [1, 4, 6, 8]);
        assert!(fpn.forward(&ps, &Tensor::zeros([1, 12, 24, 4])).is_err());
    }

    #[test]
    fn golden_hash_is_stable() {
        let digest = || {
            let mut ps = ParamStore::new();
            let fpn = BevFpn::new(&mut ps, "l", Group::LidarFpn, 2, &bev_cfg(), &mut rng());
            let x = Tensor::from_fn([1, 8, 16, 2], |_, h, w, c| ((h * 31 + w * 7 + c) % 5) as f32 * 0.25);
            let out = fpn.infer(&ps, &x).unwrap();
            let mut hasher = Sha256::new();
            for v in out.data() {
                hasher.update(v.to_le_bytes());
            }
            hasher.finalize()
        };
        assert_eq!(digest(), digest());
    }

    #[test]
    fn camera_fpn_and_blend_shapes() {
        let mut ps = ParamStore::new();
        let cfg = CameraFpnConfig::default();
        let fpn = CameraFpn::new(&mut ps, "c", Group::CameraFpn, &cfg, &mut rng());
        let blend = Blend::new(&mut ps, "c.blend", Group::CameraFpn, cfg.out_channels().iter().sum(), &BlendConfig::default(), &mut rng());
        let intr = CameraIntrinsics {
            fx: 32.0,
            fy: 32.0,
            cx: 32.0,
            cy: 16.0,
            width: 64,
            height: 32,
        };
        let (maps, _) = fpn.forward(&ps, &Tensor::full([1, 32, 64, 5], 0.3)).unwrap();
        assert_eq!(maps.iter().map(|m| m.h()).collect::<Vec<_>>(), vec![8, 4, 2]);
        let refs: Vec<&Tensor> = maps.iter().collect();
        let f = blend_multiscale(&refs, &intr, 4, &blend, &ps).unwrap();
        assert_eq!(f.tensor.shape(), [1, 8, 16, 96]);
        assert!(blend_multiscale(&[], &intr, 4, &blend, &ps).is_err());
    }

    #[test]
    fn blend_at_target_scale_is_the_stack_alone() {
        let mut ps = ParamStore::new();
        let blend = Blend::new(&mut ps, "b", Group::CameraFpn, 6, &BlendConfig::default(), &mut rng());
        let x = Tensor::from_fn([1, 4, 8, 6], |_, h, w, c| (h + 2 * w + 3 * c) as f32 * 0.05);
        let (y, _) = blend.forward(&ps, &[&x], 4, 8).unwrap();
        assert_eq!(y, blend.stack.infer(&ps, &x).unwrap());
    }

    #[test]
    fn blend_zero_in_zero_out() {
        let mut ps = ParamStore::new();
        let blend = Blend::new(&mut ps, "b", Group::CameraFpn, 6, &BlendConfig::default(), &mut rng());
        let a = Tensor::zeros([1, 4, 8, 2]);
        let b = Tensor::zeros([1, 2, 4, 4]);
        let (y, _) = blend.forward(&ps, &[&a, &b], 4, 8).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
