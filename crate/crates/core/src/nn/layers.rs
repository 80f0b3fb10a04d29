//! Parameter-bound layers used to compose the fixed network graphs.

use rand::Rng;

use crate::error::Result;
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvCache, ConvSpec};
use crate::nn::params::{Grads, Group, ParamId, ParamStore};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let (weight, bias) = store.add_conv(name, group, k, cin, cout, rng);
        Conv {
            weight,
            bias,
            spec: ConvSpec::same(stride, relu),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, ConvCache<f32>)> {
        conv2d_forward(x, ps.value(self.weight), ps.value(self.bias), self.spec)
    }

    pub fn infer(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(ps, x)?.0)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut Grads,
        cache: &ConvCache<f32>,
        dy: &Tensor,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let g = conv2d_backward(cache, ps.value(self.weight), dy, need_dx)?;
        grads.accumulate(self.weight, &g.dw);
        grads.accumulate(self.bias, &g.db);
        Ok(g.dx)
    }

    pub fn out_channels(&self, ps: &ParamStore) -> usize {
        ps.value(self.weight).c()
    }
}

/// A plain chain of convolutions.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
}

pub struct StackCache {
    caches: Vec<ConvCache<f32>>,
}

impl ConvStack {
    /// The blending/alignment topology: a 1x1 conv, then `n3` 3x3 convs,
    /// ReLU after every layer but the last.
    pub fn blend(
        store: &mut ParamStore,
        prefix: &str,
        group: Group,
        cin: usize,
        hidden: usize,
        cout: usize,
        n3: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(n3 + 1);
        let last = n3;
        layers.push(Conv::new(store, &format!("{prefix}.l0"), group, 1, cin, if last == 0 { cout } else { hidden }, 1, last != 0, rng));
        for i in 1..=n3 {
            let out = if i == last { cout } else { hidden };
            layers.push(Conv::new(store, &format!("{prefix}.l{i}"), group, 3, hidden, out, 1, i != last, rng));
        }
        ConvStack { layers }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Result<(Tensor, StackCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur: Option<Tensor> = None;
        for layer in &self.layers {
            let (y, c) = layer.forward(ps, cur.as_ref().unwrap_or(x))?;
            caches.push(c);
            cur = Some(y);
        }
        Ok((cur.unwrap_or_else(|| x.clone()), StackCache { caches }))
    }

    pub fn infer(&self, ps: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(ps, x)?.0)
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: &mut Grads,
        cache: &StackCache,
        dy: &Tensor,
        need_dx: bool,
    ) -> Result<Option<Tensor>> {
        let mut g = dy.clone();
        for (i, (layer, c)) in self.layers.iter().zip(&cache.caches).enumerate().rev() {
            let want = need_dx || i > 0;
            match layer.backward(ps, grads, c, &g, want)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }
}
