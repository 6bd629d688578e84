//! Layers built on [`Graph`]: linear maps, layer norm and a post-norm
//! transformer encoder block.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), fan_in, fan_out, true, rng);
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, fan_out), true);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Mat::filled(1, width, 1.0), true);
        let shift = store.add(format!("{name}.shift"), Mat::zeros(1, width), true);
        Self { gain, shift }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.shift]
    }
}

/// Multi-head self-attention and a GELU feed-forward layer, each followed by
/// a residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub heads: usize,
    pub width: usize,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} is not divisible by {heads} heads");
        Self {
            heads,
            width,
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            attn_out: Linear::new(store, &format!("{name}.attn_out"), width, width, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            ff1: Linear::new(store, &format!("{name}.ff1"), width, ff_width, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_width, width, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let d = self.width;
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qkv = self.qkv.forward(g, x);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * dk, dk);
            let k = g.slice_cols(qkv, d + h * dk, dk);
            let v = g.slice_cols(qkv, 2 * d + h * dk, dk);
            let scores = g.matmul_bt(q, k);
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores);
            heads.push(g.matmul(att, v));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let attn = self.attn_out.forward(g, cat);
        let attn = g.dropout(attn);
        let res = g.add(x, attn);
        let x1 = self.norm1.forward(g, res);
        let h = self.ff1.forward(g, x1);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h);
        let h = g.dropout(h);
        let res = g.add(x1, h);
        self.norm2.forward(g, res)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.qkv, &self.attn_out, &self.ff1, &self.ff2]
            .iter()
            .flat_map(|l| l.params())
            .chain(self.norm1.params())
            .chain(self.norm2.params())
            .collect()
    }
}
