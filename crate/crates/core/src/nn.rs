//! Parameterised layers built on the autodiff graph.

use crate::tensor::{Float, Graph, Init, ParamBuilder, ParamId, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    /// `kernel × kernel` convolution with "same" padding for odd kernels at stride 1.
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, c_in: usize, c_out: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        Self::with_padding(pb, c_in, c_out, kernel, stride, kernel / 2, bias)
    }

    pub fn with_padding<F: Float>(
        pb: &mut ParamBuilder<'_, F>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = pb.param("weight", &[c_out, c_in, kernel, kernel], Init::He(fan_in));
        let bias = bias.then(|| pb.param("bias", &[c_out], Init::Fan(fan_in)));
        Self { weight, bias, stride, pad, c_in, c_out }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = pb.param("weight", &[d_in, d_out], Init::Fan(d_in));
        let bias = bias.then(|| pb.param("bias", &[d_out], Init::Zeros));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses `groups` groups when it divides `channels`, otherwise the largest divisor below it.
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, channels: usize, groups: usize) -> Self {
        let groups = (1..=groups.max(1)).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self {
            gamma: pb.param("gamma", &[channels], Init::Ones),
            beta: pb.param("beta", &[channels], Init::Zeros),
            groups,
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gm, bt, self.groups, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, dim: usize) -> Self {
        Self { gamma: pb.param("gamma", &[dim], Init::Ones), beta: pb.param("beta", &[dim], Init::Zeros) }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, 1e-6)
    }
}

/// conv → group norm → ReLU
#[derive(Clone, Debug)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize) -> Self {
        Self {
            conv: Conv2d::new(&mut pb.pp("conv"), c_in, c_out, kernel, stride, false),
            norm: GroupNorm::new(&mut pb.pp("norm"), c_out, groups),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.norm.forward(g, y);
        g.relu(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<F: Float>(self, g: &mut Graph<'_, F>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, dims: &[usize], act: Activation) -> Self {
        let layers = dims.windows(2).enumerate().map(|(i, d)| Linear::new(&mut pb.pp(&format!("fc{i}")), d[0], d[1], true)).collect();
        Self { layers, act }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let mut y = x;
        for (i, l) in self.layers.iter().enumerate() {
            y = l.forward(g, y);
            if i + 1 < self.layers.len() {
                y = self.act.apply(g, y);
            }
        }
        y
    }
}

/// Multi-head scaled dot-product attention over `[B, T, D]` token tensors.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "attention: dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(&mut pb.pp("q"), dim, dim, true),
            k: Linear::new(&mut pb.pp("k"), dim, dim, true),
            v: Linear::new(&mut pb.pp("v"), dim, dim, true),
            out: Linear::new(&mut pb.pp("out"), dim, dim, true),
            heads,
            dim,
        }
    }

    fn split_heads<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let hd = self.dim / self.heads;
        let x = g.reshape(x, &[b, t, self.heads, hd]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.heads, t, hd])
    }

    /// `query [B, Tq, D]` attends over `key [B, Tk, D]` / `value [B, Tk, D]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, query: Var, key: Var, value: Var) -> Var {
        let (b, tq) = (g.shape(query)[0], g.shape(query)[1]);
        let hd = self.dim / self.heads;
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let (q, k, v) = (self.split_heads(g, q), self.split_heads(g, k), self.split_heads(g, v));
        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let attn = g.softmax(scores);
        let o = g.bmm(attn, v, false);
        let o = g.reshape(o, &[b, self.heads, tq, hd]);
        let o = g.permute(o, &[0, 2, 1, 3]);
        let o = g.reshape(o, &[b, tq, self.dim]);
        self.out.forward(g, o)
    }
}

/// 2-D sine/cosine positional encoding for an `h × w` grid, `[h·w, dim]`
/// row-major over (y, x). Half the channels encode y, half x.
pub fn sine_positional_encoding(h: usize, w: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let pairs = half / 2;
    let mut out = vec![0.0; h * w * dim];
    let two_pi = std::f64::consts::TAU;
    for y in 0..h {
        for x in 0..w {
            let row = &mut out[(y * w + x) * dim..(y * w + x + 1) * dim];
            let yn = (y as f64 + 0.5) / h as f64 * two_pi;
            let xn = (x as f64 + 0.5) / w as f64 * two_pi;
            for i in 0..pairs {
                let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
                row[2 * i] = (yn / freq).sin();
                row[2 * i + 1] = (yn / freq).cos();
                row[half + 2 * i] = (xn / freq).sin();
                row[half + 2 * i + 1] = (xn / freq).cos();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::ParamStore;

    #[test]
    fn attention_output_shape() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("mha"), 8, 2);
        let mut g = Graph::inference(&store);
        let q = g.input(vec![0.1; 2 * 3 * 8], &[2, 3, 8]);
        let kv = g.input(vec![0.2; 2 * 5 * 8], &[2, 5, 8]);
        let o = mha.forward(&mut g, q, kv, kv);
        assert_eq!(g.shape(o), &[2, 3, 8]);
    }

    #[test]
    fn group_count_falls_back_to_divisor() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gn = GroupNorm::new(&mut ParamBuilder::new(&mut store, &mut rng), 12, 8);
        assert_eq!(gn.groups, 6);
    }

    #[test]
    fn positional_encoding_is_bounded_and_distinct() {
        let pe = sine_positional_encoding(3, 4, 8);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pe[0..8], pe[8..16]);
        assert_ne!(pe[0..8], pe[32..40]);
    }
}
