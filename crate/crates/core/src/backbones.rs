//! The two feature extractors: a trainable hierarchical conv encoder and a
//! frozen patch transformer with hidden-state taps, plus the resizing
//! adapters that bring the transformer's patch grid onto the pyramid scales.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::PYRAMID_SCALES;
use crate::nn::{sine_positional_encoding, Activation, Conv2d, ConvNormAct, GroupNorm, LayerNorm, Mlp, MultiHeadAttention};
use crate::tensor::{Float, Graph, Init, ParamBuilder, ParamId, ParamStore, Var};

pub const NORM_GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnedBackboneConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
}

impl Default for LearnedBackboneConfig {
    fn default() -> Self {
        Self { stage_channels: [32, 64, 128, 256], blocks_per_stage: 1 }
    }
}

impl LearnedBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) || self.blocks_per_stage == 0 {
            return Err(Error::InvalidConfig("learned backbone channels and blocks must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig(format!("stage_channels {:?} must be non-decreasing", self.stage_channels)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralBackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub tap_indices: [usize; 4],
    /// Seed of the fixed random initialisation (independent of the experiment seed).
    pub init_seed: u64,
}

impl Default for GeneralBackboneConfig {
    fn default() -> Self {
        Self { patch_size: 16, embed_dim: 64, num_blocks: 8, num_heads: 4, mlp_ratio: 4, tap_indices: [2, 4, 6, 8], init_seed: 0x5EED }
    }
}

impl GeneralBackboneConfig {
    /// Evenly spaced taps `{D/4, D/2, 3D/4, D}`.
    pub fn default_taps(depth: usize) -> [usize; 4] {
        [depth / 4, depth / 2, 3 * depth / 4, depth]
    }

    /// Half depth and half width, taps re-spaced over the shorter stack.
    pub fn smaller(&self) -> Self {
        let num_blocks = (self.num_blocks / 2).max(4);
        let embed_dim = (self.embed_dim / 2).max(self.num_heads);
        Self { num_blocks, embed_dim, tap_indices: Self::default_taps(num_blocks), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_blocks == 0 || self.num_heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::InvalidConfig("general backbone sizes must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.num_heads)));
        }
        for &t in &self.tap_indices {
            if t == 0 || t > self.num_blocks {
                return Err(Error::TapOutOfRange { index: t, depth: self.num_blocks });
            }
        }
        if self.tap_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(format!("tap_indices {:?} must be strictly increasing", self.tap_indices)));
        }
        if self.tap_indices[3] != self.num_blocks {
            return Err(Error::InvalidConfig("the last tap must be the final block".into()));
        }
        if !PYRAMID_SCALES.contains(&self.patch_size) {
            return Err(Error::UnsupportedScale(self.patch_size));
        }
        Ok(())
    }
}

fn check_image<F: Float>(g: &Graph<'_, F>, x: Var, divisor: usize) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::ShapeMismatch(format!("expected [B, 3, H, W] image batch, got {s:?}")));
    }
    for side in [s[2], s[3]] {
        if side == 0 || side % divisor != 0 {
            return Err(Error::NotDivisible { side, divisor });
        }
    }
    Ok((s[2], s[3]))
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    a: ConvNormAct,
    conv: Conv2d,
    norm: GroupNorm,
}

impl ResidualBlock {
    fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, c: usize) -> Self {
        Self {
            a: ConvNormAct::new(&mut pb.pp("a"), c, c, 3, 1, NORM_GROUPS),
            conv: Conv2d::new(&mut pb.pp("b").pp("conv"), c, c, 3, 1, false),
            norm: GroupNorm::new(&mut pb.pp("b").pp("norm"), c, NORM_GROUPS),
        }
    }

    fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let y = self.a.forward(g, x);
        let y = self.conv.forward(g, y);
        let y = self.norm.forward(g, y);
        let y = g.add(x, y);
        g.relu(y)
    }
}

/// Trainable conv encoder producing features at 1/4, 1/8, 1/16 and 1/32.
#[derive(Clone, Debug)]
pub struct LearnedBackbone {
    pub cfg: LearnedBackboneConfig,
    stem: [ConvNormAct; 2],
    downsample: Vec<ConvNormAct>,
    stages: Vec<Vec<ResidualBlock>>,
}

impl LearnedBackbone {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, cfg: &LearnedBackboneConfig) -> Self {
        let ch = cfg.stage_channels;
        let stem_mid = (ch[0] / 2).max(1);
        let stem = [
            ConvNormAct::new(&mut pb.pp("stem0"), 3, stem_mid, 3, 2, NORM_GROUPS),
            ConvNormAct::new(&mut pb.pp("stem1"), stem_mid, ch[0], 3, 2, NORM_GROUPS),
        ];
        let downsample = (1..4).map(|i| ConvNormAct::new(&mut pb.pp(&format!("down{i}")), ch[i - 1], ch[i], 3, 2, NORM_GROUPS)).collect();
        let stages = (0..4)
            .map(|i| {
                let mut sp = pb.pp(&format!("stage{i}"));
                (0..cfg.blocks_per_stage).map(|b| ResidualBlock::new(&mut sp.pp(&format!("block{b}")), ch[i])).collect()
            })
            .collect();
        Self { cfg: cfg.clone(), stem, downsample, stages }
    }

    /// `x` is a normalised `[B, 3, H, W]` batch with sides divisible by 32.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<[Var; 4]> {
        check_image(g, x, 32)?;
        let mut y = self.stem[0].forward(g, x);
        y = self.stem[1].forward(g, y);
        let mut out = Vec::with_capacity(4);
        for (i, blocks) in self.stages.iter().enumerate() {
            if i > 0 {
                y = self.downsample[i - 1].forward(g, y);
            }
            for b in blocks {
                y = b.forward(g, y);
            }
            out.push(y);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

#[derive(Clone, Debug)]
struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl TransformerBlock {
    fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let h = self.attn.forward(g, h, h, h);
        let x = g.add(x, h);
        let h = self.ln2.forward(g, x);
        let h = self.mlp.forward(g, h);
        g.add(x, h)
    }
}

/// Frozen patch transformer with a summary token. Weights come from a fixed
/// seed and never receive gradients.
#[derive(Clone, Debug)]
pub struct GeneralBackbone {
    pub cfg: GeneralBackboneConfig,
    patch: Conv2d,
    cls: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    params: Vec<ParamId>,
}

impl GeneralBackbone {
    /// Registers frozen parameters under `pb`'s prefix, drawn from `cfg.init_seed`.
    pub fn new<F: Float>(store: &mut ParamStore<F>, prefix: &str, cfg: &GeneralBackboneConfig) -> Self {
        let first = store.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut root = ParamBuilder::new(store, &mut rng);
        let mut root = root.pp(prefix);
        let mut pb = root.frozen();
        let d = cfg.embed_dim;
        let patch = Conv2d::with_padding(&mut pb.pp("patch"), 3, d, cfg.patch_size, cfg.patch_size, 0, true);
        let cls = pb.param("cls_token", &[1, d], Init::Normal(0.02));
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let mut bp = pb.pp(&format!("block{i}"));
                TransformerBlock {
                    ln1: LayerNorm::new(&mut bp.pp("ln1"), d),
                    attn: MultiHeadAttention::new(&mut bp.pp("attn"), d, cfg.num_heads),
                    ln2: LayerNorm::new(&mut bp.pp("ln2"), d),
                    mlp: Mlp::new(&mut bp.pp("mlp"), &[d, d * cfg.mlp_ratio, d], Activation::Gelu),
                }
            })
            .collect();
        let norm = LayerNorm::new(&mut pb.pp("norm"), d);
        let params = (first..store.len()).map(ParamId).collect();
        Self { cfg: cfg.clone(), patch, cls, blocks, norm, params }
    }

    /// Every parameter owned by this backbone (all frozen).
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// One `[B, D, H/p, W/p]` map per tap, summary token removed.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<[Var; 4]> {
        let p = self.cfg.patch_size;
        let (h, w) = check_image(g, x, p)?;
        let (gh, gw, d) = (h / p, w / p, self.cfg.embed_dim);
        let b = g.shape(x)[0];
        let t = gh * gw;
        let tokens = self.patch.forward(g, x);
        let tokens = g.reshape(tokens, &[b, d, t]);
        let tokens = g.permute(tokens, &[0, 2, 1]);
        let cls = g.param(self.cls);
        let cls = g.broadcast(cls, b);
        let mut seq = g.concat(cls, tokens, 1);
        let mut pos = vec![F::zero(); d];
        pos.extend(sine_positional_encoding(gh, gw, d).into_iter().map(F::of));
        let pos = g.input(pos, &[t + 1, d]);
        let pos = g.broadcast(pos, b);
        seq = g.add(seq, pos);
        let mut taps = Vec::with_capacity(4);
        for (i, block) in self.blocks.iter().enumerate() {
            seq = block.forward(g, seq);
            if self.cfg.tap_indices.contains(&(i + 1)) {
                let y = self.norm.forward(g, seq);
                let y = g.narrow(y, 1, 1, t);
                let y = g.permute(y, &[0, 2, 1]);
                taps.push(g.reshape(y, &[b, d, gh, gw]));
            }
        }
        Ok([taps[0], taps[1], taps[2], taps[3]])
    }
}

/// Trainable convolution that moves a patch-grid map to a pyramid scale.
#[derive(Clone, Debug)]
pub struct ResizeAdapter {
    pub source_scale: usize,
    pub target_scale: usize,
    conv: Conv2d,
}

impl ResizeAdapter {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, channels: usize, source_scale: usize, target_scale: usize) -> Result<Self> {
        if !PYRAMID_SCALES.contains(&target_scale) {
            return Err(Error::UnsupportedScale(target_scale));
        }
        let stride = if target_scale > source_scale {
            if target_scale % source_scale != 0 {
                return Err(Error::UnsupportedScale(target_scale));
            }
            target_scale / source_scale
        } else {
            1
        };
        let conv = Conv2d::with_padding(pb, channels, channels, 3, stride, 1, true);
        Ok(Self { source_scale, target_scale, conv })
    }

    /// Upsamples (bilinear after the conv) for finer targets, strides for coarser ones.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        if self.target_scale < self.source_scale {
            let s = g.shape(x);
            let f = self.source_scale / self.target_scale;
            let (h, w) = (s[2] * f, s[3] * f);
            g.resize_bilinear(y, h, w)
        } else {
            y
        }
    }
}

/// True iff both snapshots hold bitwise-identical values.
pub fn freeze_check<F: Float>(before: &[Vec<F>], after: &[Vec<F>]) -> bool {
    before.len() == after.len()
        && before.iter().zip(after).all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.f64().to_bits() == y.f64().to_bits()))
}

/// Copies the values of `ids` out of `store`.
pub fn snapshot<F: Float>(store: &ParamStore<F>, ids: &[ParamId]) -> Vec<Vec<F>> {
    ids.iter().map(|&id| store.get(id).value.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image<F: Float>(g: &mut Graph<'_, F>, b: usize, side: usize) -> Var {
        let n = b * 3 * side * side;
        g.input((0..n).map(|i| F::of(((i * 37) % 101) as f64 / 50.0 - 1.0)).collect(), &[b, 3, side, side])
    }

    #[test]
    fn learned_levels_have_pyramid_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = LearnedBackbone::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("learned"), &LearnedBackboneConfig::default());
        let mut g = Graph::inference(&store);
        let x = image(&mut g, 1, 128);
        let levels = bb.forward(&mut g, x).unwrap();
        let shapes: Vec<_> = levels.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 32, 32, 32], vec![1, 64, 16, 16], vec![1, 128, 8, 8], vec![1, 256, 4, 4]]);
        let mut g2 = Graph::inference(&store);
        let x2 = image(&mut g2, 1, 128);
        let again = bb.forward(&mut g2, x2).unwrap();
        assert_eq!(g.value(levels[3]), g2.value(again[3]));
    }

    #[test]
    fn learned_rejects_bad_sides() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = LearnedBackbone::new(&mut ParamBuilder::new(&mut store, &mut rng), &LearnedBackboneConfig::default());
        let mut g = Graph::inference(&store);
        let x = g.input(vec![0.0; 3 * 48 * 64], &[1, 3, 48, 64]);
        assert!(matches!(bb.forward(&mut g, x), Err(Error::NotDivisible { side: 48, divisor: 32 })));
    }

    #[test]
    fn general_taps_drop_summary_token() {
        let mut store = ParamStore::<f32>::new();
        let gb = GeneralBackbone::new(&mut store, "general", &GeneralBackboneConfig::default());
        assert!(gb.params().iter().all(|&id| !store.get(id).trainable));
        assert_eq!(gb.params().len(), store.len());
        let mut g = Graph::new(&store);
        let x = image(&mut g, 2, 128);
        let taps = gb.forward(&mut g, x).unwrap();
        for t in taps {
            assert_eq!(g.shape(t), &[2, 64, 8, 8]);
            assert!(!g.requires_grad(t));
        }
    }

    #[test]
    fn general_init_depends_only_on_init_seed() {
        let cfg = GeneralBackboneConfig::default();
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        ParamBuilder::new(&mut b, &mut rng).param("other", &[3], Init::Normal(1.0));
        let ga = GeneralBackbone::new(&mut a, "general", &cfg);
        let gb = GeneralBackbone::new(&mut b, "general", &cfg);
        assert!(freeze_check(&snapshot(&a, ga.params()), &snapshot(&b, gb.params())));
    }

    #[test]
    fn tap_validation() {
        let mut cfg = GeneralBackboneConfig { tap_indices: [2, 4, 6, 9], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::TapOutOfRange { index: 9, depth: 8 })));
        cfg.tap_indices = [2, 4, 6, 7];
        assert!(cfg.validate().is_err());
        assert_eq!(GeneralBackboneConfig::default_taps(24), [6, 12, 18, 24]);
        assert_eq!(GeneralBackboneConfig::default_taps(12), [3, 6, 9, 12]);
        let small = GeneralBackboneConfig::default().smaller();
        assert_eq!((small.num_blocks, small.embed_dim, small.tap_indices), (4, 32, [1, 2, 3, 4]));
        small.validate().unwrap();
    }

    #[test]
    fn adapters_reach_every_scale() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let adapters: Vec<_> = PYRAMID_SCALES.iter().map(|&s| ResizeAdapter::new(&mut pb.pp(&format!("a{s}")), 4, 16, s).unwrap()).collect();
        assert!(matches!(ResizeAdapter::new(&mut pb, 4, 16, 64), Err(Error::UnsupportedScale(64))));
        let mut g = Graph::inference(&store);
        let x = g.input((0..4 * 64).map(|i| (i as f32).sin()).collect(), &[1, 4, 8, 8]);
        let sides: Vec<_> = adapters.iter().map(|a| { let y = a.forward(&mut g, x); g.shape(y)[2] }).collect();
        assert_eq!(sides, vec![32, 16, 8, 4]);
        let same = adapters[2].forward(&mut g, x);
        assert_ne!(g.value(same), g.value(x));
    }
}
