//! Per-scale fusion of learned and general features: channel concatenation
//! followed by a residual squeeze-and-excitation channel reduction.

use serde::{Deserialize, Serialize};

use crate::backbones::NORM_GROUPS;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear};
use crate::tensor::{Float, Graph, ParamBuilder, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionMode {
    /// Residual SE channel reduction.
    On,
    /// Single 1×1 convolution straight to the output width.
    Conv1x1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub reduction_ratio: usize,
    pub se_reduction: ReductionMode,
    pub kernel_size: usize,
    pub norm: bool,
    pub residual: bool,
    pub final_relu: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { reduction_ratio: 8, se_reduction: ReductionMode::On, kernel_size: 3, norm: true, residual: true, final_relu: true }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction_ratio == 0 {
            return Err(Error::InvalidConfig("reduction_ratio must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!("kernel_size {} must be odd", self.kernel_size)));
        }
        Ok(())
    }
}

/// Intermediate width of the two-step reduction: `max(floor(c_in / 2), c_out)`.
pub fn channel_mid(c_in: usize, c_out: usize) -> Result<usize> {
    if c_in == 0 || c_out == 0 {
        return Err(Error::InvalidArgument(format!("channel counts must be positive, got ({c_in}, {c_out})")));
    }
    Ok((c_in / 2).max(c_out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelReductionSpec {
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
}

impl ChannelReductionSpec {
    pub fn new(c_in: usize, c_out: usize) -> Result<Self> {
        if c_out > c_in {
            return Err(Error::InvalidArgument(format!("cannot reduce {c_in} channels to {c_out}")));
        }
        Ok(Self { c_in, c_mid: channel_mid(c_in, c_out)?, c_out })
    }
}

/// Joins `[B, C1, H, W]` and `[B, C2, H, W]` along channels, `learned` first.
pub fn concat_features<F: Float>(g: &mut Graph<'_, F>, learned: Var, adapted: Var) -> Result<Var> {
    let (a, b) = (g.shape(learned), g.shape(adapted));
    if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::ShapeMismatch(format!("cannot concatenate {a:?} with {b:?}")));
    }
    Ok(g.concat(learned, adapted, 1))
}

/// Squeeze (global average pool) and excitation (bottleneck MLP + sigmoid).
#[derive(Clone, Debug)]
pub struct SeGate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeGate {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, channels: usize, reduction_ratio: usize) -> Self {
        let hidden = (channels / reduction_ratio.max(1)).max(1);
        Self { fc1: Linear::new(&mut pb.pp("fc1"), channels, hidden, true), fc2: Linear::new(&mut pb.pp("fc2"), hidden, channels, true) }
    }

    pub fn hidden(&self) -> usize {
        self.fc1.d_out
    }

    /// Gate values `[B, C]`, each in `(0, 1)`.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let s = g.global_avg_pool(x);
        let h = self.fc1.forward(g, s);
        let h = g.relu(h);
        let e = self.fc2.forward(g, h);
        g.sigmoid(e)
    }
}

/// conv → norm → ReLU → conv → norm → SE gate, plus a 1×1 projection shortcut.
#[derive(Clone, Debug)]
pub struct SeChannelReduction {
    pub spec: ChannelReductionSpec,
    pub conv1: Conv2d,
    pub norm1: Option<GroupNorm>,
    pub conv2: Conv2d,
    pub norm2: Option<GroupNorm>,
    pub gate: SeGate,
    pub shortcut: Option<Conv2d>,
    pub final_relu: bool,
}

impl SeChannelReduction {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, c_in: usize, c_out: usize, cfg: &FusionConfig) -> Result<Self> {
        let spec = ChannelReductionSpec::new(c_in, c_out)?;
        let k = cfg.kernel_size;
        let conv_bias = !cfg.norm;
        Ok(Self {
            spec,
            conv1: Conv2d::new(&mut pb.pp("conv1"), c_in, spec.c_mid, k, 1, conv_bias),
            norm1: cfg.norm.then(|| GroupNorm::new(&mut pb.pp("norm1"), spec.c_mid, NORM_GROUPS)),
            conv2: Conv2d::new(&mut pb.pp("conv2"), spec.c_mid, c_out, k, 1, conv_bias),
            norm2: cfg.norm.then(|| GroupNorm::new(&mut pb.pp("norm2"), c_out, NORM_GROUPS)),
            gate: SeGate::new(&mut pb.pp("se"), c_out, cfg.reduction_ratio),
            shortcut: cfg.residual.then(|| Conv2d::new(&mut pb.pp("shortcut"), c_in, c_out, 1, 1, true)),
            final_relu: cfg.final_relu,
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let mut y = self.conv1.forward(g, x);
        if let Some(n) = &self.norm1 {
            y = n.forward(g, y);
        }
        y = g.relu(y);
        y = self.conv2.forward(g, y);
        if let Some(n) = &self.norm2 {
            y = n.forward(g, y);
        }
        let gate = self.gate.forward(g, y);
        y = g.scale_channels(y, gate);
        if let Some(sc) = &self.shortcut {
            let r = sc.forward(g, x);
            y = g.add(y, r);
        }
        if self.final_relu {
            y = g.relu(y);
        }
        y
    }
}

#[derive(Clone, Debug)]
pub enum Reduction {
    Se(SeChannelReduction),
    Conv1x1(Conv2d),
}

impl Reduction {
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        match self {
            Reduction::Se(r) => r.forward(g, x),
            Reduction::Conv1x1(c) => c.forward(g, x),
        }
    }
}

/// One reduction per pyramid level.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub reductions: Vec<Reduction>,
    pub out_channels: [usize; 4],
}

impl Fusion {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, learned: [usize; 4], general: usize, cfg: &FusionConfig) -> Result<Self> {
        let reductions = (0..4)
            .map(|i| {
                let mut lp = pb.pp(&format!("level{i}"));
                let c_in = learned[i] + general;
                Ok(match cfg.se_reduction {
                    ReductionMode::On => Reduction::Se(SeChannelReduction::new(&mut lp, c_in, learned[i], cfg)?),
                    ReductionMode::Conv1x1 => Reduction::Conv1x1(Conv2d::new(&mut lp.pp("conv"), c_in, learned[i], 1, 1, true)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { reductions, out_channels: learned })
    }

    /// `adapted[i]` must already sit at the same scale as `learned[i]`.
    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, learned: [Var; 4], adapted: [Var; 4]) -> Result<[Var; 4]> {
        let mut out = [learned[0]; 4];
        for i in 0..4 {
            let cat = concat_features(g, learned[i], adapted[i])?;
            out[i] = self.reductions[i].forward(g, cat);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::ParamStore;

    #[test]
    fn channel_mid_examples() {
        assert_eq!(channel_mid(1792, 768).unwrap(), 896);
        assert_eq!(channel_mid(512, 768).unwrap(), 768);
        assert_eq!(channel_mid(96, 32).unwrap(), 48);
        assert_eq!(channel_mid(320, 256).unwrap(), 256);
        assert!(channel_mid(0, 3).is_err());
        assert!(ChannelReductionSpec::new(4, 8).is_err());
    }

    #[test]
    fn reduction_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let r = SeChannelReduction::new(&mut pb.pp("a"), 96, 32, &FusionConfig::default()).unwrap();
        assert_eq!(r.spec.c_mid, 48);
        assert_eq!(r.gate.hidden(), 4);
        let tiny = SeChannelReduction::new(&mut pb.pp("b"), 6, 3, &FusionConfig::default()).unwrap();
        assert_eq!(tiny.gate.hidden(), 1);
        let mut g = Graph::inference(&store);
        let x = g.input(vec![0.3; 2 * 96 * 5 * 7], &[2, 96, 5, 7]);
        let y = r.forward(&mut g, x);
        assert_eq!(g.shape(y), &[2, 32, 5, 7]);
    }

    #[test]
    fn concat_requires_matching_grids() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::inference(&store);
        let a = g.input(vec![0.0; 32 * 4 * 4], &[1, 32, 4, 4]);
        let b = g.input(vec![0.0; 64 * 4 * 4], &[1, 64, 4, 4]);
        let c = g.input(vec![0.0; 64 * 2 * 2], &[1, 64, 2, 2]);
        let ab = concat_features(&mut g, a, b).unwrap();
        assert_eq!(g.shape(ab), &[1, 96, 4, 4]);
        assert!(concat_features(&mut g, a, c).is_err());
    }
}
