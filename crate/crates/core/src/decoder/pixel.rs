use crate::backbones::NORM_GROUPS;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm};
use crate::tensor::{Float, Graph, ParamBuilder, Var};

/// Output of the pixel decoder.
#[derive(Clone, Copy, Debug)]
pub struct PixelDecoding {
    /// `[B, D, H/4, W/4]`
    pub pixel_embedding: Var,
    /// Merged maps at 1/32, 1/16, 1/8 (coarse to fine), each `[B, D, h, w]`.
    pub context_levels: [Var; 3],
}

/// Top-down feature pyramid: 1×1 lateral projections, upsample-and-add.
#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub embed_dim: usize,
    laterals: Vec<Conv2d>,
    norm: GroupNorm,
    out: Conv2d,
}

impl PixelDecoder {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, in_channels: [usize; 4], embed_dim: usize) -> Self {
        let laterals = (0..4).map(|i| Conv2d::new(&mut pb.pp(&format!("lateral{i}")), in_channels[i], embed_dim, 1, 1, true)).collect();
        Self {
            embed_dim,
            laterals,
            norm: GroupNorm::new(&mut pb.pp("norm"), embed_dim, NORM_GROUPS),
            out: Conv2d::new(&mut pb.pp("out"), embed_dim, embed_dim, 1, 1, true),
        }
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, levels: [Var; 4]) -> Result<PixelDecoding> {
        for (l, lat) in levels.iter().zip(&self.laterals) {
            let c = g.shape(*l)[1];
            if c != lat.c_in {
                return Err(Error::ShapeMismatch(format!("pixel decoder expects {} channels, got {c}", lat.c_in)));
            }
        }
        let mut merged = [levels[0]; 4];
        merged[3] = self.laterals[3].forward(g, levels[3]);
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(g, levels[i]);
            let s = g.shape(lat).to_vec();
            let up = g.resize_bilinear(merged[i + 1], s[2], s[3]);
            merged[i] = g.add(lat, up);
        }
        let y = self.norm.forward(g, merged[0]);
        let y = g.relu(y);
        let pixel_embedding = self.out.forward(g, y);
        Ok(PixelDecoding { pixel_embedding, context_levels: [merged[3], merged[2], merged[1]] })
    }
}
