//! Segmentation head: an FPN-style pixel decoder, a query decoder with
//! cross/self attention, per-query mask prediction, semantic inference and
//! the bipartite-matching training loss.

mod inference;
mod matching;
mod pixel;
mod query;

pub use inference::{binarize, dice_loss, predict_masks, semantic_inference};
pub use matching::{hungarian, match_and_loss, matching_cost, LossOutput};
pub use pixel::{PixelDecoder, PixelDecoding};
pub use query::{QueryDecoder, QueryOutput, QuerySet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the glass class in the two-way class logits; the other is "no object".
pub const GLASS: usize = 0;
pub const NO_OBJECT: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { class: 2.0, bce: 5.0, dice: 5.0, no_object: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub n_queries: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub mask_mlp_layers: usize,
    pub loss: LossWeights,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { embed_dim: 64, n_queries: 16, n_layers: 3, n_heads: 4, ffn_dim: 128, mask_mlp_layers: 3, loss: LossWeights::default() }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_queries == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_dim == 0 || self.mask_mlp_layers == 0 {
            return Err(Error::InvalidConfig("decoder sizes must be positive".into()));
        }
        if self.embed_dim % self.n_heads != 0 || self.embed_dim % 4 != 0 {
            return Err(Error::InvalidConfig(format!("embed_dim {} must be divisible by 4 and by {} heads", self.embed_dim, self.n_heads)));
        }
        let w = &self.loss;
        if [w.class, w.bce, w.dice, w.no_object].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}
