//! Model assembly for the full dual-backbone network and its ablations.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{GeneralBackbone, GeneralBackboneConfig, LearnedBackbone, LearnedBackboneConfig, ResizeAdapter};
use crate::decoder::{predict_masks, semantic_inference, DecoderConfig, PixelDecoder, PixelDecoding, QueryDecoder, QueryOutput, QuerySet};
use crate::error::{Error, Result};
use crate::features::PYRAMID_SCALES;
use crate::fusion::{Fusion, FusionConfig, ReductionMode};
use crate::raster::{ConfidenceMap, ImageTensor};
use crate::tensor::{Float, Graph, ParamBuilder, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    LearnedOnly,
    GeneralOnly,
    GeneralSmall,
    NoSe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::LearnedOnly, Variant::GeneralOnly, Variant::GeneralSmall, Variant::NoSe];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::LearnedOnly => "learned_only",
            Variant::GeneralOnly => "general_only",
            Variant::GeneralSmall => "general_small",
            Variant::NoSe => "no_se",
        }
    }

    pub fn uses_learned(self) -> bool {
        self != Variant::GeneralOnly
    }

    pub fn uses_general(self) -> bool {
        self != Variant::LearnedOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackbonesConfig {
    pub learned: LearnedBackboneConfig,
    pub general: GeneralBackboneConfig,
}

/// Everything that determines the parameter layout of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbones: BackbonesConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self { variant, backbones: BackbonesConfig::default(), fusion: FusionConfig::default(), decoder: DecoderConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbones.learned.validate()?;
        self.backbones.general.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model config serialises");
        hex::encode(Sha256::digest(json))
    }
}

/// Graph handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Pyramid fed to the pixel decoder.
    pub pyramid: [Var; 4],
    pub pixels: PixelDecoding,
    pub queries: QueryOutput,
    /// `[B, Q, H/4, W/4]`
    pub mask_logits: Var,
}

/// Assembled network owning its parameters.
#[derive(Clone, Debug)]
pub struct GlassNet<F: Float> {
    pub config: ModelConfig,
    pub store: ParamStore<F>,
    learned: Option<LearnedBackbone>,
    general: Option<GeneralBackbone>,
    adapters: Vec<ResizeAdapter>,
    fusion: Option<Fusion>,
    pixel: PixelDecoder,
    query: QueryDecoder,
}

/// Builds the network for `cfg.variant`; trainable weights are drawn from `seed`.
pub fn build_variant<F: Float>(cfg: &ModelConfig, seed: u64) -> Result<GlassNet<F>> {
    cfg.validate()?;
    let v = cfg.variant;
    let mut fusion_cfg = cfg.fusion.clone();
    if v == Variant::NoSe {
        fusion_cfg.se_reduction = ReductionMode::Conv1x1;
    }
    let general_cfg = if v == Variant::GeneralSmall { cfg.backbones.general.smaller() } else { cfg.backbones.general.clone() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let learned = v.uses_learned().then(|| LearnedBackbone::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("learned"), &cfg.backbones.learned));
    let general = v.uses_general().then(|| GeneralBackbone::new(&mut store, "general", &general_cfg));
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let d = general_cfg.embed_dim;
    let adapters = if v.uses_general() {
        PYRAMID_SCALES
            .iter()
            .enumerate()
            .map(|(i, &s)| ResizeAdapter::new(&mut pb.pp(&format!("adapter{i}")), d, general_cfg.patch_size, s))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let stage = cfg.backbones.learned.stage_channels;
    let fusion = match v {
        Variant::LearnedOnly | Variant::GeneralOnly => None,
        _ => Some(Fusion::new(&mut pb.pp("fusion"), stage, d, &fusion_cfg)?),
    };
    let pyramid_channels = if v == Variant::GeneralOnly { [d; 4] } else { stage };
    let pixel = PixelDecoder::new(&mut pb.pp("pixel_decoder"), pyramid_channels, cfg.decoder.embed_dim);
    let query = QueryDecoder::new(&mut pb.pp("query_decoder"), &cfg.decoder);
    Ok(GlassNet { config: cfg.clone(), store, learned, general, adapters, fusion, pixel, query })
}

impl<F: Float> GlassNet<F> {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// `(total, trainable)` scalar parameter counts.
    pub fn count_params(&self) -> (usize, usize) {
        self.store.count()
    }

    /// Parameters of the frozen backbone (empty when the variant has none).
    pub fn general_params(&self) -> &[ParamId] {
        self.general.as_ref().map_or(&[], |g| g.params())
    }

    pub fn learned_params(&self) -> Vec<ParamId> {
        self.store.iter().filter(|(_, p)| p.name.starts_with("learned.")).map(|(id, _)| id).collect()
    }

    pub fn n_queries(&self) -> usize {
        self.query.n_queries
    }

    /// Stacks images into a `[B, 3, H, W]` graph input; all must share one size.
    pub fn input(&self, g: &mut Graph<'_, F>, images: &[&ImageTensor]) -> Result<Var> {
        let first = images.first().ok_or(Error::Empty("image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for im in images {
            if (im.height, im.width) != (h, w) {
                return Err(Error::ShapeMismatch(format!("batch mixes {h}x{w} and {}x{}", im.height, im.width)));
            }
            im.check_divisible(32)?;
            data.extend(im.data.iter().map(|&v| F::of(v as f64)));
        }
        Ok(g.input(data, &[images.len(), 3, h, w]))
    }

    /// Learned levels, adapted general levels (either may be absent).
    pub fn backbone_features(&self, g: &mut Graph<'_, F>, x: Var) -> Result<(Option<[Var; 4]>, Option<[Var; 4]>)> {
        let s = g.shape(x);
        if s.len() == 4 {
            for side in [s[2], s[3]] {
                if side == 0 || side % 32 != 0 {
                    return Err(Error::NotDivisible { side, divisor: 32 });
                }
            }
        }
        let learned = match &self.learned {
            Some(l) => Some(l.forward(g, x)?),
            None => None,
        };
        let adapted = match &self.general {
            Some(gb) => {
                let taps = gb.forward(g, x)?;
                let mut out = taps;
                for i in 0..4 {
                    out[i] = self.adapters[i].forward(g, taps[i]);
                }
                Some(out)
            }
            None => None,
        };
        Ok((learned, adapted))
    }

    /// Pyramid consumed by the decoder.
    pub fn pyramid(&self, g: &mut Graph<'_, F>, x: Var) -> Result<[Var; 4]> {
        let (learned, adapted) = self.backbone_features(g, x)?;
        match (learned, adapted, &self.fusion) {
            (Some(l), Some(a), Some(f)) => f.forward(g, l, a),
            (Some(l), None, _) => Ok(l),
            (None, Some(a), _) => Ok(a),
            _ => unreachable!("every variant has at least one backbone"),
        }
    }

    pub fn decode(&self, g: &mut Graph<'_, F>, pyramid: [Var; 4]) -> Result<ForwardOutput> {
        let pixels = self.pixel.forward(g, pyramid)?;
        let queries = self.query.forward(g, &pixels);
        let mask_logits = predict_masks(g, queries.mask_embed, pixels.pixel_embedding)?;
        Ok(ForwardOutput { pyramid, pixels, queries, mask_logits })
    }

    pub fn forward(&self, g: &mut Graph<'_, F>, x: Var) -> Result<ForwardOutput> {
        let pyramid = self.pyramid(g, x)?;
        self.decode(g, pyramid)
    }

    /// Confidence maps of `out` for every image in the batch.
    pub fn confidences(&self, g: &Graph<'_, F>, out: &ForwardOutput, image_hw: (usize, usize)) -> Result<Vec<ConfidenceMap>> {
        let s = g.shape(out.mask_logits).to_vec();
        let (b, q, h, w) = (s[0], s[1], s[2], s[3]);
        let ml = g.value(out.mask_logits);
        (0..b)
            .map(|i| {
                let qs = QuerySet::from_graph(g, &out.queries, i)?;
                let logits: Vec<f64> = ml[i * q * h * w..(i + 1) * q * h * w].iter().map(|v| v.f64()).collect();
                semantic_inference(&qs, &logits, (h, w), image_hw)
            })
            .collect()
    }

    /// Inference on a batch of equally sized images.
    pub fn predict(&self, images: &[&ImageTensor]) -> Result<Vec<ConfidenceMap>> {
        let mut g = Graph::inference(&self.store);
        let x = self.input(&mut g, images)?;
        let out = self.forward(&mut g, x)?;
        self.confidences(&g, &out, (images[0].height, images[0].width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("tiny".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn config_hash_tracks_changes() {
        let a = ModelConfig::new(Variant::Full);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.decoder.n_queries = 8;
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.hash(), ModelConfig::new(Variant::NoSe).hash());
    }

    #[test]
    fn variants_share_output_shape() {
        let image = ImageTensor::new(64, 64, (0..3 * 64 * 64).map(|i| ((i * 13) % 97) as f32 / 48.0 - 1.0).collect()).unwrap();
        let nets: Vec<GlassNet<f32>> = Variant::ALL.iter().map(|&v| build_variant(&ModelConfig::new(v), 2).unwrap()).collect();
        for net in &nets {
            let conf = net.predict(&[&image]).unwrap();
            assert_eq!((conf[0].height, conf[0].width), (64, 64), "{}", net.variant().name());
        }
        let count = |v: Variant| nets.iter().find(|n| n.variant() == v).unwrap().count_params();
        let (full_total, full_trainable) = count(Variant::Full);
        assert!(full_total > full_trainable);
        assert!(count(Variant::NoSe).0 < full_total);
        let (lo_total, lo_trainable) = count(Variant::LearnedOnly);
        assert_eq!(lo_total, lo_trainable);
    }
}
