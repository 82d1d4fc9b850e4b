use super::{DecoderConfig, PixelDecoding};
use crate::error::{Error, Result};
use crate::nn::{sine_positional_encoding, Activation, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{Float, Graph, Init, ParamBuilder, ParamId, Var};

/// Graph handles produced by [`QueryDecoder::forward`].
#[derive(Clone, Copy, Debug)]
pub struct QueryOutput {
    /// `[B, Q, D]` refined query embeddings (after the final norm).
    pub embeddings: Var,
    /// `[B, Q, 2]` glass / no-object logits.
    pub class_logits: Var,
    /// `[B, Q, D]` mask-head outputs, dotted with pixel embeddings.
    pub mask_embed: Var,
}

/// Query embeddings and class logits for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub n_queries: usize,
    pub embed_dim: usize,
    pub embeddings: Vec<f64>,
    pub class_logits: Vec<f64>,
}

impl QuerySet {
    pub fn from_graph<F: Float>(g: &Graph<'_, F>, out: &QueryOutput, index: usize) -> Result<Self> {
        let s = g.shape(out.embeddings);
        let (q, d) = (s[1], s[2]);
        if index >= s[0] {
            return Err(Error::InvalidArgument(format!("batch index {index} out of range")));
        }
        let embeddings = g.value(out.embeddings)[index * q * d..(index + 1) * q * d].iter().map(|v| v.f64()).collect();
        let class_logits = g.value(out.class_logits)[index * q * 2..(index + 1) * q * 2].iter().map(|v| v.f64()).collect();
        Ok(Self { n_queries: q, embed_dim: d, embeddings, class_logits })
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    cross: MultiHeadAttention,
    ln_cross: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_self: LayerNorm,
    ffn: Mlp,
    ln_ffn: LayerNorm,
}

/// Learned queries refined by alternating attention over the context levels.
#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub n_queries: usize,
    pub embed_dim: usize,
    query_feat: ParamId,
    query_pos: ParamId,
    level_embed: ParamId,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    class_head: Linear,
    mask_head: Mlp,
}

impl QueryDecoder {
    pub fn new<F: Float>(pb: &mut ParamBuilder<'_, F>, cfg: &DecoderConfig) -> Self {
        let (q, d) = (cfg.n_queries, cfg.embed_dim);
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let mut lp = pb.pp(&format!("layer{i}"));
                DecoderLayer {
                    cross: MultiHeadAttention::new(&mut lp.pp("cross"), d, cfg.n_heads),
                    ln_cross: LayerNorm::new(&mut lp.pp("ln_cross"), d),
                    self_attn: MultiHeadAttention::new(&mut lp.pp("self"), d, cfg.n_heads),
                    ln_self: LayerNorm::new(&mut lp.pp("ln_self"), d),
                    ffn: Mlp::new(&mut lp.pp("ffn"), &[d, cfg.ffn_dim, d], Activation::Relu),
                    ln_ffn: LayerNorm::new(&mut lp.pp("ln_ffn"), d),
                }
            })
            .collect();
        let mask_dims = vec![d; cfg.mask_mlp_layers + 1];
        Self {
            n_queries: q,
            embed_dim: d,
            query_feat: pb.param("query_feat", &[q, d], Init::Normal(1.0)),
            query_pos: pb.param("query_pos", &[q, d], Init::Normal(1.0)),
            level_embed: pb.param("level_embed", &[3, d], Init::Normal(1.0)),
            layers,
            norm: LayerNorm::new(&mut pb.pp("norm"), d),
            class_head: Linear::new(&mut pb.pp("class_head"), d, 2, true),
            mask_head: Mlp::new(&mut pb.pp("mask_head"), &mask_dims, Activation::Relu),
        }
    }

    /// Flattens each context level to `([B, hw, D] tokens, [B, hw, D] positions)`.
    pub fn context_tokens<F: Float>(&self, g: &mut Graph<'_, F>, pd: &PixelDecoding) -> [(Var, Var); 3] {
        pd.context_levels.map(|lvl| {
            let s = g.shape(lvl).to_vec();
            let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
            let t = g.reshape(lvl, &[b, d, h * w]);
            let t = g.permute(t, &[0, 2, 1]);
            let pos = sine_positional_encoding(h, w, d).into_iter().map(F::of).collect();
            let pos = g.input(pos, &[h * w, d]);
            let pos = g.broadcast(pos, b);
            (t, pos)
        })
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<'_, F>, pd: &PixelDecoding) -> QueryOutput {
        let ctx = self.context_tokens(g, pd);
        self.forward_tokens(g, &ctx)
    }

    /// Runs the layers over explicit `(tokens, positions)` per level, coarse to fine.
    pub fn forward_tokens<F: Float>(&self, g: &mut Graph<'_, F>, ctx: &[(Var, Var); 3]) -> QueryOutput {
        let b = g.shape(ctx[0].0)[0];
        let d = self.embed_dim;
        let qf = g.param(self.query_feat);
        let mut tgt = g.broadcast(qf, b);
        let qp = g.param(self.query_pos);
        let qpos = g.broadcast(qp, b);
        let lvl_all = g.param(self.level_embed);
        let mut srcs = Vec::with_capacity(3);
        for (l, &(tokens, pos)) in ctx.iter().enumerate() {
            let e = g.narrow(lvl_all, 0, l, 1);
            let e = g.reshape(e, &[d]);
            let src = g.add_bias(tokens, e, 2);
            let key = g.add(src, pos);
            srcs.push((src, key));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let (src, key) = srcs[i % 3];
            let q = g.add(tgt, qpos);
            let a = layer.cross.forward(g, q, key, src);
            tgt = g.add(tgt, a);
            tgt = layer.ln_cross.forward(g, tgt);
            let q = g.add(tgt, qpos);
            let a = layer.self_attn.forward(g, q, q, tgt);
            tgt = g.add(tgt, a);
            tgt = layer.ln_self.forward(g, tgt);
            let f = layer.ffn.forward(g, tgt);
            tgt = g.add(tgt, f);
            tgt = layer.ln_ffn.forward(g, tgt);
        }
        let embeddings = self.norm.forward(g, tgt);
        let class_logits = self.class_head.forward(g, embeddings);
        let mask_embed = self.mask_head.forward(g, embeddings);
        QueryOutput { embeddings, class_logits, mask_embed }
    }
}
