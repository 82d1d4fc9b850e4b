use super::{QuerySet, GLASS, NO_OBJECT};
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ConfidenceMap};
use crate::tensor::{resize_bilinear, sigmoid, Float, Graph, Var};

/// `mask_logits[b, q, y, x] = <mask_embed[b, q], pixel_embedding[b, :, y, x]>`.
pub fn predict_masks<F: Float>(g: &mut Graph<'_, F>, mask_embed: Var, pixel_embedding: Var) -> Result<Var> {
    let me = g.shape(mask_embed).to_vec();
    let pe = g.shape(pixel_embedding).to_vec();
    if me.len() != 3 || pe.len() != 4 || me[0] != pe[0] || me[2] != pe[1] {
        return Err(Error::ShapeMismatch(format!("mask embed {me:?} vs pixel embedding {pe:?}")));
    }
    let (b, q, d, h, w) = (pe[0], me[1], pe[1], pe[2], pe[3]);
    let pix = g.reshape(pixel_embedding, &[b, d, h * w]);
    let m = g.bmm(mask_embed, pix, false);
    Ok(g.reshape(m, &[b, q, h, w]))
}

/// Per pixel `Σ_q softmax(class_q)[glass] · sigmoid(mask_q)`, clamped to
/// `[0, 1]` and bilinearly upsampled from `mask_hw` to `image_hw`.
pub fn semantic_inference(queries: &QuerySet, mask_logits: &[f64], mask_hw: (usize, usize), image_hw: (usize, usize)) -> Result<ConfidenceMap> {
    let q = queries.n_queries;
    let p = mask_hw.0 * mask_hw.1;
    if mask_logits.len() != q * p || queries.class_logits.len() != 2 * q {
        return Err(Error::ShapeMismatch(format!("{q} queries with {} mask logits for {mask_hw:?}", mask_logits.len())));
    }
    let mut conf = vec![0.0f64; p];
    for (qi, row) in mask_logits.chunks(p).enumerate() {
        let (a, b) = (queries.class_logits[2 * qi + GLASS], queries.class_logits[2 * qi + NO_OBJECT]);
        let p_glass = sigmoid(a - b);
        for (c, &m) in conf.iter_mut().zip(row) {
            *c += p_glass * sigmoid(m);
        }
    }
    conf.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
    let full = resize_bilinear(&conf, 1, mask_hw, image_hw);
    ConfidenceMap::new(image_hw.0, image_hw.1, full.into_iter().map(|c| c.clamp(0.0, 1.0) as f32).collect())
}

/// Glass where `confidence >= threshold`, threshold in `(0, 1)`.
pub fn binarize(conf: &ConfidenceMap, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(conf.binarize(threshold))
}

/// `1 − (2·Σ p·g + 1) / (Σ p + Σ g + 1)`.
pub fn dice_loss(probs: &[f64], gt: &[f64]) -> Result<f64> {
    if probs.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("dice over {} vs {} values", probs.len(), gt.len())));
    }
    let inter: f64 = probs.iter().zip(gt).map(|(p, g)| p * g).sum();
    let (sp, sg): (f64, f64) = (probs.iter().sum(), gt.iter().sum());
    Ok(1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(logits: &[(f64, f64)]) -> QuerySet {
        QuerySet {
            n_queries: logits.len(),
            embed_dim: 1,
            embeddings: vec![0.0; logits.len()],
            class_logits: logits.iter().flat_map(|&(a, b)| [a, b]).collect(),
        }
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice_loss(&[1.0; 16], &[1.0; 16]).unwrap(), 0.0);
        assert!((dice_loss(&[0.0; 16], &[1.0; 16]).unwrap() - (1.0 - 1.0 / 17.0)).abs() < 1e-15);
        assert_eq!(dice_loss(&[0.0; 16], &[0.0; 16]).unwrap(), 0.0);
    }

    #[test]
    fn confidence_limits() {
        let c = semantic_inference(&set(&[(60.0, -60.0)]), &[60.0; 4], (2, 2), (8, 8)).unwrap();
        assert!(c.data.iter().all(|&v| v > 0.999_999));
        let c = semantic_inference(&set(&[(-60.0, 60.0), (-80.0, 80.0)]), &[5.0; 8], (2, 2), (8, 8)).unwrap();
        assert!(c.data.iter().all(|&v| v < 1e-20));
        let many = set(&[(9.0, -9.0); 5]);
        let c = semantic_inference(&many, &[9.0; 20], (2, 2), (4, 4)).unwrap();
        assert!(c.data.iter().all(|&v| v == 1.0), "sum over queries is clamped");
    }

    #[test]
    fn threshold_range_checked() {
        let c = ConfidenceMap::filled(1, 1, 0.5);
        assert!(binarize(&c, 0.0).is_err());
        assert!(binarize(&c, 1.0).is_err());
        assert_eq!(binarize(&c, 0.5).unwrap().data, vec![1]);
    }
}
