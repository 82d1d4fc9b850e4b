use super::{LossWeights, GLASS, NO_OBJECT};
use crate::error::{Error, Result};
use crate::raster::BinaryMask;
use crate::tensor::{sigmoid, softplus, Float, Graph, Var};

/// Minimum-cost assignment for a row-major `rows × cols` cost matrix.
/// Returns the column matched to each row; with more rows than columns the
/// surplus rows get `None`.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(cost.len(), rows * cols, "hungarian: cost matrix size");
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let t: Vec<f64> = (0..cols * rows).map(|i| cost[(i % rows) * cols + i / rows]).collect();
        let by_col = hungarian(&t, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    // shortest augmenting paths with potentials, 1-based with a virtual column 0
    let (n, m) = (rows, cols);
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Cost of assigning each query to the ground-truth mask:
/// `w.class·(−p_glass) + w.bce·BCE + w.dice·dice`.
pub fn matching_cost(class_logits: &[f64], mask_logits: &[f64], gt: &[f64], w: &LossWeights) -> Vec<f64> {
    let p = gt.len();
    let gt_sum: f64 = gt.iter().sum();
    mask_logits
        .chunks(p)
        .enumerate()
        .map(|(q, row)| {
            let p_glass = sigmoid(class_logits[2 * q + GLASS] - class_logits[2 * q + NO_OBJECT]);
            let mut bce = 0.0;
            let (mut inter, mut ps) = (0.0, 0.0);
            for (&x, &t) in row.iter().zip(gt) {
                bce += softplus(x) - x * t;
                let s = sigmoid(x);
                inter += s * t;
                ps += s;
            }
            let dice = 1.0 - (2.0 * inter + 1.0) / (ps + gt_sum + 1.0);
            -w.class * p_glass + w.bce * bce / p as f64 + w.dice * dice
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    /// Query matched to each image's glass mask; `None` for images without glass.
    pub matched: Vec<Option<usize>>,
}

/// Matching loss for a batch: every query is classified (matched → glass,
/// others → no object, down-weighted), and the matched query's mask is
/// supervised with BCE + dice against the GT resampled to the mask grid.
pub fn match_and_loss<F: Float>(
    g: &mut Graph<'_, F>,
    class_logits: Var,
    mask_logits: Var,
    gts: &[BinaryMask],
    w: &LossWeights,
) -> Result<LossOutput> {
    let ms = g.shape(mask_logits).to_vec();
    let cs = g.shape(class_logits).to_vec();
    if ms.len() != 4 || cs != [ms[0], ms[1], 2] || gts.len() != ms[0] {
        return Err(Error::ShapeMismatch(format!("class logits {cs:?}, mask logits {ms:?}, {} masks", gts.len())));
    }
    let (b, q, h, wd) = (ms[0], ms[1], ms[2], ms[3]);
    let p = h * wd;
    let cl: Vec<f64> = g.value(class_logits).iter().map(|v| v.f64()).collect();
    let ml: Vec<f64> = g.value(mask_logits).iter().map(|v| v.f64()).collect();
    let mut targets = vec![NO_OBJECT; b * q];
    let mut matched = Vec::with_capacity(b);
    let mut rows = Vec::new();
    let mut mask_targets: Vec<F> = Vec::new();
    for (i, gt) in gts.iter().enumerate() {
        let small = gt.resize_nearest(h, wd);
        if small.count_ones() == 0 {
            matched.push(None);
            continue;
        }
        let t: Vec<f64> = small.data.iter().map(|&v| v as f64).collect();
        let cost = matching_cost(&cl[i * q * 2..(i + 1) * q * 2], &ml[i * q * p..(i + 1) * q * p], &t, w);
        let qi = hungarian(&cost, q, 1).iter().position(Option::is_some).expect("one column is always assigned");
        targets[i * q + qi] = GLASS;
        rows.push(i * q + qi);
        mask_targets.extend(t.iter().map(|&v| F::of(v)));
        matched.push(Some(qi));
    }
    let flat_cls = g.reshape(class_logits, &[b * q, 2]);
    let mut class_weights = [1.0; 2];
    class_weights[NO_OBJECT] = w.no_object;
    let ce = g.weighted_cross_entropy(flat_cls, targets, &class_weights);
    let class = g.value(ce)[0].f64();
    let mut total = g.scale(ce, w.class);
    let (mut bce, mut dice) = (0.0, 0.0);
    if !rows.is_empty() {
        let flat = g.reshape(mask_logits, &[b * q, p]);
        let sel = g.gather_rows(flat, &rows);
        let lb = g.sigmoid_bce(sel, mask_targets.clone());
        let ld = g.dice_loss(sel, mask_targets);
        bce = g.value(lb)[0].f64();
        dice = g.value(ld)[0].f64();
        let lb = g.scale(lb, w.bce);
        let ld = g.scale(ld, w.dice);
        total = g.add(total, lb);
        total = g.add(total, ld);
    }
    Ok(LossOutput { total, class, bce, dice, matched })
}
