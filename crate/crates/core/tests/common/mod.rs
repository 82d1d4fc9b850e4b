#![allow(dead_code)]

use glass_seg::decoder::{match_and_loss, PixelDecoder};
use glass_seg::fusion::{FusionConfig, SeChannelReduction};
use glass_seg::model::{build_variant, ModelConfig, Variant};
use glass_seg::raster::{BinaryMask, ImageTensor};
use glass_seg::tensor::{Graph, ParamBuilder, ParamId, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-pixel reference values for one prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Oracle {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub iou: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub ber: f64,
}

pub fn oracle(pred: &[u8], gt: &[u8], beta_sq: f64) -> Oracle {
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    let mut abs_err = 0.0;
    for i in 0..gt.len() {
        let (p, g) = (pred[i] == 1, gt[i] == 1);
        if p && g {
            tp += 1;
        } else if p {
            fp += 1;
        } else if g {
            fn_ += 1;
        } else {
            tn += 1;
        }
        abs_err += (pred[i] as f64 - gt[i] as f64).abs();
    }
    let union = tp + fp + fn_;
    let iou = if union == 0 { 1.0 } else { tp as f64 / union as f64 };
    let f_beta = if tp == 0 {
        if fp + fn_ == 0 { 1.0 } else { 0.0 }
    } else {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
    };
    let tpr = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let tnr = if tn + fp == 0 { 1.0 } else { tn as f64 / (tn + fp) as f64 };
    let ber = 100.0 * (1.0 - (tpr + tnr) / 2.0);
    Oracle { tp, fp, tn, fn_, iou, f_beta, mae: abs_err / gt.len() as f64, ber }
}

/// Random mask with a per-mask foreground rate, so empty and full masks occur.
pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let rate = match rng.gen_range(0..10) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.gen_range(0.0..1.0),
    };
    (0..n).map(|_| u8::from(rng.gen_bool(rate))).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Minimum total cost over all assignments of `min(n, m)` pairs.
pub fn brute_force_assignment(cost: &[f64], n: usize, m: usize) -> f64 {
    fn go(cost: &[f64], m: usize, row: usize, n: usize, used: &mut [bool], left: usize) -> f64 {
        if left == 0 {
            return 0.0;
        }
        if n - row < left {
            return f64::INFINITY;
        }
        let mut best = go(cost, m, row + 1, n, used, left);
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row * m + j] + go(cost, m, row + 1, n, used, left - 1));
                used[j] = false;
            }
        }
        best
    }
    go(cost, m, 0, n, &mut vec![false; m], n.min(m))
}

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
pub const FLOOR: f64 = 1e-6;
pub const SAMPLES: usize = 20;

/// Compares backprop against central differences on `SAMPLES` random
/// trainable scalars; returns the worst relative error.
pub fn worst_error(store: &mut ParamStore<f64>, seed: u64, loss: impl for<'a> Fn(&mut Graph<'a, f64>) -> Var) -> f64 {
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l)
    };
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::inference(s);
        let l = loss(&mut g);
        g.value(l)[0]
    };
    let ids: Vec<ParamId> = store.trainable_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..SAMPLES {
        let id = ids[rng.gen_range(0..ids.len())];
        let k = rng.gen_range(0..store.get(id).numel());
        let analytic = grads.param(id).map_or(0.0, |g| g[k]);
        let orig = store.get(id).value[k];
        store.get_mut(id).value[k] = orig + STEP;
        let up = eval(store);
        store.get_mut(id).value[k] = orig - STEP;
        let down = eval(store);
        store.get_mut(id).value[k] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    worst
}

pub fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}


pub fn se_reduction_error() -> f64 {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let block = SeChannelReduction::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("se"), 24, 16, &FusionConfig::default()).unwrap();
    let x = random(&mut rng, 2 * 24 * 5 * 5);
    let w = random(&mut rng, 2 * 16 * 5 * 5);
    let err = worst_error(&mut store, 1, |g| {
        let xv = g.input(x.clone(), &[2, 24, 5, 5]);
        let y = block.forward(g, xv);
        let wv = g.input(w.clone(), &[2, 16, 5, 5]);
        let p = g.mul(y, wv);
        g.sum_all(p)
    });
    err
}

pub fn pixel_decoder_error() -> f64 {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let channels = [8, 12, 16, 16];
    let dec = PixelDecoder::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("pd"), channels, 16);
    let sides = [8, 4, 2, 1];
    let levels: Vec<Vec<f64>> = (0..4).map(|i| random(&mut rng, channels[i] * sides[i] * sides[i])).collect();
    let w = random(&mut rng, 16 * 8 * 8);
    let err = worst_error(&mut store, 2, |g| {
        let l: Vec<Var> = (0..4).map(|i| g.input(levels[i].clone(), &[1, channels[i], sides[i], sides[i]])).collect();
        let out = dec.forward(g, [l[0], l[1], l[2], l[3]]).unwrap();
        let wv = g.input(w.clone(), &[1, 16, 8, 8]);
        let mut total = g.mul(out.pixel_embedding, wv);
        total = g.sum_all(total);
        for c in out.context_levels {
            let s = g.mean_all(c);
            total = g.add(total, s);
        }
        total
    });
    err
}

pub fn full_model_error() -> f64 {
    let mut model = build_variant::<f64>(&ModelConfig::new(Variant::Full), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let image = ImageTensor::new(32, 32, (0..3 * 32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let gt = BinaryMask::new(32, 32, (0..32 * 32).map(|i| u8::from((i % 32) < 14 && i / 32 > 6)).collect()).unwrap();
    let weights = model.config.decoder.loss.clone();
    let mut store = std::mem::take(&mut model.store);
    let err = worst_error(&mut store, 3, |g| {
        let x = model.input(g, &[&image]).unwrap();
        let out = model.forward(g, x).unwrap();
        match_and_loss(g, out.queries.class_logits, out.mask_logits, std::slice::from_ref(&gt), &weights).unwrap().total
    });
    err
}
