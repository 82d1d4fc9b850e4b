mod common;

use common::brute_force_assignment;
use glass_seg::data::{flip, Sample};
use glass_seg::decoder::{hungarian, QuerySet};
use glass_seg::fusion::channel_mid;
use glass_seg::metrics::{ber, f_beta, iou, ConfusionCounts};
use glass_seg::model::{build_variant, ModelConfig, Variant};
use glass_seg::raster::{BinaryMask, ImageTensor};
use glass_seg::tensor::Graph;
use glass_seg::train::{lr_at, TrainConfig};
use proptest::prelude::*;

fn counts() -> impl Strategy<Value = ConfusionCounts> {
    (0u64..50, 0u64..50, 0u64..50, 0u64..50).prop_map(|(tp, fp, tn, fn_)| ConfusionCounts { tp, fp, tn, fn_ })
}

proptest! {
    #[test]
    fn channel_mid_bounds(c_in in 1usize..4096, frac in 0.0f64..1.0) {
        let c_out = ((c_in as f64 * frac) as usize).max(1);
        let mid = channel_mid(c_in, c_out).unwrap();
        prop_assert!(c_out <= mid && mid <= c_in);
        prop_assert_eq!(mid, (c_in / 2).max(c_out));
    }

    #[test]
    fn channel_mid_widens_to_target(c_in in 1usize..512, extra in 1usize..64) {
        prop_assert_eq!(channel_mid(c_in, c_in + extra).unwrap(), c_in + extra);
    }

    #[test]
    fn metric_ranges(c in counts(), beta_sq in 0.01f64..4.0) {
        for v in [iou(&c), f_beta(&c, beta_sq)] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
        prop_assert!((0.0..=100.0).contains(&ber(&c)));
    }

    #[test]
    fn iou_symmetric_under_swap(c in counts()) {
        let swapped = ConfusionCounts { fp: c.fn_, fn_: c.fp, ..c };
        prop_assert_eq!(iou(&c), iou(&swapped));
    }

    #[test]
    fn hungarian_is_optimal(n in 1usize..6, m in 1usize..6, seed in any::<u64>()) {
        let mut x = seed | 1;
        let cost: Vec<f64> = (0..n * m).map(|_| { x ^= x << 13; x ^= x >> 7; x ^= x << 17; (x % 1000) as f64 / 100.0 }).collect();
        let a = hungarian(&cost, n, m);
        prop_assert_eq!(a.iter().flatten().count(), n.min(m));
        let mut cols: Vec<usize> = a.iter().flatten().copied().collect();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(cols.len(), n.min(m));
        let total: f64 = a.iter().enumerate().filter_map(|(i, c)| c.map(|c| cost[i * m + c])).sum();
        prop_assert!((total - brute_force_assignment(&cost, n, m)).abs() < 1e-9);
    }

    #[test]
    fn lr_bounded_and_peaks_at_warmup(warmup in 1u64..100, extra in 1u64..400, step in 0u64..500) {
        let cfg = TrainConfig { warmup_steps: warmup, ..TrainConfig::default() };
        let total = warmup + extra;
        let step = step.min(total);
        let lr = lr_at(step, total, &cfg).unwrap();
        prop_assert!(lr >= 0.0 && lr <= cfg.base_lr);
        prop_assert_eq!(lr_at(warmup, total, &cfg).unwrap(), cfg.base_lr);
        prop_assert_eq!(lr_at(0, total, &cfg).unwrap(), 0.0);
        prop_assert_eq!(lr_at(total, total, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn flips_are_involutions(h in 1usize..6, w in 1usize..6, hf: bool, vf: bool, seed in any::<u32>()) {
        let n = h * w;
        let image = ImageTensor::new(h, w, (0..3 * n).map(|i| ((i as u32 ^ seed) % 17) as f32).collect()).unwrap();
        let mask = BinaryMask::new(h, w, (0..n).map(|i| ((i as u32 ^ seed) % 2) as u8).collect()).unwrap();
        let s = Sample::new(image, mask, "s").unwrap();
        let twice = flip(&flip(&s, hf, vf), hf, vf);
        prop_assert_eq!(&twice, &s);
        prop_assert_eq!(flip(&s, hf, vf).mask.count_ones(), s.mask.count_ones());
    }

    #[test]
    fn nearest_resize_keeps_binary(h in 1usize..12, w in 1usize..12, th in 1usize..12, tw in 1usize..12) {
        let mask = BinaryMask::new(h, w, (0..h * w).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let r = mask.resize_nearest(th, tw);
        prop_assert_eq!((r.height, r.width), (th, tw));
        prop_assert!(r.data.iter().all(|&v| v <= 1));
    }
}

#[test]
fn query_order_permutes_outputs() {
    let mut m = build_variant::<f64>(&ModelConfig::new(Variant::LearnedOnly), 21).unwrap();
    let image = ImageTensor::new(64, 64, (0..3 * 64 * 64).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect()).unwrap();
    let run = |m: &glass_seg::model::GlassNet<f64>| {
        let mut g = Graph::inference(&m.store);
        let x = m.input(&mut g, &[&image]).unwrap();
        let out = m.forward(&mut g, x).unwrap();
        let qs = QuerySet::from_graph(&g, &out.queries, 0).unwrap();
        let conf = m.confidences(&g, &out, (64, 64)).unwrap().remove(0);
        (qs.class_logits, g.value(out.mask_logits).to_vec(), conf)
    };
    let (cls, masks, conf) = run(&m);
    let (q, d) = (m.n_queries(), m.config.decoder.embed_dim);
    let perm: Vec<usize> = (0..q).map(|i| (i * 5 + 3) % q).collect();
    for name in ["query_decoder.query_feat", "query_decoder.query_pos"] {
        let id = m.store.find(name).unwrap();
        let old = m.store.get(id).value.clone();
        let p = &mut m.store.get_mut(id).value;
        for (i, &src) in perm.iter().enumerate() {
            p[i * d..(i + 1) * d].copy_from_slice(&old[src * d..(src + 1) * d]);
        }
    }
    let (cls2, masks2, conf2) = run(&m);
    let hw = masks.len() / q;
    for (i, &src) in perm.iter().enumerate() {
        for k in 0..2 {
            assert!((cls2[i * 2 + k] - cls[src * 2 + k]).abs() < 1e-9);
        }
        for k in 0..hw {
            assert!((masks2[i * hw + k] - masks[src * hw + k]).abs() < 1e-9);
        }
    }
    for (a, b) in conf.data.iter().zip(&conf2.data) {
        assert!((a - b).abs() < 1e-5);
    }
}
