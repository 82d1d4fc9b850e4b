//! Segmentation metrics (IoU, F-measure, MAE, BER), reliability curves and
//! TP/FP/FN overlays.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::{Deserialize, Serialize};

use crate::data::{resize_pair, Sample};
use crate::error::{Error, Result};
use crate::model::GlassNet;
use crate::raster::{BinaryMask, ConfidenceMap};
use crate::tensor::{resize_bilinear, Float};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

fn same_size(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("prediction {}x{} vs ground truth {}x{}", a.0, a.1, b.0, b.1)));
    }
    Ok(())
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    same_size((pred.height, pred.width), (gt.height, gt.width))?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `tp / (tp + fp + fn)`, 1 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// `(1 + β²)·P·R / (β²·P + R)`; 1 when both masks are empty, 0 when nothing is hit.
pub fn f_beta(c: &ConfusionCounts, beta_sq: f64) -> f64 {
    if c.tp == 0 {
        return if c.fp == 0 && c.fn_ == 0 { 1.0 } else { 0.0 };
    }
    let p = c.tp as f64 / (c.tp + c.fp) as f64;
    let r = c.tp as f64 / (c.tp + c.fn_) as f64;
    (1.0 + beta_sq) * p * r / (beta_sq * p + r)
}

/// Balanced error rate in percent. A class missing from the ground truth
/// counts as perfectly recalled.
pub fn ber(c: &ConfusionCounts) -> f64 {
    let pos = if c.tp + c.fn_ == 0 { 1.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let neg = if c.tn + c.fp == 0 { 1.0 } else { c.tn as f64 / (c.tn + c.fp) as f64 };
    100.0 * (1.0 - 0.5 * (pos + neg))
}

/// Mean `|pred − gt|` of a binary prediction.
pub fn mae_binary(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    same_size((pred.height, pred.width), (gt.height, gt.width))?;
    let wrong = pred.data.iter().zip(&gt.data).filter(|(p, g)| p != g).count();
    Ok(wrong as f64 / gt.len().max(1) as f64)
}

/// Mean `|confidence − gt|`.
pub fn mae_confidence(conf: &ConfidenceMap, gt: &BinaryMask) -> Result<f64> {
    same_size((conf.height, conf.width), (gt.height, gt.width))?;
    let s: f64 = conf.data.iter().zip(&gt.data).map(|(&c, &g)| (c as f64 - g as f64).abs()).sum();
    Ok(s / gt.len().max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaeMode {
    Binary,
    Confidence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Metrics per image, then a uniform mean over images.
    PerImage,
    /// Confusion counts pooled over the dataset first.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub beta_sq: f64,
    pub threshold: f64,
    pub mae_mode: MaeMode,
    pub aggregation: Aggregation,
    pub n_bins: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { beta_sq: 0.3, threshold: 0.5, mae_mode: MaeMode::Binary, aggregation: Aggregation::PerImage, n_bins: 10 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_sq > 0.0 && self.beta_sq.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta_sq {} must be positive", self.beta_sq)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.n_bins == 0 {
            return Err(Error::InvalidConfig("n_bins must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub ber: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub f_beta: f64,
    pub mae: f64,
    pub ber: f64,
    pub n_images: usize,
    pub aggregation: Aggregation,
    pub per_image: Vec<ImageMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Scores confidence maps against masks of the same size.
pub fn evaluate_predictions(ids: &[String], confs: &[ConfidenceMap], gts: &[BinaryMask], cfg: &MetricConfig) -> Result<MetricReport> {
    if confs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if confs.len() != gts.len() || ids.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions, {} masks, {} ids", confs.len(), gts.len(), ids.len())));
    }
    let mut per_image = Vec::with_capacity(confs.len());
    let mut pooled = ConfusionCounts::default();
    let mut mae_sum = 0.0;
    let mut pixels = 0usize;
    for ((id, conf), gt) in ids.iter().zip(confs).zip(gts) {
        let pred = conf.binarize(cfg.threshold);
        let c = confusion(&pred, gt)?;
        let mae = match cfg.mae_mode {
            MaeMode::Binary => mae_binary(&pred, gt)?,
            MaeMode::Confidence => mae_confidence(conf, gt)?,
        };
        pooled = pooled + c;
        mae_sum += mae * gt.len() as f64;
        pixels += gt.len();
        per_image.push(ImageMetrics { id: id.clone(), iou: iou(&c), f_beta: f_beta(&c, cfg.beta_sq), mae, ber: ber(&c) });
    }
    let n = per_image.len() as f64;
    let (iou_v, f_v, mae_v, ber_v) = match cfg.aggregation {
        Aggregation::PerImage => (
            per_image.iter().map(|m| m.iou).sum::<f64>() / n,
            per_image.iter().map(|m| m.f_beta).sum::<f64>() / n,
            per_image.iter().map(|m| m.mae).sum::<f64>() / n,
            per_image.iter().map(|m| m.ber).sum::<f64>() / n,
        ),
        Aggregation::Global => (iou(&pooled), f_beta(&pooled, cfg.beta_sq), mae_sum / pixels.max(1) as f64, ber(&pooled)),
    };
    Ok(MetricReport {
        iou: iou_v,
        f_beta: f_v,
        mae: mae_v,
        ber: ber_v,
        n_images: per_image.len(),
        aggregation: cfg.aggregation,
        per_image,
        config_hash: None,
        seed: None,
    })
}

/// Runs `model` over `samples` in batches and scores the predictions.
///
/// With `model_side = Some(s)` each image is resized to `s × s` for the
/// network and the confidence map is resized back to the sample's own
/// resolution before scoring; with `None` samples are fed as they are.
pub fn evaluate_dataset<F: Float>(
    model: &GlassNet<F>,
    samples: &[Sample],
    model_side: Option<usize>,
    batch_size: usize,
    cfg: &MetricConfig,
) -> Result<(MetricReport, Vec<ConfidenceMap>)> {
    if samples.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut confs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<Sample> = match model_side {
            Some(side) => chunk.iter().map(|s| resize_pair(s, side)).collect::<Result<_>>()?,
            None => chunk.to_vec(),
        };
        let refs: Vec<_> = inputs.iter().map(|s| &s.image).collect();
        for (conf, original) in model.predict(&refs)?.into_iter().zip(chunk) {
            let (h, w) = (original.mask.height, original.mask.width);
            let conf = if (conf.height, conf.width) == (h, w) {
                conf
            } else {
                let data = resize_bilinear(&conf.data, 1, (conf.height, conf.width), (h, w));
                ConfidenceMap::new(h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?
            };
            confs.push(conf);
        }
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let gts: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = evaluate_predictions(&ids, &confs, &gts, cfg)?;
    Ok((report, confs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub low: f64,
    pub high: f64,
    /// `None` for empty bins.
    pub mean_conf: Option<f64>,
    pub frequency: Option<f64>,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationCurve {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `(mean confidence, glass frequency)` of occupied bins.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.bins.iter().filter_map(|b| Some((b.mean_conf?, b.frequency?))).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,mean_conf,frequency,count\n");
        for b in &self.bins {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
            let _ = writeln!(s, "{:.6},{:.6},{},{},{}", b.low, b.high, opt(b.mean_conf), opt(b.frequency), b.count);
        }
        s
    }

    /// Reliability diagram: diagonal reference in grey, curve in red.
    pub fn render(&self, size: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
        let m = (size / 10) as f32;
        let span = size as f32 - 2.0 * m;
        let at = |c: f64, f: f64| (m + c as f32 * span, m + (1.0 - f as f32) * span);
        draw_hollow_rect_mut(&mut img, Rect::at(m as i32, m as i32).of_size(span as u32, span as u32), Rgb([0, 0, 0]));
        draw_line_segment_mut(&mut img, at(0.0, 0.0), at(1.0, 1.0), Rgb([160, 160, 160]));
        let pts = self.points();
        for w in pts.windows(2) {
            draw_line_segment_mut(&mut img, at(w[0].0, w[0].1), at(w[1].0, w[1].1), Rgb([200, 30, 30]));
        }
        for &(c, f) in &pts {
            let (x, y) = at(c, f);
            draw_filled_circle_mut(&mut img, (x as i32, y as i32), 3, Rgb([200, 30, 30]));
        }
        img
    }

    pub fn save(&self, csv_path: &Path, png_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv())?;
        self.render(400).save(png_path)?;
        Ok(())
    }
}

/// Equal-width reliability bins over `[0, 1]`.
pub fn calibration_curve(confs: &[ConfidenceMap], gts: &[BinaryMask], n_bins: usize) -> Result<CalibrationCurve> {
    if confs.is_empty() {
        return Err(Error::Empty("calibration input"));
    }
    if confs.len() != gts.len() || n_bins == 0 {
        return Err(Error::InvalidArgument(format!("{} maps, {} masks, {n_bins} bins", confs.len(), gts.len())));
    }
    let mut sum_conf = vec![0.0f64; n_bins];
    let mut glass = vec![0u64; n_bins];
    let mut count = vec![0u64; n_bins];
    for (conf, gt) in confs.iter().zip(gts) {
        same_size((conf.height, conf.width), (gt.height, gt.width))?;
        for (&c, &g) in conf.data.iter().zip(&gt.data) {
            let b = ((c as f64 * n_bins as f64) as usize).min(n_bins - 1);
            sum_conf[b] += c as f64;
            glass[b] += g as u64;
            count[b] += 1;
        }
    }
    let bins = (0..n_bins)
        .map(|b| {
            let n = count[b];
            CalibrationBin {
                low: b as f64 / n_bins as f64,
                high: (b + 1) as f64 / n_bins as f64,
                mean_conf: (n > 0).then(|| sum_conf[b] / n as f64),
                frequency: (n > 0).then(|| glass[b] as f64 / n as f64),
                count: n,
            }
        })
        .collect();
    Ok(CalibrationCurve { bins })
}

pub const TP_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];
pub const OVERLAY_ALPHA: f64 = 0.5;

/// Blends TP green, FP red and FN blue over interleaved RGB; TN pixels are untouched.
pub fn render_overlay(rgb: &[u8], pred: &BinaryMask, gt: &BinaryMask) -> Result<RgbImage> {
    same_size((pred.height, pred.width), (gt.height, gt.width))?;
    if rgb.len() != 3 * gt.len() {
        return Err(Error::ShapeMismatch(format!("rgb buffer of {} bytes for {} pixels", rgb.len(), gt.len())));
    }
    let mut out = rgb.to_vec();
    for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
        let color = match (p, g) {
            (1, 1) => TP_COLOR,
            (1, _) => FP_COLOR,
            (_, 1) => FN_COLOR,
            _ => continue,
        };
        for c in 0..3 {
            let v = (1.0 - OVERLAY_ALPHA) * rgb[3 * i + c] as f64 + OVERLAY_ALPHA * color[c] as f64;
            out[3 * i + c] = v.round() as u8;
        }
    }
    Ok(RgbImage::from_raw(gt.width as u32, gt.height as u32, out).expect("buffer size checked"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.to_vec()).unwrap()
    }

    #[test]
    fn worked_examples() {
        let c = ConfusionCounts { tp: 2, fp: 1, tn: 0, fn_: 1 };
        assert_eq!(iou(&c), 0.5);
        let c = ConfusionCounts { tp: 1, fp: 0, tn: 0, fn_: 1 };
        assert!((f_beta(&c, 0.3) - 0.65 / 0.80).abs() < 1e-15);
        let c = ConfusionCounts { tp: 1, fp: 1, tn: 0, fn_: 0 };
        assert!((f_beta(&c, 0.3) - 0.65 / 1.15).abs() < 1e-15);
        assert_eq!(f_beta(&ConfusionCounts { tp: 0, fp: 3, tn: 1, fn_: 0 }, 0.3), 0.0);
        let c = ConfusionCounts { tp: 2, fp: 1, tn: 3, fn_: 2 };
        assert!((ber(&c) - 37.5).abs() < 1e-12);
        assert_eq!(iou(&ConfusionCounts { tp: 0, fp: 0, tn: 9, fn_: 0 }), 1.0);
        assert_eq!(f_beta(&ConfusionCounts { tp: 0, fp: 0, tn: 9, fn_: 0 }, 0.3), 1.0);
        assert_eq!(ber(&ConfusionCounts { tp: 0, fp: 0, tn: 9, fn_: 0 }), 0.0);
    }

    #[test]
    fn confusion_examples() {
        let gt = mask(&[1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(confusion(&gt, &gt).unwrap(), ConfusionCounts { tp: 7, fp: 0, tn: 9, fn_: 0 });
        let inv = mask(&gt.data.iter().map(|v| 1 - v).collect::<Vec<_>>());
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(ber(&c), 100.0);
        assert!(confusion(&mask(&[1]), &mask(&[1, 0])).is_err());
    }

    #[test]
    fn mae_examples() {
        let gt = mask(&[1, 0, 1, 0]);
        assert_eq!(mae_binary(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae_binary(&mask(&[1, 1, 1, 0]), &gt).unwrap(), 0.25);
        assert_eq!(mae_confidence(&ConfidenceMap::filled(1, 4, 0.5), &gt).unwrap(), 0.5);
    }

    #[test]
    fn single_bin_curve() {
        let c = calibration_curve(&[ConfidenceMap::filled(2, 2, 1.0)], &[BinaryMask::new(2, 2, vec![1; 4]).unwrap()], 10).unwrap();
        assert_eq!(c.points(), vec![(1.0, 1.0)]);
        assert_eq!(c.total(), 4);
        assert_eq!(c.to_csv().lines().count(), 11);
    }

    #[test]
    fn overlay_colors() {
        let rgb = vec![100u8; 12];
        let img = render_overlay(&rgb, &mask(&[1, 1, 0, 0]), &mask(&[1, 0, 1, 0])).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [50, 178, 50]);
        assert_eq!(img.get_pixel(1, 0).0, [178, 50, 50]);
        assert_eq!(img.get_pixel(2, 0).0, [50, 50, 178]);
        assert_eq!(img.get_pixel(3, 0).0, [100, 100, 100]);
    }

    #[test]
    fn identical_images_match_single_image_report() {
        let gt = mask(&[1, 0, 1, 1]);
        let conf = ConfidenceMap::new(1, 4, vec![0.9, 0.6, 0.2, 0.7]).unwrap();
        let cfg = MetricConfig::default();
        let one = evaluate_predictions(&["a".into()], &[conf.clone()], &[gt.clone()], &cfg).unwrap();
        let three = evaluate_predictions(&["a".into(), "b".into(), "c".into()], &vec![conf; 3], &vec![gt; 3], &cfg).unwrap();
        for (a, b) in [(one.iou, three.iou), (one.f_beta, three.f_beta), (one.mae, three.mae), (one.ber, three.ber)] {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(evaluate_predictions(&[], &[], &[], &cfg).is_err());
    }
}
