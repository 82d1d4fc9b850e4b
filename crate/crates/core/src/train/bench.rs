use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GlassNet;
use crate::raster::ImageTensor;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_passes: usize,
    pub warmup_passes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n_passes: 1000, warmup_passes: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub variant: String,
    pub image_side: usize,
    pub n_passes: usize,
    pub warmup_passes: usize,
    pub mean_latency_s: f64,
    pub fps: f64,
    pub total_params: usize,
    pub trainable_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Mean wall-clock latency of `cfg.n_passes` serial single-image forward
/// passes, after `cfg.warmup_passes` untimed ones.
pub fn benchmark_speed<F: Float>(model: &GlassNet<F>, cfg: &BenchConfig, image_side: usize) -> Result<SpeedReport> {
    benchmark_with(model, cfg, image_side, |_| {})
}

/// As [`benchmark_speed`], calling `on_timed(i)` after timed pass `i`.
pub fn benchmark_with<F: Float>(model: &GlassNet<F>, cfg: &BenchConfig, image_side: usize, mut on_timed: impl FnMut(usize)) -> Result<SpeedReport> {
    if cfg.n_passes == 0 {
        return Err(Error::InvalidArgument("n_passes must be positive".into()));
    }
    let n = 3 * image_side * image_side;
    let image = ImageTensor::new(image_side, image_side, (0..n).map(|i| ((i * 31 % 97) as f32 / 48.0) - 1.0).collect())?;
    image.check_divisible(32)?;
    for _ in 0..cfg.warmup_passes {
        model.predict(&[&image])?;
    }
    let mut total = 0.0;
    for i in 0..cfg.n_passes {
        let t = Instant::now();
        std::hint::black_box(model.predict(&[&image])?);
        total += t.elapsed().as_secs_f64();
        on_timed(i);
    }
    let mean = total / cfg.n_passes as f64;
    let (total_params, trainable_params) = model.count_params();
    Ok(SpeedReport {
        variant: model.variant().to_string(),
        image_side,
        n_passes: cfg.n_passes,
        warmup_passes: cfg.warmup_passes,
        mean_latency_s: mean,
        fps: 1.0 / mean,
        total_params,
        trainable_params,
        config_hash: None,
        seed: None,
    })
}
