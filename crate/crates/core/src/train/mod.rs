//! Optimisation loop, learning-rate schedule, checkpoints and speed benchmark.

pub mod bench;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bench::{benchmark_speed, benchmark_with, BenchConfig, SpeedReport};
pub use checkpoint::CheckpointManifest;

use crate::data::{augment_flip, resize_pair, Sample};
use crate::decoder::match_and_loss;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, MetricConfig, MetricReport};
use crate::model::GlassNet;
use crate::tensor::{Float, Gradients, Graph, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            base_lr: 1e-4,
            weight_decay: 1e-4,
            warmup_steps: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("train: {m}")));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("base_lr must be positive and weight_decay non-negative");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must be in [0, 1) and eps positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n_samples: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(n_samples)
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then linear decay to
/// 0 at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> Result<f64> {
    let w = cfg.warmup_steps;
    if w == 0 || w >= total_steps {
        return Err(Error::InvalidConfig(format!("warmup_steps {w} must be in 1..{total_steps}")));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} outside 0..={total_steps}")));
    }
    Ok(if step <= w {
        cfg.base_lr * (step as f64 / w as f64)
    } else {
        cfg.base_lr * ((total_steps - step) as f64 / (total_steps - w) as f64)
    })
}

/// Decoupled-weight-decay Adam over a fixed parameter set.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<ParamId, (Vec<F>, Vec<F>)>,
}

impl<F: Float> AdamW<F> {
    /// Optimizer over the trainable parameters of `store`.
    pub fn new(store: &ParamStore<F>, cfg: &TrainConfig) -> Self {
        let state = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, (vec![F::zero(); p.numel()], vec![F::zero(); p.numel()])))
            .collect();
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, step: 0, state }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.state.keys().copied()
    }

    /// Number of parameter tensors holding state.
    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[F], &[F])> {
        self.state.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub(crate) fn restore(&mut self, step: u64, moments: Vec<(ParamId, Vec<F>, Vec<F>)>) {
        self.step = step;
        for (id, m, v) in moments {
            if let Some(s) = self.state.get_mut(&id) {
                *s = (m, v);
            }
        }
    }

    /// One update at learning rate `lr`. Parameters without a gradient still
    /// decay.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (&id, (m, v)) in self.state.iter_mut() {
            let p = &mut store.get_mut(id).value;
            let g = grads.param(id);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i].f64());
                let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
                m[i] = F::of(mi);
                v[i] = F::of(vi);
                let pi = p[i].f64();
                let upd = (mi / c1) / ((vi / c2).sqrt() + self.eps) + self.weight_decay * pi;
                p[i] = F::of(pi - lr * upd);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub val_iou: f64,
    pub val_f_beta: f64,
    pub val_mae: f64,
    pub val_ber: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss,class,bce,dice\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{:e},{},{},{},{}", r.step, r.epoch, r.lr, r.loss, r.class, r.bce, r.dice);
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,step,mean_loss,val_iou,val_f_beta,val_mae,val_ber\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.epoch, r.step, r.mean_loss, r.val_iou, r.val_f_beta, r.val_mae, r.val_ber);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss).collect()
    }
}

/// Run-level settings that sit outside the optimiser hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub seed: u64,
    pub image_side: usize,
    pub metrics: MetricConfig,
    /// Score validation against masks at their stored size.
    pub native_resolution_eval: bool,
    pub config_hash: String,
    /// Where `latest.safetensors` and `best.safetensors` go.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop (after checkpointing) once this many optimizer steps are done.
    pub stop_after: Option<u64>,
    /// Skip validation; epochs then record NaN metrics.
    pub skip_validation: bool,
}

impl TrainRun {
    pub fn new(seed: u64, image_side: usize) -> Self {
        Self {
            seed,
            image_side,
            metrics: MetricConfig::default(),
            native_resolution_eval: false,
            config_hash: String::new(),
            checkpoint_dir: None,
            resume: false,
            stop_after: None,
            skip_validation: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub history: TrainHistory,
    /// Validation report after the last completed epoch.
    pub final_report: Option<MetricReport>,
    pub best_val_iou: Option<f64>,
    pub steps_done: u64,
}

const AUG_STREAM: u64 = 0xA0A0_0000_0000_0000;

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(AUG_STREAM ^ ((epoch as u64) << 32) ^ index as u64);
    rng
}

fn manifest<F: Float>(model: &GlassNet<F>, run: &TrainRun, step: u64, epoch: usize, best: Option<f64>, history: Option<TrainHistory>) -> CheckpointManifest {
    CheckpointManifest {
        model_config_hash: model.config.hash(),
        config_hash: run.config_hash.clone(),
        variant: model.variant().to_string(),
        seed: run.seed,
        step,
        epoch,
        best_val_iou: best,
        history,
    }
}

/// Trains `model` in place. Each step draws a shuffled batch, applies random
/// flips, and minimises the matching loss; validation runs after every epoch.
pub fn train<F: Float>(model: &mut GlassNet<F>, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig, run: &TrainRun) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if !run.skip_validation && val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let side = run.image_side;
    let train_data: Vec<Sample> = train_set.iter().map(|s| resize_pair(s, side)).collect::<Result<_>>()?;
    let val_data: Vec<Sample> = if run.native_resolution_eval {
        val_set.to_vec()
    } else {
        val_set.iter().map(|s| resize_pair(s, side)).collect::<Result<_>>()?
    };
    let n = train_data.len();
    let per_epoch = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);
    lr_at(0, total, cfg)?;

    let mut opt = AdamW::new(&model.store, cfg);
    let mut history = TrainHistory::default();
    let mut best: Option<f64> = None;
    let mut final_report = None;
    let latest = run.checkpoint_dir.as_ref().map(|d| d.join("latest.safetensors"));
    let best_path = run.checkpoint_dir.as_ref().map(|d| d.join("best.safetensors"));

    if run.resume {
        let path = latest.as_ref().ok_or_else(|| Error::InvalidArgument("resume needs a checkpoint directory".into()))?;
        let m = checkpoint::load(path, &mut model.store, Some(&mut opt))?;
        if m.model_config_hash != model.config.hash() {
            return Err(Error::ConfigHashMismatch { expected: model.config.hash(), found: m.model_config_hash });
        }
        history = m.history.unwrap_or_default();
        best = m.best_val_iou;
    }

    let mut step = opt.step_count();
    let mut stopped = false;
    while step < total {
        let epoch = (step / per_epoch) as usize;
        let order = epoch_order(run.seed, epoch, n);
        let first = (step % per_epoch) as usize;
        for b in first..per_epoch as usize {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let batch: Vec<Sample> = idx.iter().map(|&i| augment_flip(&train_data[i], &mut sample_rng(run.seed, epoch, i))).collect();
            let lr = lr_at(step + 1, total, cfg)?;
            let (grads, rec) = {
                let mut g = Graph::new(&model.store);
                let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
                let x = model.input(&mut g, &images)?;
                let out = model.forward(&mut g, x)?;
                let gts: Vec<_> = batch.iter().map(|s| s.mask.clone()).collect();
                let loss = match_and_loss(&mut g, out.queries.class_logits, out.mask_logits, &gts, &model.config.decoder.loss)?;
                let value = g.value(loss.total)[0].f64();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { step: step + 1, value });
                }
                let rec = StepRecord { step: step + 1, epoch, lr, loss: value, class: loss.class, bce: loss.bce, dice: loss.dice };
                (g.backward(loss.total), rec)
            };
            opt.update(&mut model.store, &grads, lr);
            step += 1;
            history.steps.push(rec);
            if run.stop_after.is_some_and(|s| step >= s) && step % per_epoch != 0 {
                stopped = true;
                break;
            }
        }
        if stopped {
            break;
        }
        let losses: Vec<f64> = history.steps.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let mut rec = EpochRecord { epoch, step, mean_loss, val_iou: f64::NAN, val_f_beta: f64::NAN, val_mae: f64::NAN, val_ber: f64::NAN };
        if !run.skip_validation {
            let (report, _) = evaluate_dataset(model, &val_data, Some(side), cfg.eval_batch_size, &run.metrics)?;
            rec.val_iou = report.iou;
            rec.val_f_beta = report.f_beta;
            rec.val_mae = report.mae;
            rec.val_ber = report.ber;
            if best.is_none_or(|b| report.iou > b) {
                best = Some(report.iou);
                if let Some(p) = &best_path {
                    checkpoint::save(p, &model.store, &manifest(model, run, step, epoch, best, None), None)?;
                }
            }
            final_report = Some(report);
        }
        log::info!("epoch {epoch} step {step} loss {mean_loss:.4} val_iou {:.4}", rec.val_iou);
        history.epochs.push(rec);
        if let Some(p) = &latest {
            checkpoint::save(p, &model.store, &manifest(model, run, step, epoch, best, Some(history.clone())), Some(&opt))?;
        }
        if run.stop_after.is_some_and(|s| step >= s) {
            stopped = true;
            break;
        }
    }
    if stopped && step % per_epoch != 0 {
        if let Some(p) = &latest {
            let epoch = (step / per_epoch) as usize;
            checkpoint::save(p, &model.store, &manifest(model, run, step, epoch, best, Some(history.clone())), Some(&opt))?;
        }
    }
    Ok(TrainOutput { history, final_report, best_val_iou: best, steps_done: step })
}
