use glass_seg::backbones::{freeze_check, snapshot};
use glass_seg::data::{synthesize, DataConfig, Split};
use glass_seg::model::{build_variant, ModelConfig, Variant};
use glass_seg::tensor::ParamStore;
use glass_seg::train::{checkpoint, lr_at, train, AdamW, TrainConfig, TrainRun};
use glass_seg::Error;

fn tiny_data(n_train: usize, n_val: usize, seed: u64) -> (Vec<glass_seg::data::Sample>, Vec<glass_seg::data::Sample>) {
    let dc = DataConfig { image_side: 32, ..DataConfig::default() };
    (synthesize(&dc, seed, Split::Train, n_train).unwrap(), synthesize(&dc, seed, Split::Val, n_val).unwrap())
}

fn tiny_cfg(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: batch, warmup_steps: 1, base_lr: 1e-3, ..TrainConfig::default() }
}

#[test]
fn one_epoch_of_eight_is_one_step() {
    let (tr, va) = tiny_data(8, 2, 1);
    let mut m = build_variant::<f32>(&ModelConfig::new(Variant::LearnedOnly), 1).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 8, warmup_steps: 1, ..TrainConfig::default() };
    let out = train(&mut m, &tr, &va, &TrainConfig { epochs: 1, ..cfg.clone() }, &TrainRun::new(1, 32));
    assert!(matches!(out, Err(Error::InvalidConfig(_))));
    let out = train(&mut m, &tr[..8], &va, &cfg, &TrainRun::new(1, 32)).unwrap();
    assert_eq!(out.history.steps.len(), 2);
    assert_eq!(out.history.steps.iter().filter(|r| r.epoch == 0).count(), 1);
    assert_eq!(out.history.epochs.len(), 2);
}

#[test]
fn frozen_backbone_is_untouched_and_stateless() {
    let (tr, va) = tiny_data(6, 2, 2);
    let mut m = build_variant::<f32>(&ModelConfig::new(Variant::Full), 2).unwrap();
    let frozen = m.general_params().to_vec();
    let before = snapshot(&m.store, &frozen);
    let learned = m.learned_params();
    let learned_before = snapshot(&m.store, &learned);
    let mut run = TrainRun::new(2, 32);
    run.skip_validation = true;
    train(&mut m, &tr, &va, &tiny_cfg(2, 3), &run).unwrap();
    assert!(freeze_check(&before, &snapshot(&m.store, &frozen)));
    assert!(!freeze_check(&learned_before, &snapshot(&m.store, &learned)));
    let opt = AdamW::new(&m.store, &tiny_cfg(1, 1));
    assert!(opt.param_ids().all(|id| !frozen.contains(&id)));
    assert_eq!(opt.state_len(), m.store.trainable_ids().len());
}

#[test]
fn same_seed_same_weights() {
    let (tr, va) = tiny_data(4, 2, 3);
    let run_once = || {
        let mut m = build_variant::<f32>(&ModelConfig::new(Variant::NoSe), 3).unwrap();
        let out = train(&mut m, &tr, &va, &tiny_cfg(2, 2), &TrainRun::new(3, 32)).unwrap();
        (out.final_report.unwrap().iou, m.store.iter().flat_map(|(_, p)| p.value.clone()).map(f32::to_bits).collect::<Vec<_>>())
    };
    assert_eq!(run_once(), run_once());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (tr, va) = tiny_data(6, 2, 4);
    let cfg = tiny_cfg(2, 2);
    let dir = tempfile::tempdir().unwrap();

    let mut whole = build_variant::<f32>(&ModelConfig::new(Variant::LearnedOnly), 4).unwrap();
    let full = train(&mut whole, &tr, &va, &cfg, &TrainRun::new(4, 32)).unwrap();

    let mut run = TrainRun::new(4, 32);
    run.checkpoint_dir = Some(dir.path().to_path_buf());
    run.stop_after = Some(4);
    let mut part = build_variant::<f32>(&ModelConfig::new(Variant::LearnedOnly), 4).unwrap();
    let first = train(&mut part, &tr, &va, &cfg, &run).unwrap();
    assert_eq!(first.steps_done, 4);
    let latest = dir.path().join("latest.safetensors");
    assert_eq!(checkpoint::load(&latest, &mut part.store.clone(), None).unwrap().step, 4);

    run.stop_after = None;
    run.resume = true;
    let mut resumed = build_variant::<f32>(&ModelConfig::new(Variant::LearnedOnly), 4).unwrap();
    let rest = train(&mut resumed, &tr, &va, &cfg, &run).unwrap();
    assert_eq!(rest.steps_done, 6);
    assert_eq!(rest.history.losses(), full.history.losses());
    for ((_, a), (_, b)) in whole.store.iter().zip(resumed.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert!(dir.path().join("best.safetensors").is_file());
}

#[test]
fn checkpoint_roundtrip_and_hash_check() {
    let m = build_variant::<f32>(&ModelConfig::new(Variant::GeneralSmall), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.safetensors");
    let manifest = checkpoint::CheckpointManifest {
        model_config_hash: m.config.hash(),
        config_hash: "abc".into(),
        variant: m.variant().to_string(),
        seed: 5,
        step: 7,
        epoch: 0,
        best_val_iou: None,
        history: None,
    };
    checkpoint::save(&path, &m.store, &manifest, None).unwrap();
    let mut other = build_variant::<f32>(&ModelConfig::new(Variant::GeneralSmall), 6).unwrap();
    assert_eq!(checkpoint::load(&path, &mut other.store, None).unwrap(), manifest);
    for ((_, a), (_, b)) in m.store.iter().zip(other.store.iter()) {
        assert_eq!(a.value, b.value);
    }
    let mut wrong = ParamStore::<f32>::new();
    wrong.add("learned.stem".into(), vec![1], vec![0.0], true);
    assert!(matches!(checkpoint::load(&path, &mut wrong, None), Err(Error::Checkpoint(_))));
    assert!(matches!(checkpoint::load(&dir.path().join("none"), &mut wrong, None), Err(Error::Missing(_))));
    let again = dir.path().join("again.safetensors");
    checkpoint::save(&again, &m.store, &manifest, None).unwrap();
    assert_eq!(checkpoint::file_hash(&path).unwrap(), checkpoint::file_hash(&again).unwrap());
}

#[test]
fn loss_moving_average_falls_early() {
    let dc = DataConfig { image_side: 64, ..DataConfig::default() };
    let mut improved = 0;
    for seed in 0..3 {
        let tr = synthesize(&dc, seed, Split::Train, 16).unwrap();
        let mut m = build_variant::<f32>(&ModelConfig::new(Variant::LearnedOnly), seed).unwrap();
        let cfg = TrainConfig { epochs: 25, batch_size: 8, warmup_steps: 10, base_lr: 1e-3, ..TrainConfig::default() };
        let mut run = TrainRun::new(seed, 64);
        run.skip_validation = true;
        let losses = train(&mut m, &tr, &[], &cfg, &run).unwrap().history.losses();
        let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
        if ma.first() > ma.last() {
            improved += 1;
        }
    }
    assert!(improved >= 2, "moving average fell for only {improved} of 3 seeds");
}

#[test]
fn schedule_is_piecewise_linear() {
    let cfg = TrainConfig::default();
    let total = 1920;
    let mut prev = lr_at(0, total, &cfg).unwrap();
    for s in 1..=total {
        let lr = lr_at(s, total, &cfg).unwrap();
        assert!(lr <= cfg.base_lr);
        assert!((lr - prev).abs() <= cfg.base_lr / 50.0 + 1e-18);
        prev = lr;
    }
}
