use learnds::datagen::DistributionSpec;
use learnds::eval::{eval_instances, evaluate_model};
use learnds::nn_model::{LossKind, ModelConfig, DATA_PROCESSOR_PREFIX};
use learnds::presets::{freq_preset, nn_preset, FREQ_PRESETS, NN_PRESETS};
use learnds::trainer::{load_model, model_checkpoint, Ablation, StopReason, TrainConfig, Trainer};
use learnds_autodiff::Checkpoint;
use sha2::{Digest, Sha256};

fn small(ablation: Ablation) -> TrainConfig {
    let mut model = ModelConfig::desk(6, 1, 2);
    model.width = 8;
    model.heads = 2;
    model.layers = 1;
    model.query_width = 16;
    TrainConfig {
        distribution: DistributionSpec::uniform1d(6),
        model,
        loss: LossKind::CrossEntropy,
        ablation,
        batch_size: 8,
        lr: 3e-3,
        weight_decay: 0.0,
        max_steps: 12,
        eval_every: 4,
        eval_instances: 40,
        patience: 100,
        seed: 7,
        aux_weight: 1.0,
        log_every: 2,
    }
}

#[test]
fn frozen_ablation_keeps_the_data_processor_fixed() {
    let mut t = Trainer::new(small(Ablation::Frozen)).unwrap();
    let before = t.model.params.clone();
    for _ in 0..5 {
        t.train_step().unwrap();
    }
    let mut moved = 0;
    for ((name, a), b) in before.names().iter().zip(before.tensors()).zip(t.model.params.tensors()) {
        if name.starts_with(DATA_PROCESSOR_PREFIX) {
            assert_eq!(a, b, "{name} changed while frozen");
        } else if a != b {
            moved += 1;
        }
    }
    assert!(moved > 0, "query networks never updated");
}

#[test]
fn end_to_end_training_updates_the_data_processor() {
    let mut t = Trainer::new(small(Ablation::None)).unwrap();
    let before = t.model.params.clone();
    t.train_step().unwrap();
    let changed = before
        .names()
        .iter()
        .zip(before.tensors())
        .zip(t.model.params.tensors())
        .any(|((n, a), b)| n.starts_with(DATA_PROCESSOR_PREFIX) && a != b);
    assert!(changed);
}

#[test]
fn resumed_training_is_bit_identical() {
    let config = small(Ablation::None);
    let mut full = Trainer::new(config.clone()).unwrap();
    assert_eq!(full.run(None, |_| {}).unwrap(), StopReason::MaxSteps);

    let mut first = Trainer::new(config).unwrap();
    assert_eq!(first.run(Some(5), |_| {}).unwrap(), StopReason::Paused);
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut second = Trainer::from_checkpoint(&Checkpoint::read_from(&mut bytes.as_slice()).unwrap()).unwrap();
    assert_eq!(second.step, 5);
    second.run(None, |_| {}).unwrap();

    assert_eq!(full.checkpoint().to_bytes().unwrap(), second.checkpoint().to_bytes().unwrap());
    // NaN losses make LogRow unequal to itself; compare serialized forms.
    assert_eq!(serde_json::to_string(&full.log).unwrap(), serde_json::to_string(&second.log).unwrap());
}

#[test]
fn log_rows_follow_the_configured_cadence() {
    let mut t = Trainer::new(small(Ablation::None)).unwrap();
    let mut steps = Vec::new();
    t.run(None, |r| steps.push((r.step, r.eval_accuracy.is_some()))).unwrap();
    assert_eq!(
        steps,
        vec![(0, true), (2, false), (4, true), (6, false), (8, true), (10, false), (12, true)]
    );
    assert!(t.log[0].train_loss.is_nan());
}

#[test]
fn evaluation_leaves_the_checkpoint_unchanged() {
    let mut t = Trainer::new(small(Ablation::None)).unwrap();
    t.run(None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    t.checkpoint().save(&path).unwrap();
    let digest = || hex::encode(Sha256::digest(std::fs::read(&path).unwrap()));
    let before = digest();
    let ck = Checkpoint::load(&path).unwrap();
    let (model, config) = load_model(&ck).unwrap();
    let instances = eval_instances(&config.distribution, 50, 1).unwrap();
    let report = evaluate_model(&model, &instances).unwrap();
    assert_eq!(report.instances, 50);
    assert_eq!(ck.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(digest(), before);
}

#[test]
fn trainer_and_model_checkpoints_load_the_best_parameters() {
    let mut t = Trainer::new(small(Ablation::None)).unwrap();
    t.run(None, |_| {}).unwrap();
    let best = t.best_model();
    let (from_trainer, _) = load_model(&t.checkpoint()).unwrap();
    let (from_model, _) = load_model(&model_checkpoint(&best, &t.config, t.step)).unwrap();
    assert_eq!(from_trainer.params.tensors(), best.params.tensors());
    assert_eq!(from_model.params.tensors(), best.params.tensors());
}

#[test]
fn tampered_config_is_rejected_on_load() {
    let t = Trainer::new(small(Ablation::None)).unwrap();
    let mut ck = t.checkpoint();
    ck.manifest.meta["config"]["lr"] = serde_json::json!(0.5);
    assert!(matches!(Trainer::from_checkpoint(&ck), Err(learnds::Error::Integrity(_))));
    assert!(matches!(load_model(&ck), Err(learnds::Error::Integrity(_))));
}

#[test]
fn config_round_trips_through_toml_and_hash_tracks_changes() {
    let c = small(Ablation::NonAdaptive);
    let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.hash(), c.hash());
    let mut d = c.clone();
    d.seed += 1;
    assert_ne!(d.hash(), c.hash());
    assert!(!c.effective_model().adaptive);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = small(Ablation::NoPermute);
    assert!(c.validate().is_err(), "cross entropy needs the sort");
    c.loss = LossKind::Mse;
    c.validate().unwrap();
    let mut c = small(Ablation::None);
    c.model.n = 7;
    assert!(c.validate().is_err());
    let mut c = small(Ablation::None);
    c.lr = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn every_preset_validates() {
    for name in NN_PRESETS {
        let c = nn_preset(name).unwrap();
        assert_eq!((c.model.n, c.model.d), (c.distribution.n, c.distribution.d), "{name}");
    }
    for name in FREQ_PRESETS {
        freq_preset(name).unwrap();
    }
    assert!(nn_preset("freq_desk").is_err());
    assert!(freq_preset("uniform1d").is_err());
}

#[test]
fn ablation_names_parse_back() {
    for a in Ablation::ALL {
        assert_eq!(Ablation::parse(a.name()).unwrap(), a);
    }
    assert!(Ablation::parse("bogus").is_err());
}
