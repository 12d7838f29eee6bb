use std::collections::BTreeSet;

use artiscope::config::{RunConfig, Stage, Variant};
use artiscope::data::{ClassTable, Sample};
use artiscope::metrics::{auroc, collect_records};
use artiscope::model::{Model, ScoreMode};
use artiscope::params::ParamGroup;
use artiscope::synth::toy_dataset;
use artiscope::training::{
    load_checkpoint, prepare_all, run_stage, save_checkpoint, train_full, StageConfig, Trainer,
};
use artiscope::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_samples(per_class: usize, seed: u64) -> Vec<Sample> {
    toy_dataset(&ClassTable::default(), per_class, 32, seed)
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

fn short(epochs: [usize; 3]) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.train.epochs = epochs;
    cfg
}

fn checksums(m: &Model) -> Vec<(String, String)> {
    let mut v: Vec<_> = m.checksums().into_iter().collect();
    v.sort();
    v
}

#[test]
fn stage_two_step_touches_only_text_parameters() {
    let mut model = Model::from_config(&RunConfig::toy()).unwrap();
    let train = prepare_all(&model, &toy_samples(1, 0)).unwrap();
    let before = model.checksums();
    let mut cfg = StageConfig::from_run(&model.config, Stage::II);
    cfg.epochs = 1;
    let log = run_stage(&mut model, &cfg, &train, &[], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(log.steps.len(), 1);
    let after = model.checksums();
    for g in [ParamGroup::VisionAdapters, ParamGroup::Projectors, ParamGroup::ClassificationHead] {
        assert_eq!(before[g.name()], after[g.name()], "{g}");
    }
    assert_eq!(before["backbone"], after["backbone"]);
    assert_ne!(before[ParamGroup::PromptEmbeddings.name()], after[ParamGroup::PromptEmbeddings.name()]);
    assert_ne!(before[ParamGroup::InjectionTokens.name()], after[ParamGroup::InjectionTokens.name()]);
    assert!(model.anchors().is_some());
}

#[test]
fn stage_one_overfits_ten_samples() {
    let mut model = Model::from_config(&RunConfig::toy()).unwrap();
    let samples: Vec<Sample> = toy_samples(3, 4).into_iter().take(10).collect();
    let train = prepare_all(&model, &samples).unwrap();
    let mut cfg = StageConfig::from_run(&model.config, Stage::I);
    cfg.epochs = 67;
    let log = run_stage(&mut model, &cfg, &train, &[], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(log.steps.len() >= 200);
    let first = log.epochs.first().unwrap().train.total;
    let last = log.epochs.last().unwrap().train.total;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn zero_epochs_leave_everything_alone() {
    let mut model = Model::from_config(&RunConfig::toy()).unwrap();
    let train = prepare_all(&model, &toy_samples(1, 0)).unwrap();
    let before = checksums(&model);
    for stage in [Stage::I, Stage::II] {
        let mut cfg = StageConfig::from_run(&model.config, stage);
        cfg.epochs = 0;
        let log = run_stage(&mut model, &cfg, &train, &[], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(log.steps.is_empty() && log.epochs.is_empty());
    }
    assert_eq!(checksums(&model), before);
    assert!(model.anchors().is_none());
}

#[test]
fn stage_three_needs_cached_anchors() {
    let mut model = Model::from_config(&RunConfig::toy()).unwrap();
    let train = prepare_all(&model, &toy_samples(1, 0)).unwrap();
    let cfg = StageConfig::from_run(&model.config, Stage::III);
    let err = run_stage(&mut model, &cfg, &train, &[], &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Prerequisite { .. }), "{err}");
}

#[test]
fn non_finite_parameters_abort_with_a_diagnostic() {
    let mut model = Model::from_config(&RunConfig::toy()).unwrap();
    let id = model.store.find("head.cls.weight").unwrap();
    model.store.get_mut(id)[[0, 0]] = f64::NAN;
    let train = prepare_all(&model, &toy_samples(1, 0)).unwrap();
    let cfg = StageConfig::from_run(&model.config, Stage::I);
    let err = run_stage(&mut model, &cfg, &train, &[], &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    match err {
        Error::NonFinite { stage, epoch, step, .. } => assert_eq!((stage.as_str(), epoch, step), ("I", 0, 0)),
        other => panic!("{other}"),
    }
}

#[test]
fn training_is_deterministic() {
    let data = toy_samples(1, 2);
    let cfg = short([3, 3, 3]);
    let a = train_full(&cfg, &data, &[], None).unwrap();
    let b = train_full(&cfg, &data, &[], None).unwrap();
    assert_eq!(a.logs, b.logs);
    assert_eq!(checksums(&a.checkpoint.model), checksums(&b.checkpoint.model));
}

#[test]
fn checkpoints_round_trip_and_resume() {
    let data = toy_samples(2, 3);
    let held_out = toy_samples(1, 99);
    let cfg = short([4, 3, 3]);
    let dir = tempfile::tempdir().unwrap();
    let full = train_full(&cfg, &data, &[], Some(dir.path())).unwrap();
    for sub in ["stage-I", "stage-II", "stage-III", "final"] {
        assert!(dir.path().join(sub).join("checkpoint.json").exists(), "{sub}");
    }
    assert!(dir.path().join("train_log.jsonl").exists());

    let loaded = load_checkpoint(dir.path().join("final")).unwrap();
    assert_eq!(loaded.completed_stages, Stage::ALL.to_vec());
    assert_eq!(loaded.pixel_threshold, full.checkpoint.pixel_threshold);
    for s in &held_out {
        let a = full.checkpoint.model.predict(&s.image, None).unwrap();
        let b = loaded.model.predict(&s.image, None).unwrap();
        assert_eq!(a.class_probs, b.class_probs);
        assert_eq!(a.pixel_probs, b.pixel_probs);
    }

    let mid = load_checkpoint(dir.path().join("stage-II")).unwrap();
    let mut trainer = Trainer::from_checkpoint(mid).unwrap();
    let train = prepare_all(&trainer.model, &data).unwrap();
    trainer.run_remaining(&train, &[], None).unwrap();
    assert_eq!(checksums(&trainer.model), checksums(&full.checkpoint.model));
    assert_eq!(trainer.logs.last().unwrap().1, full.logs.last().unwrap().1);
}

#[test]
fn loading_with_a_different_class_table_fails() {
    let dir = tempfile::tempdir().unwrap();
    let trainer = Trainer::new(&short([0, 0, 0])).unwrap();
    save_checkpoint(&trainer.checkpoint(), dir.path()).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    ck.check_classes(&ClassTable::default()).unwrap();
    let two = ClassTable::new(["ghosting", "lens_flare"]).unwrap();
    assert!(matches!(ck.check_classes(&two), Err(Error::Checkpoint(_))));

    let meta = dir.path().join("checkpoint.json");
    let text = std::fs::read_to_string(&meta).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["config"]["model"]["artifact_names"] = serde_json::json!(["ghosting", "lens_flare"]);
    v["classes"]["classes"].as_array_mut().unwrap().pop();
    std::fs::write(&meta, v.to_string()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn stage_ablations_follow_the_configuration() {
    let data = toy_samples(1, 5);
    let mut cfg = short([2, 2, 2]);
    cfg.variant = Variant::WithoutStageIiIii;
    let out = train_full(&cfg, &data, &[], None).unwrap();
    assert_eq!(out.checkpoint.completed_stages, vec![Stage::I]);
    assert!(out.checkpoint.model.anchors().is_none());
    assert_eq!(out.checkpoint.model.mode(), ScoreMode::Heads);

    cfg.variant = Variant::WithoutStageI;
    let out = train_full(&cfg, &data, &[], None).unwrap();
    assert_eq!(out.checkpoint.completed_stages, vec![Stage::II, Stage::III]);
    assert_eq!(out.checkpoint.model.mode(), ScoreMode::Anchors);
}

#[test]
fn excluded_classes_are_not_required() {
    let data = toy_samples(1, 6);
    let mut cfg = short([1, 1, 1]);
    cfg.variant = Variant::WithoutClean;
    let artifacts: Vec<Sample> = data.iter().filter(|s| s.class_id != 0).cloned().collect();
    train_full(&cfg, &artifacts, &[], None).unwrap();
    cfg.variant = Variant::Full;
    let err = train_full(&cfg, &artifacts, &[], None).err().unwrap();
    assert!(matches!(err, Error::Prerequisite { .. }));
}

#[test]
fn stage_three_sharpens_the_anomaly_map() {
    let data = toy_samples(3, 11);
    let cfg = RunConfig::toy();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let train = prepare_all(&trainer.model, &data).unwrap();
    let pixel_auroc = |m: &Model, mode| {
        let recs = collect_records(m, &data, mode).unwrap();
        let scores: Vec<f64> = recs.iter().flat_map(|r| r.anomaly_map.iter().copied()).collect();
        let labels: Vec<bool> = recs.iter().flat_map(|r| r.mask.iter().copied()).collect();
        auroc(&scores, &labels).unwrap()
    };
    trainer.run(Stage::I, &train, &[]).unwrap();
    let after_one = pixel_auroc(&trainer.model, ScoreMode::Heads);
    trainer.run(Stage::II, &train, &[]).unwrap();
    trainer.run(Stage::III, &train, &[]).unwrap();
    let after_three = pixel_auroc(&trainer.model, ScoreMode::Anchors);
    assert!(after_three >= after_one, "{after_one} -> {after_three}");
    let groups: BTreeSet<_> = trainer.model.checksums().into_keys().collect();
    assert!(groups.contains("backbone"));
}
