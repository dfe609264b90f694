//! Training loop behavior on a small planted data set.

use infofuse_core::corpus::{split, SplitBundle, SplitRatios};
use infofuse_core::encoder::Model;
use infofuse_core::evaluator::evaluate;
use infofuse_core::synthetic::{planted_blocks, SyntheticConfig, SyntheticData};
use infofuse_core::trainer::{eval_options, fit, run_fingerprint, AblationArm, FitOptions, TrainConfig, TrainData};

fn planted() -> (SyntheticData, SplitBundle) {
    let synth = planted_blocks(&SyntheticConfig {
        n_users: 60,
        n_items: 90,
        n_blocks: 6,
        seed: 3,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let bundle = split(&synth.interactions, SplitRatios::default(), 3).unwrap();
    (synth, bundle)
}

fn small_config(arm: AblationArm) -> TrainConfig {
    TrainConfig {
        d: 16,
        batch_size: 64,
        max_epochs: 4,
        patience: 100,
        arm,
        seed: 17,
        ..TrainConfig::default()
    }
}

fn data(config: &TrainConfig) -> TrainData {
    let (synth, bundle) = planted();
    TrainData::build(bundle, &synth.visual, &synth.textual, config).unwrap()
}

#[test]
fn max_epochs_bounds_the_run() {
    let config = TrainConfig { max_epochs: 3, ..small_config(AblationArm::Concat) };
    let outcome = fit(&data(&config), &config, &FitOptions::default()).unwrap();
    assert_eq!(outcome.epochs_run, 3);
    assert_eq!(outcome.history.len(), 3);
}

#[test]
fn zero_patience_stops_after_first_epoch() {
    let config = TrainConfig { patience: 0, ..small_config(AblationArm::Concat) };
    let outcome = fit(&data(&config), &config, &FitOptions::default()).unwrap();
    assert_eq!(outcome.epochs_run, 1);
}

#[test]
fn improvements_are_strictly_increasing() {
    let config = TrainConfig { max_epochs: 8, ..small_config(AblationArm::Full) };
    let outcome = fit(&data(&config), &config, &FitOptions::default()).unwrap();
    let improved: Vec<f64> = outcome.history.iter().filter(|e| e.improved).map(|e| e.valid_recall).collect();
    assert!(!improved.is_empty());
    assert!(improved.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(*improved.last().unwrap(), outcome.best_valid_recall);
}

#[test]
fn checkpoint_round_trip_reproduces_validation_metrics() {
    let config = small_config(AblationArm::Full);
    let data = data(&config);
    let dir = tempfile::tempdir().unwrap();
    let options = FitOptions {
        run_dir: Some(dir.path().to_path_buf()),
        label: "Full".into(),
    };
    let outcome = fit(&data, &config, &options).unwrap();
    for file in ["train_log.jsonl", "metrics.json", "valid_metrics.json"] {
        assert!(dir.path().join(file).exists(), "{file} missing");
    }
    let (model, manifest) = Model::load(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(manifest.config_fingerprint, run_fingerprint(&config, &data));
    let embeddings = model.embeddings(&data.inputs).unwrap();
    let split = &data.split;
    let reloaded = evaluate(&embeddings, &split.train, &split.valid, &eval_options(&config, &data, "Full", "valid"));
    for (a, b) in reloaded.metrics.iter().zip(&outcome.valid.metrics) {
        assert!((a.recall - b.recall).abs() < 1e-6 && (a.ndcg - b.ndcg).abs() < 1e-6);
    }
    assert_eq!(reloaded.users_evaluated, outcome.valid.users_evaluated);
}

#[test]
fn seeded_runs_have_identical_trajectories() {
    let config = small_config(AblationArm::Full);
    let data = data(&config);
    let a = fit(&data, &config, &FitOptions::default()).unwrap();
    let b = fit(&data, &config, &FitOptions::default()).unwrap();
    let strip = |h: &[infofuse_core::trainer::EpochLog]| h.iter().map(|e| (e.loss, e.valid.clone())).collect::<Vec<_>>();
    assert_eq!(strip(&a.history), strip(&b.history));
    assert_eq!(a.test, b.test);
}

#[test]
fn held_out_pairs_do_not_reach_the_model() {
    let config = small_config(AblationArm::Full);
    let (synth, bundle) = planted();
    let empty = infofuse_core::corpus::InteractionSet::from_pairs(bundle.vocab().clone(), []);
    let train_only = SplitBundle {
        valid: empty.clone(),
        test: empty,
        ..bundle.clone()
    };
    let with_held_out = TrainData::build(bundle, &synth.visual, &synth.textual, &config).unwrap();
    let without = TrainData::build(train_only, &synth.visual, &synth.textual, &config).unwrap();
    let model = Model::new(config.model_config(), 60, 90, synth.visual.d_feat(), synth.textual.d_feat(), 1).unwrap();
    let a = model.embeddings(&with_held_out.inputs).unwrap();
    let b = model.embeddings(&without.inputs).unwrap();
    assert_eq!(a.users, b.users);
    assert_eq!(a.items, b.items);
}
