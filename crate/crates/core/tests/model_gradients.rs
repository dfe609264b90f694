//! Finite-difference checks of the full training objective for every fusion arm.

use infofuse_core::autograd::{ParamId, Tape};
use infofuse_core::corpus::{split, SplitRatios};
use infofuse_core::encoder::Model;
use infofuse_core::synthetic::{planted_blocks, SyntheticConfig};
use infofuse_core::trainer::{batch_objective, AblationArm, Batch, TrainConfig, TrainData, Trainer};

fn toy(arm: AblationArm) -> (TrainData, TrainConfig) {
    let synth = planted_blocks(&SyntheticConfig {
        n_users: 8,
        n_items: 12,
        n_blocks: 4,
        in_block_per_user: 3,
        random_per_user: 1,
        shared_dim: 3,
        specific_dim: 2,
        seed: 11,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let bundle = split(&synth.interactions, SplitRatios::default(), 1).unwrap();
    let config = TrainConfig {
        d: 4,
        heads: 1,
        k: 3,
        arm,
        seed: 5,
        ..TrainConfig::default()
    };
    let data = TrainData::build(bundle, &synth.visual, &synth.textual, &config).unwrap();
    (data, config)
}

fn batch() -> Batch {
    Batch {
        users: vec![0, 1, 2, 3, 5, 7],
        positives: vec![0, 4, 9, 3, 1, 11],
        negatives: vec![2, 7, 5, 10, 8, 6],
    }
}

fn loss(model: &Model, data: &TrainData, config: &TrainConfig) -> f64 {
    let tape = Tape::new();
    let forward = model.forward(&tape, &data.inputs).unwrap();
    let (total, _) = batch_objective(&tape, &forward, &batch(), config).unwrap();
    tape.scalar(total)
}

/// Returns the worst relative error over all parameter entries and the names
/// of parameters whose analytic gradient is identically zero.
fn check(arm: AblationArm) -> (f64, Vec<String>) {
    let (data, config) = toy(arm);
    let mut model = Trainer::new(&data, &config).unwrap().model;
    let tape = Tape::new();
    let forward = model.forward(&tape, &data.inputs).unwrap();
    let (total, _) = batch_objective(&tape, &forward, &batch(), &config).unwrap();
    let grads = tape.backward(total).for_params(model.store());
    let ids: Vec<ParamId> = model.store().ids().collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut dead = Vec::new();
    for (id, grad) in ids.into_iter().zip(grads) {
        let grad = grad.unwrap_or_else(|| ndarray::Array2::zeros(model.store().value(id).dim()));
        if grad.iter().all(|&g| g == 0.0) {
            dead.push(model.store().name(id).to_string());
        }
        for idx in 0..grad.len() {
            let (r, c) = (idx / grad.ncols(), idx % grad.ncols());
            let orig = model.store().value(id)[[r, c]];
            model.store_mut().value_mut(id)[[r, c]] = orig + h;
            let up = loss(&model, &data, &config);
            model.store_mut().value_mut(id)[[r, c]] = orig - h;
            let down = loss(&model, &data, &config);
            model.store_mut().value_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad[[r, c]];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-5);
            worst = worst.max(err);
        }
    }
    (worst, dead)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let (worst, dead) = check(AblationArm::Full);
    assert!(worst < 1e-4, "worst relative error {worst}");
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn ablation_arm_gradients_match_finite_differences() {
    for arm in [AblationArm::Pooling, AblationArm::Concat, AblationArm::WeightedConcat] {
        let (worst, dead) = check(arm);
        assert!(worst < 1e-4, "{arm:?}: worst relative error {worst}");
        assert!(dead.is_empty(), "{arm:?}: parameters without gradient: {dead:?}");
    }
}
