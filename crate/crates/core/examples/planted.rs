//! Trains the model and reference baselines on planted block data.
//!
//! Usage: `cargo run --release -p infofuse-core --example planted -- [seed] [arm...]`

use infofuse_core::corpus::{split, SplitRatios};
use infofuse_core::evaluator::{evaluate, render_table, BprMf, BprMfConfig, EvalOptions, Popularity};
use infofuse_core::synthetic::{planted_blocks, SyntheticConfig};
use infofuse_core::trainer::{run_ablation, AblationArm, TrainConfig, TrainData};

fn main() -> infofuse_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let arms: Vec<AblationArm> = args.filter_map(|a| AblationArm::parse(&a)).collect();
    let arms = if arms.is_empty() { vec![AblationArm::Full, AblationArm::Concat] } else { arms };

    let data = planted_blocks(&SyntheticConfig { seed, ..SyntheticConfig::default() })?;
    let bundle = split(&data.interactions, SplitRatios::default(), seed)?;
    let config = TrainConfig {
        seed,
        batch_size: 256,
        max_epochs: 50,
        patience: 50,
        ..TrainConfig::default()
    };
    let train_data = TrainData::build(bundle.clone(), &data.visual, &data.textual, &config)?;

    let options = EvalOptions { label: "Popularity".into(), ..EvalOptions::default() };
    let mut reports = vec![evaluate(&Popularity::fit(&bundle.train), &bundle.train, &bundle.test, &options)];
    let mf = BprMf::fit(&bundle.train, &bundle.valid, &BprMfConfig { seed, ..BprMfConfig::default() });
    reports.push(evaluate(&mf, &bundle.train, &bundle.test, &EvalOptions { label: "BPR-MF".into(), ..EvalOptions::default() }));
    for arm in arms {
        let started = std::time::Instant::now();
        reports.push(run_ablation(arm, &train_data, &config, None)?);
        eprintln!("{} trained in {:.1}s", arm.label(), started.elapsed().as_secs_f64());
    }
    print!("{}", render_table(&reports));
    Ok(())
}
