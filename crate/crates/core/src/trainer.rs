//! Mini-batch pairwise training with early stopping on validation recall.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Adam, Matrix, ParamStore, Tape, Var};
use crate::corpus::{InteractionSet, SplitBundle};
use crate::encoder::{FinalEmbeddings, ForwardVars, FusionArm, GraphOperators, Model, ModelConfig, ModelInputs};
use crate::enrichment::FeatureTable;
use crate::error::{Error, Result};
use crate::evaluator::{self, EvalOptions, MetricsReport, DEFAULT_KS};
use crate::fingerprint::Fingerprinter;
use crate::fusion::{self, FusionConfig, FusionVars};
use crate::graphs::{build_item_knn, build_norm_bipartite, build_user_knn};
use crate::io;
use crate::objectives::{self, LossBreakdown};

/// Model variant under comparison. The first four change the fusion stage;
/// the last two change only where the visual features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    Full,
    Pooling,
    Concat,
    WeightedConcat,
    RawVisual,
    VlmNoTitle,
}

impl AblationArm {
    pub const ALL: [AblationArm; 6] = [
        AblationArm::RawVisual,
        AblationArm::VlmNoTitle,
        AblationArm::Pooling,
        AblationArm::Concat,
        AblationArm::WeightedConcat,
        AblationArm::Full,
    ];

    pub fn fusion_arm(self) -> FusionArm {
        match self {
            AblationArm::Pooling => FusionArm::Pooling,
            AblationArm::Concat => FusionArm::Concat,
            AblationArm::WeightedConcat => FusionArm::WeightedConcat,
            AblationArm::Full | AblationArm::RawVisual | AblationArm::VlmNoTitle => FusionArm::Full,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationArm::Full => "Full",
            AblationArm::Pooling => "Pooling",
            AblationArm::Concat => "Concat",
            AblationArm::WeightedConcat => "Weighted Concat",
            AblationArm::RawVisual => "Original",
            AblationArm::VlmNoTitle => "VLM w.o title",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            AblationArm::Full => "full",
            AblationArm::Pooling => "pooling",
            AblationArm::Concat => "concat",
            AblationArm::WeightedConcat => "weighted_concat",
            AblationArm::RawVisual => "raw_visual",
            AblationArm::VlmNoTitle => "vlm_no_title",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub d: usize,
    pub layers: usize,
    /// Neighbors kept per node in the item-item and user-user graphs.
    pub k: usize,
    pub alignment_weight: f64,
    pub temperature: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub arm: AblationArm,
    pub heads: usize,
    pub tied_directions: bool,
    /// Also apply the alignment losses to the user-side fusion pass.
    pub align_users: bool,
    /// L2 penalty on user embeddings, applied by the optimizer.
    pub weight_decay: f64,
    /// Cutoff of the validation recall that drives early stopping.
    pub early_stop_k: usize,
    pub eval_ks: Vec<usize>,
    pub normalize_user_graph: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            lr: 0.001,
            d: 64,
            layers: 2,
            k: 10,
            alignment_weight: objectives::DEFAULT_ALIGNMENT_WEIGHT,
            temperature: objectives::DEFAULT_TEMPERATURE,
            max_epochs: 1000,
            patience: 20,
            seed: 2024,
            arm: AblationArm::Full,
            heads: 4,
            tied_directions: false,
            align_users: true,
            weight_decay: 0.0,
            early_stop_k: 20,
            eval_ks: DEFAULT_KS.to_vec(),
            normalize_user_graph: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.alignment_weight >= 0.0 && self.alignment_weight.is_finite()) {
            return bad(format!("alignment_weight must be non-negative, got {}", self.alignment_weight));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("eval_ks must be non-empty and positive".into());
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            bipartite_layers: self.layers,
            homogeneous_layers: self.layers,
            arm: self.arm.fusion_arm(),
            fusion: FusionConfig {
                heads: self.heads,
                tied_directions: self.tied_directions,
                ..FusionConfig::default()
            },
        }
    }

    fn eval_ks(&self) -> Vec<usize> {
        let mut ks = self.eval_ks.clone();
        ks.push(self.early_stop_k);
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Split, features and the graphs derived from them.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub split: SplitBundle,
    pub visual_fingerprint: String,
    pub textual_fingerprint: String,
    pub inputs: ModelInputs,
}

impl TrainData {
    /// Builds all graphs from the train view only.
    pub fn build(split: SplitBundle, visual: &FeatureTable, textual: &FeatureTable, config: &TrainConfig) -> Result<Self> {
        for table in [visual, textual] {
            table.check_alignment(&split.vocab().items)?;
        }
        let bipartite = build_norm_bipartite(&split.train);
        let item_graph = build_item_knn(visual, textual, config.k)?;
        let user_graph = build_user_knn(&split.train, config.k, config.normalize_user_graph)?;
        let graphs = GraphOperators::new(&bipartite, &item_graph, &user_graph)?;
        let inputs = ModelInputs::new(visual, textual, graphs)?;
        Ok(Self {
            split,
            visual_fingerprint: visual.fingerprint.clone(),
            textual_fingerprint: textual.fingerprint.clone(),
            inputs,
        })
    }

    pub fn train(&self) -> &InteractionSet {
        &self.split.train
    }
}

/// Digest of everything that determines a training run.
pub fn run_fingerprint(config: &TrainConfig, data: &TrainData) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    Fingerprinter::new("train-run")
        .str(&json)
        .str(&data.split.fingerprint())
        .str(&data.visual_fingerprint)
        .str(&data.textual_fingerprint)
        .finish()
}

/// One negative per user drawn uniformly from items outside the user's
/// train positives. Users who interacted with every item get `None`.
pub fn sample_negatives<R: Rng + ?Sized>(train: &InteractionSet, users: &[u32], rng: &mut R) -> Vec<Option<u32>> {
    let n_items = train.n_items() as u32;
    users
        .iter()
        .map(|&u| {
            let positives = train.user_items(u as usize);
            if positives.len() as u32 >= n_items {
                log::warn!("user {u} interacted with every item; no negative available");
                return None;
            }
            loop {
                let candidate = rng.random_range(0..n_items);
                if positives.binary_search(&candidate).is_err() {
                    return Some(candidate);
                }
            }
        })
        .collect()
}

/// One training batch of `(user, positive, negative)` index triples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub users: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

fn unique_sorted(rows: impl IntoIterator<Item = usize>) -> Arc<[usize]> {
    let mut v: Vec<usize> = rows.into_iter().collect();
    v.sort_unstable();
    v.dedup();
    v.into()
}

fn alignment_terms(tape: &Tape, vars: &FusionVars, rows: &Arc<[usize]>, temperature: f64) -> Result<(Var, Var)> {
    let g = fusion::gather_vars(tape, vars, rows);
    let synergy = objectives::synergy_loss(tape, g.vision_to_text, g.text_to_vision, temperature)?;
    let redundancy = objectives::redundancy_loss(tape, g.joint, g.visual_only, g.textual_only, temperature)?;
    Ok((synergy, redundancy))
}

/// Total loss of one batch on an already recorded forward pass. Alignment
/// losses cover the distinct items and users of the batch.
pub fn batch_objective(tape: &Tape, forward: &ForwardVars, batch: &Batch, config: &TrainConfig) -> Result<(Var, LossBreakdown)> {
    let idx = |v: &[usize]| -> Arc<[usize]> { v.to_vec().into() };
    let users = tape.gather(forward.users, idx(&batch.users));
    let pos = tape.gather(forward.items, idx(&batch.positives));
    let neg = tape.gather(forward.items, idx(&batch.negatives));
    let rec = objectives::bpr_loss(tape, tape.row_dot(users, pos), tape.row_dot(users, neg));

    let zero = || tape.constant(Matrix::zeros((1, 1)));
    let (mut synergy, mut redundancy) = (zero(), zero());
    if let Some(items) = &forward.item_fusion {
        let rows = unique_sorted(batch.positives.iter().chain(&batch.negatives).copied());
        let (s, r) = alignment_terms(tape, items, &rows, config.temperature)?;
        synergy = tape.add(synergy, s);
        redundancy = tape.add(redundancy, r);
    }
    if let (true, Some(user_vars)) = (config.align_users, &forward.user_fusion) {
        let rows = unique_sorted(batch.users.iter().copied());
        let (s, r) = alignment_terms(tape, user_vars, &rows, config.temperature)?;
        synergy = tape.add(synergy, s);
        redundancy = tape.add(redundancy, r);
    }
    objectives::total_loss(tape, rec, synergy, redundancy, config.alignment_weight)
}

/// Mutable state carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            epoch: 0,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            rng,
        }
    }
}

/// Model plus optimizer state.
pub struct Trainer {
    pub model: Model,
    pub optimizer: Adam,
    pub state: TrainState,
    pub config: TrainConfig,
    /// Where a non-finite batch is dumped, if anywhere.
    pub dump_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(data: &TrainData, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(
            config.model_config(),
            data.split.vocab().n_users(),
            data.split.vocab().n_items(),
            data.inputs.visual.ncols(),
            data.inputs.textual.ncols(),
            config.seed,
        )?;
        let mut optimizer = Adam::new(model.store(), config.lr);
        optimizer.weight_decay = config.weight_decay;
        Ok(Self {
            model,
            optimizer,
            state: TrainState::new(config.seed),
            config: config.clone(),
            dump_dir: None,
        })
    }

    /// One pass over the shuffled train pairs. Returns the mean breakdown.
    pub fn train_epoch(&mut self, data: &TrainData) -> Result<LossBreakdown> {
        let train = data.train();
        let mut pairs: Vec<(u32, u32)> = train.pairs().collect();
        pairs.shuffle(&mut self.state.rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for chunk in pairs.chunks(self.config.batch_size) {
            let users: Vec<u32> = chunk.iter().map(|p| p.0).collect();
            let negatives = sample_negatives(train, &users, &mut self.state.rng);
            let mut batch = Batch {
                users: Vec::with_capacity(chunk.len()),
                positives: Vec::with_capacity(chunk.len()),
                negatives: Vec::with_capacity(chunk.len()),
            };
            for (&(u, i), neg) in chunk.iter().zip(negatives) {
                if let Some(j) = neg {
                    batch.users.push(u as usize);
                    batch.positives.push(i as usize);
                    batch.negatives.push(j as usize);
                }
            }
            if batch.users.is_empty() {
                continue;
            }
            let breakdown = self.step(data, &batch)?;
            for (s, v) in sums.iter_mut().zip([breakdown.rec, breakdown.synergy, breakdown.redundancy, breakdown.total]) {
                *s += v;
            }
            batches += 1;
        }
        self.state.epoch += 1;
        let n = batches.max(1) as f64;
        Ok(LossBreakdown {
            rec: sums[0] / n,
            synergy: sums[1] / n,
            redundancy: sums[2] / n,
            total: sums[3] / n,
            alignment_weight: self.config.alignment_weight,
        })
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn step(&mut self, data: &TrainData, batch: &Batch) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let forward = self.model.forward(&tape, &data.inputs)?;
        let (loss, breakdown) = batch_objective(&tape, &forward, batch, &self.config)?;
        if !breakdown.is_finite() {
            return Err(self.non_finite(batch, &breakdown));
        }
        let grads = tape.backward(loss).for_params(self.model.store());
        self.optimizer.step(self.model.store_mut(), &grads);
        Ok(breakdown)
    }

    fn non_finite(&self, batch: &Batch, breakdown: &LossBreakdown) -> Error {
        let mut message = format!(
            "non-finite loss at epoch {} (rec {}, synergy {}, redundancy {}) on a batch of {} pairs",
            self.state.epoch + 1,
            breakdown.rec,
            breakdown.synergy,
            breakdown.redundancy,
            batch.users.len()
        );
        if let Some(dir) = &self.dump_dir {
            let path = dir.join("nonfinite_batch.json");
            let dump = serde_json::json!({ "epoch": self.state.epoch + 1, "loss": breakdown, "batch": batch });
            if io::write_json(&path, &dump).is_ok() {
                message.push_str(&format!("; batch written to {}", path.display()));
            }
        }
        Error::Numeric(message)
    }

    pub fn embeddings(&self, data: &TrainData) -> Result<FinalEmbeddings> {
        self.model.embeddings(&data.inputs)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub valid_recall: f64,
    pub valid: Vec<evaluator::CutoffMetrics>,
    pub improved: bool,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Receives `train_log.jsonl` and the best checkpoint under `checkpoint/`.
    pub run_dir: Option<PathBuf>,
    /// Label stored in the reports.
    pub label: String,
}

pub struct FitOutcome {
    pub model: Model,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_valid_recall: f64,
    pub history: Vec<EpochLog>,
    pub valid: MetricsReport,
    pub test: MetricsReport,
    pub config_fingerprint: String,
}

pub fn eval_options(config: &TrainConfig, data: &TrainData, label: &str, target: &str) -> EvalOptions {
    EvalOptions {
        ks: config.eval_ks(),
        keep_per_user: false,
        label: label.to_string(),
        target: target.to_string(),
        config_fingerprint: run_fingerprint(config, data),
        split_fingerprint: data.split.fingerprint(),
    }
}

/// Evaluate a model on the validation or test view, masking train items.
pub fn evaluate_model(model: &Model, data: &TrainData, config: &TrainConfig, label: &str, test: bool) -> Result<MetricsReport> {
    let embeddings = model.embeddings(&data.inputs)?;
    let (held_out, target) = if test { (&data.split.test, "test") } else { (&data.split.valid, "valid") };
    Ok(evaluator::evaluate(&embeddings, &data.split.train, held_out, &eval_options(config, data, label, target)))
}

/// Train until validation recall stops improving for `patience` epochs or
/// `max_epochs` is reached, then restore the best parameters and evaluate.
pub fn fit(data: &TrainData, config: &TrainConfig, options: &FitOptions) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(data, config)?;
    let fingerprint = run_fingerprint(config, data);
    let log_path = options.run_dir.as_ref().map(|d| d.join("train_log.jsonl"));
    if let Some(dir) = &options.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(path) = &log_path {
            let _ = std::fs::remove_file(path);
        }
        trainer.dump_dir = Some(dir.clone());
    }
    let label = if options.label.is_empty() { config.arm.label() } else { options.label.as_str() };
    let mut best_store: ParamStore = trainer.model.store().clone();
    let mut history = Vec::new();
    let started = Instant::now();

    while trainer.state.epoch < config.max_epochs {
        let loss = trainer.train_epoch(data)?;
        let valid = evaluate_model(&trainer.model, data, config, label, false)?;
        let valid_recall = valid.recall(config.early_stop_k);
        let state = &mut trainer.state;
        let improved = valid_recall > state.best_metric;
        if improved {
            state.best_metric = valid_recall;
            state.best_epoch = state.epoch;
            state.epochs_since_improvement = 0;
            best_store = trainer.model.store().clone();
            if let Some(dir) = &options.run_dir {
                trainer.model.save(&dir.join("checkpoint"), &fingerprint)?;
            }
        } else {
            state.epochs_since_improvement += 1;
        }
        let entry = EpochLog {
            epoch: state.epoch,
            loss,
            valid_recall,
            valid: valid.metrics.clone(),
            improved,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {:>4}  loss {:.5} (rec {:.5}, syn {:.5}, red {:.5})  valid R@{} {:.5}{}",
            entry.epoch,
            loss.total,
            loss.rec,
            loss.synergy,
            loss.redundancy,
            config.early_stop_k,
            valid_recall,
            if improved { " *" } else { "" }
        );
        if let Some(path) = &log_path {
            io::append_json_line(path, &entry)?;
        }
        history.push(entry);
        if state.epochs_since_improvement >= config.patience {
            break;
        }
    }

    *trainer.model.store_mut() = best_store;
    let valid = evaluate_model(&trainer.model, data, config, label, false)?;
    let test = evaluate_model(&trainer.model, data, config, label, true)?;
    if let Some(dir) = &options.run_dir {
        io::write_json(&dir.join("metrics.json"), &test)?;
        io::write_json(&dir.join("valid_metrics.json"), &valid)?;
    }
    Ok(FitOutcome {
        epochs_run: trainer.state.epoch,
        best_epoch: trainer.state.best_epoch,
        best_valid_recall: trainer.state.best_metric,
        model: trainer.model,
        history,
        valid,
        test,
        config_fingerprint: fingerprint,
    })
}

/// Train one ablation arm on data already prepared for it and report test metrics.
pub fn run_ablation(arm: AblationArm, data: &TrainData, config: &TrainConfig, run_dir: Option<&Path>) -> Result<MetricsReport> {
    let config = TrainConfig { arm, ..config.clone() };
    let options = FitOptions {
        run_dir: run_dir.map(Path::to_path_buf),
        label: arm.label().to_string(),
    };
    Ok(fit(data, &config, &options)?.test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;

    fn vocab(n_users: usize, n_items: usize) -> Vocabulary {
        Vocabulary {
            users: (0..n_users).map(|u| format!("u{u}")).collect(),
            items: (0..n_items).map(|i| format!("i{i}")).collect(),
        }
    }

    #[test]
    fn forced_negative_when_one_item_remains() {
        let train = InteractionSet::from_pairs(vocab(1, 5), [0, 1, 2, 4].map(|i| (0, i)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let negs = sample_negatives(&train, &[0; 100], &mut rng);
        assert!(negs.iter().all(|&n| n == Some(3)));
    }

    #[test]
    fn saturated_user_is_skipped() {
        let train = InteractionSet::from_pairs(vocab(1, 2), [(0, 0), (0, 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_negatives(&train, &[0], &mut rng), vec![None]);
    }

    #[test]
    fn negatives_avoid_positives_and_are_reproducible() {
        let pairs: Vec<(u32, u32)> = (0..4).flat_map(|u| (0..10).filter(move |i| (i + u) % 3 == 0).map(move |i| (u, i))).collect();
        let train = InteractionSet::from_pairs(vocab(4, 10), pairs);
        let users: Vec<u32> = (0..10_000).map(|k| (k % 4) as u32).collect();
        let a = sample_negatives(&train, &users, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_negatives(&train, &users, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for (&u, n) in users.iter().zip(&a) {
            assert!(!train.contains(u as usize, n.unwrap()));
        }
    }

    #[test]
    fn arm_tags_round_trip() {
        for arm in AblationArm::ALL {
            assert_eq!(AblationArm::parse(arm.tag()), Some(arm));
            let json = serde_json::to_string(&arm).unwrap();
            assert_eq!(json, format!("\"{}\"", arm.tag()));
        }
    }

    #[test]
    fn defaults_match_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.d, c.layers, c.k, c.max_epochs, c.patience), (1024, 64, 2, 10, 1000, 20));
        assert_eq!((c.lr, c.alignment_weight, c.temperature), (0.001, 0.1, 0.2));
    }
}
