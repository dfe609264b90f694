//! Full-ranking top-K evaluation with train-item masking.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{xavier_uniform, Adam, Matrix, ParamStore, Tape};
use crate::corpus::InteractionSet;
use crate::encoder::FinalEmbeddings;
use crate::trainer::sample_negatives;

pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// Produces a score for every item given a user.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;
    fn user_scores(&self, user: usize) -> Array1<f64>;
}

impl Scorer for FinalEmbeddings {
    fn n_items(&self) -> usize {
        self.items.nrows()
    }

    fn user_scores(&self, user: usize) -> Array1<f64> {
        FinalEmbeddings::user_scores(self, user)
    }
}

/// Descending by score, ascending by index on ties.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-`k` item indices by descending score, skipping `mask` (sorted).
/// Returns fewer than `k` items when fewer are unmasked.
pub fn rank_items(scores: &[f64], mask: &[u32], k: usize) -> Vec<usize> {
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(scores.len());
    let mut masked = mask.iter().peekable();
    for (i, &s) in scores.iter().enumerate() {
        while masked.peek().is_some_and(|&&m| (m as usize) < i) {
            masked.next();
        }
        if masked.peek().is_some_and(|&&m| m as usize == i) {
            continue;
        }
        candidates.push((s, i));
    }
    if k < candidates.len() {
        if k == 0 {
            return Vec::new();
        }
        candidates.select_nth_unstable_by(k - 1, rank_order);
        candidates.truncate(k);
    } else if k > candidates.len() {
        log::debug!("requested top-{k} but only {} items are unmasked", candidates.len());
    }
    candidates.sort_unstable_by(rank_order);
    candidates.into_iter().map(|(_, i)| i).collect()
}

fn hits<'a>(topk: &'a [usize], relevant: &'a [u32], k: usize) -> impl Iterator<Item = (usize, bool)> + 'a {
    topk.iter()
        .take(k)
        .enumerate()
        .map(move |(rank, &i)| (rank, relevant.binary_search(&(i as u32)).is_ok()))
}

/// `|topk ∩ relevant| / |relevant|`; `relevant` sorted and non-empty.
pub fn recall_at_k(topk: &[usize], relevant: &[u32], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let found = hits(topk, relevant, k).filter(|&(_, h)| h).count();
    found as f64 / relevant.len() as f64
}

/// Binary-relevance NDCG with a `log2(rank + 1)` discount, ranks from 1.
pub fn ndcg_at_k(topk: &[usize], relevant: &[u32], k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let gain = |rank: usize| 1.0 / ((rank + 2) as f64).log2();
    let dcg: f64 = hits(topk, relevant, k).filter(|&(_, h)| h).map(|(r, _)| gain(r)).sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(gain).sum();
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    /// Which held-out part was evaluated (`valid` or `test`).
    pub target: String,
    pub metrics: Vec<CutoffMetrics>,
    pub users_evaluated: usize,
    pub config_fingerprint: String,
    pub split_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_user: Option<Vec<UserMetrics>>,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<CutoffMetrics> {
        self.metrics.iter().copied().find(|m| m.k == k)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at(k).map(|m| m.recall).unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map(|m| m.ndcg).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub keep_per_user: bool,
    pub label: String,
    pub target: String,
    pub config_fingerprint: String,
    pub split_fingerprint: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            keep_per_user: false,
            label: String::new(),
            target: "test".into(),
            config_fingerprint: String::new(),
            split_fingerprint: String::new(),
        }
    }
}

/// Averages per-user metrics over users with at least one held-out item.
/// Items in `mask` are never ranked.
pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, mask: &InteractionSet, held_out: &InteractionSet, options: &EvalOptions) -> MetricsReport {
    let mut ks = options.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let max_k = ks.last().copied().unwrap_or(0);
    let users: Vec<usize> = (0..held_out.n_users()).filter(|&u| !held_out.user_items(u).is_empty()).collect();
    let per_user: Vec<UserMetrics> = users
        .par_iter()
        .map(|&u| {
            let scores = scorer.user_scores(u);
            let scores = scores.as_slice().expect("contiguous scores");
            let topk = rank_items(scores, mask.user_items(u), max_k);
            let relevant = held_out.user_items(u);
            UserMetrics {
                user: u,
                recall: ks.iter().map(|&k| recall_at_k(&topk, relevant, k)).collect(),
                ndcg: ks.iter().map(|&k| ndcg_at_k(&topk, relevant, k)).collect(),
            }
        })
        .collect();
    let n = per_user.len();
    let mean = |f: &dyn Fn(&UserMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_user.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let metrics = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| CutoffMetrics {
            k,
            recall: mean(&|m| m.recall[j]),
            ndcg: mean(&|m| m.ndcg[j]),
        })
        .collect();
    MetricsReport {
        label: options.label.clone(),
        target: options.target.clone(),
        metrics,
        users_evaluated: n,
        config_fingerprint: options.config_fingerprint.clone(),
        split_fingerprint: options.split_fingerprint.clone(),
        per_user: options.keep_per_user.then_some(per_user),
    }
}

/// Aligned text table: one row per report, recall columns then NDCG columns.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut ks: Vec<usize> = reports.iter().flat_map(|r| r.metrics.iter().map(|m| m.k)).collect();
    ks.sort_unstable();
    ks.dedup();
    let label_width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max("model".len());
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "model");
    for prefix in ["R", "N"] {
        for k in &ks {
            let _ = write!(out, "  {:>8}", format!("{prefix}@{k}"));
        }
    }
    out.push('\n');
    for report in reports {
        let _ = write!(out, "{:<label_width$}", report.label);
        for metric in [MetricsReport::recall as fn(&MetricsReport, usize) -> f64, MetricsReport::ndcg] {
            for &k in &ks {
                let _ = write!(out, "  {:>8.4}", metric(report, k));
            }
        }
        out.push('\n');
    }
    out
}

/// Scores items by training-set interaction count.
#[derive(Debug, Clone)]
pub struct Popularity {
    counts: Array1<f64>,
}

impl Popularity {
    pub fn fit(train: &InteractionSet) -> Self {
        Self {
            counts: train.item_degrees().into_iter().map(|d| d as f64).collect(),
        }
    }
}

impl Scorer for Popularity {
    fn n_items(&self) -> usize {
        self.counts.len()
    }

    fn user_scores(&self, _user: usize) -> Array1<f64> {
        self.counts.clone()
    }
}

/// Settings of the matrix-factorization reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BprMfConfig {
    pub d: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for BprMfConfig {
    fn default() -> Self {
        Self {
            d: 64,
            lr: 0.01,
            batch_size: 1024,
            max_epochs: 200,
            patience: 10,
            seed: 2024,
        }
    }
}

/// Plain matrix factorization trained with the pairwise loss, early-stopped
/// on validation recall at 20.
#[derive(Debug, Clone)]
pub struct BprMf {
    pub users: Matrix,
    pub items: Matrix,
    pub epochs_run: usize,
}

impl BprMf {
    pub fn fit(train: &InteractionSet, valid: &InteractionSet, config: &BprMfConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let users = store.register("mf.users", xavier_uniform(train.n_users(), config.d, &mut rng));
        let items = store.register("mf.items", xavier_uniform(train.n_items(), config.d, &mut rng));
        let mut adam = Adam::new(&store, config.lr);
        let mut best = (f64::NEG_INFINITY, store.clone());
        let mut since = 0;
        let mut epochs_run = 0;
        let mut pairs: Vec<(u32, u32)> = train.pairs().collect();
        for _ in 0..config.max_epochs {
            epochs_run += 1;
            pairs.shuffle(&mut rng);
            for chunk in pairs.chunks(config.batch_size.max(1)) {
                let batch_users: Vec<u32> = chunk.iter().map(|p| p.0).collect();
                let negatives = sample_negatives(train, &batch_users, &mut rng);
                let triples: Vec<(usize, usize, usize)> = chunk
                    .iter()
                    .zip(negatives)
                    .filter_map(|(&(u, i), n)| n.map(|n| (u as usize, i as usize, n as usize)))
                    .collect();
                if triples.is_empty() {
                    continue;
                }
                let tape = Tape::new();
                let u_all = tape.param(&store, users);
                let i_all = tape.param(&store, items);
                let pick = |v, f: fn(&(usize, usize, usize)) -> usize| {
                    tape.gather(v, triples.iter().map(f).collect::<Vec<_>>().into())
                };
                let u = pick(u_all, |t| t.0);
                let pos = tape.row_dot(u, pick(i_all, |t| t.1));
                let neg = tape.row_dot(u, pick(i_all, |t| t.2));
                let loss = crate::objectives::bpr_loss(&tape, pos, neg);
                let grads = tape.backward(loss).for_params(&store);
                adam.step(&mut store, &grads);
            }
            let model = Self {
                users: store.value(users).clone(),
                items: store.value(items).clone(),
                epochs_run,
            };
            let options = EvalOptions {
                ks: vec![20],
                ..EvalOptions::default()
            };
            let recall = evaluate(&model, train, valid, &options).recall(20);
            if recall > best.0 {
                best = (recall, store.clone());
                since = 0;
            } else {
                since += 1;
                if since >= config.patience {
                    break;
                }
            }
        }
        Self {
            users: best.1.value(users).clone(),
            items: best.1.value(items).clone(),
            epochs_run,
        }
    }
}

impl Scorer for BprMf {
    fn n_items(&self) -> usize {
        self.items.nrows()
    }

    fn user_scores(&self, user: usize) -> Array1<f64> {
        self.items.dot(&self.users.row(user))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_hand_cases() {
        let s = [0.1, 0.9, 0.5];
        assert_eq!(rank_items(&s, &[], 2), vec![1, 2]);
        assert_eq!(rank_items(&s, &[1], 2), vec![2, 0]);
        assert_eq!(rank_items(&[0.3; 6], &[], 4), vec![0, 1, 2, 3]);
        assert_eq!(rank_items(&s, &[0, 2], 5), vec![1]);
        assert!(rank_items(&s, &[], 0).is_empty());
    }

    #[test]
    fn recall_hand_cases() {
        // A=0, B=1, C=2, D=3
        assert_eq!(recall_at_k(&[0, 1], &[1], 2), 1.0);
        assert!((recall_at_k(&[1, 0], &[1, 2, 3], 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&[0, 1], &[2, 3], 2), 0.0);
    }

    #[test]
    fn ndcg_hand_cases() {
        assert_eq!(ndcg_at_k(&[4, 0], &[4], 2), 1.0);
        let want = 1.0 / 3f64.log2();
        assert!((ndcg_at_k(&[0, 4], &[4], 2) - want).abs() < 1e-15);
        assert!((want - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[1, 2], &[1, 2], 2), 1.0);
    }

    #[test]
    fn table_has_one_line_per_report() {
        let report = MetricsReport {
            label: "popularity".into(),
            target: "test".into(),
            metrics: vec![CutoffMetrics { k: 10, recall: 0.5, ndcg: 0.25 }],
            users_evaluated: 3,
            config_fingerprint: String::new(),
            split_fingerprint: String::new(),
            per_user: None,
        };
        let table = render_table(&[report]);
        assert_eq!(table.lines().count(), 2);
        assert!(table.contains("R@10") && table.contains("0.5000") && table.contains("0.2500"));
    }
}
