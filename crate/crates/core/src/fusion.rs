//! Information-aware fusion of a visual and a textual embedding per row.
//!
//! Three signals are extracted from each `(visual, textual)` pair:
//! a synergy signal from cross-modal attention, a redundancy signal from a
//! shared encoder applied to the full pair and to each half-masked pair, and
//! the visual component orthogonal to the redundancy signal.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{xavier_uniform, Matrix, ParamId, ParamStore, Tape, Var};
use crate::nn::{Linear, TokenSelfAttention};

pub const DEFAULT_GUARD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub heads: usize,
    /// Share the projections of the two attention directions.
    pub tied_directions: bool,
    /// Threshold on `|r|^2` below which the unique-visual projection is skipped.
    pub guard_eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            tied_directions: false,
            guard_eps: DEFAULT_GUARD_EPS,
        }
    }
}

/// Attention from one modality's query onto the other modality's single
/// token. With one key the attention weights are identically 1, so the
/// block reduces to its value and output projections of the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossAttention {
    pub value: Linear,
    pub output: Linear,
}

impl CrossAttention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
        }
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, context: Var) -> Var {
        let values = self.value.forward(tape, store, context);
        self.output.forward(tape, store, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub d: usize,
    pub config: FusionConfig,
    /// Visual query attending to text.
    pub vision_to_text: CrossAttention,
    /// Textual query attending to vision; equal to `vision_to_text` when tied.
    pub text_to_vision: CrossAttention,
    pub encoder: TokenSelfAttention,
    pub head: Linear,
    pub mask_visual: ParamId,
    pub mask_textual: ParamId,
}

impl FusionParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, config: FusionConfig, rng: &mut R) -> Self {
        let vision_to_text = CrossAttention::new(store, "fusion.vision_to_text", d, rng);
        let text_to_vision = if config.tied_directions {
            vision_to_text
        } else {
            CrossAttention::new(store, "fusion.text_to_vision", d, rng)
        };
        let encoder = TokenSelfAttention::new(store, "fusion.encoder", d, config.heads, rng);
        let head = Linear::new(store, "fusion.head", d, d, rng);
        let mask_visual = store.register("fusion.mask_visual", xavier_uniform(1, d, rng));
        let mask_textual = store.register("fusion.mask_textual", xavier_uniform(1, d, rng));
        Self {
            d,
            config,
            vision_to_text,
            text_to_vision,
            encoder,
            head,
            mask_visual,
            mask_textual,
        }
    }

    /// Every parameter owned by the fusion block, without duplicates.
    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = Vec::new();
        for attn in [self.vision_to_text, self.text_to_vision] {
            ids.extend(attn.value.params());
            ids.extend(attn.output.params());
        }
        ids.extend(self.encoder.params());
        ids.extend(self.head.params());
        ids.extend([self.mask_visual, self.mask_textual]);
        ids.sort_by_key(|p| p.0);
        ids.dedup();
        ids
    }
}

/// Tape handles for every intermediate of one fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub vision_to_text: Var,
    pub text_to_vision: Var,
    pub synergy: Var,
    pub joint: Var,
    pub visual_only: Var,
    pub textual_only: Var,
    pub redundancy: Var,
    pub unique_visual: Var,
}

/// Materialized fusion outputs; `fused` is `n x 3d`.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub vision_to_text: Matrix,
    pub text_to_vision: Matrix,
    pub synergy: Matrix,
    pub joint: Matrix,
    pub visual_only: Matrix,
    pub textual_only: Matrix,
    pub redundancy: Matrix,
    pub unique_visual: Matrix,
    pub fused: Matrix,
}

/// Returns `(h_vt, h_tv, s)` with `s` the mean of the two directions.
pub fn cross_modal_synergy(tape: &Tape, store: &ParamStore, params: &FusionParams, visual: Var, textual: Var) -> (Var, Var, Var) {
    assert_eq!(tape.shape(visual), tape.shape(textual), "modality shape mismatch");
    let vt = params.vision_to_text.forward(tape, store, textual);
    let tv = params.text_to_vision.forward(tape, store, visual);
    let synergy = tape.scale(tape.add(vt, tv), 0.5);
    (vt, tv, synergy)
}

fn encode_pair(tape: &Tape, store: &ParamStore, params: &FusionParams, first: Var, second: Var) -> Var {
    let tokens = params.encoder.forward(tape, store, &[first, second]);
    let pooled = tape.scale(tape.add(tokens[0], tokens[1]), 0.5);
    params.head.forward(tape, store, pooled)
}

/// Returns `(h, h_v, h_t, r)`: encodings of `[v, t]`, `[v, MASK_t]` and
/// `[MASK_v, t]`, and their mean.
pub fn estimate_redundancy(tape: &Tape, store: &ParamStore, params: &FusionParams, visual: Var, textual: Var) -> (Var, Var, Var, Var) {
    assert_eq!(tape.shape(visual), tape.shape(textual), "modality shape mismatch");
    let n = tape.shape(visual).0;
    let mask_t = tape.repeat_row(tape.param(store, params.mask_textual), n);
    let mask_v = tape.repeat_row(tape.param(store, params.mask_visual), n);
    let joint = encode_pair(tape, store, params, visual, textual);
    let visual_only = encode_pair(tape, store, params, visual, mask_t);
    let textual_only = encode_pair(tape, store, params, mask_v, textual);
    let redundancy = tape.scale(tape.add(tape.add(joint, visual_only), textual_only), 1.0 / 3.0);
    (joint, visual_only, textual_only, redundancy)
}

/// `v - (<v,r>/|r|^2) r` per row; rows with `|r|^2 < eps` pass `v` through.
pub fn orthogonal_residual(tape: &Tape, visual: Var, redundancy: Var, eps: f64) -> Var {
    assert_eq!(tape.shape(visual), tape.shape(redundancy), "shape mismatch");
    let coef = tape.safe_div(tape.row_dot(visual, redundancy), tape.row_dot(redundancy, redundancy), eps);
    tape.sub(visual, tape.row_scale(redundancy, coef))
}

/// `[t | s | v']`.
pub fn fuse_item(tape: &Tape, textual: Var, synergy: Var, unique_visual: Var) -> Var {
    tape.concat_cols(&[textual, synergy, unique_visual])
}

/// `[w0 t | w1 s | w2 v']` with `weights` an `n x 3` matrix of row weights.
pub fn fuse_user(tape: &Tape, textual: Var, synergy: Var, unique_visual: Var, weights: Var) -> Var {
    let parts = [textual, synergy, unique_visual];
    let scaled: Vec<Var> = parts
        .iter()
        .enumerate()
        .map(|(k, &p)| tape.row_scale(p, tape.slice_cols(weights, k, k + 1)))
        .collect();
    tape.concat_cols(&scaled)
}

/// Softmax over the rows of the user weight table.
pub fn user_weights(tape: &Tape, store: &ParamStore, table: ParamId) -> Var {
    tape.softmax_rows(tape.param(store, table))
}

/// Synergy, redundancy and unique-visual signals for one batch of pairs.
pub fn fusion_signals(tape: &Tape, store: &ParamStore, params: &FusionParams, visual: Var, textual: Var) -> FusionVars {
    let (vision_to_text, text_to_vision, synergy) = cross_modal_synergy(tape, store, params, visual, textual);
    let (joint, visual_only, textual_only, redundancy) = estimate_redundancy(tape, store, params, visual, textual);
    let unique_visual = orthogonal_residual(tape, visual, redundancy, params.config.guard_eps);
    FusionVars {
        vision_to_text,
        text_to_vision,
        synergy,
        joint,
        visual_only,
        textual_only,
        redundancy,
        unique_visual,
    }
}

/// Runs the item-side fusion on plain matrices and returns every intermediate.
pub fn evaluate_items(store: &ParamStore, params: &FusionParams, visual: &Matrix, textual: &Matrix) -> FusionOutput {
    let tape = Tape::new();
    let v = tape.constant(visual.clone());
    let t = tape.constant(textual.clone());
    let vars = fusion_signals(&tape, store, params, v, t);
    let fused = fuse_item(&tape, t, vars.synergy, vars.unique_visual);
    materialize(&tape, &vars, fused)
}

pub fn materialize(tape: &Tape, vars: &FusionVars, fused: Var) -> FusionOutput {
    let get = |v: Var| tape.value(v).clone();
    FusionOutput {
        vision_to_text: get(vars.vision_to_text),
        text_to_vision: get(vars.text_to_vision),
        synergy: get(vars.synergy),
        joint: get(vars.joint),
        visual_only: get(vars.visual_only),
        textual_only: get(vars.textual_only),
        redundancy: get(vars.redundancy),
        unique_visual: get(vars.unique_visual),
        fused: get(fused),
    }
}

/// Restrict every handle to the given rows.
pub fn gather_vars(tape: &Tape, vars: &FusionVars, rows: &Arc<[usize]>) -> FusionVars {
    let g = |v: Var| tape.gather(v, Arc::clone(rows));
    FusionVars {
        vision_to_text: g(vars.vision_to_text),
        text_to_vision: g(vars.text_to_vision),
        synergy: g(vars.synergy),
        joint: g(vars.joint),
        visual_only: g(vars.visual_only),
        textual_only: g(vars.textual_only),
        redundancy: g(vars.redundancy),
        unique_visual: g(vars.unique_visual),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, heads: usize, tied: bool) -> (ParamStore, FusionParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let config = FusionConfig {
            heads,
            tied_directions: tied,
            ..FusionConfig::default()
        };
        let params = FusionParams::new(&mut store, d, config, &mut rng);
        (store, params)
    }

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn orthogonal_residual_hand_cases() {
        let cases = [
            (array![[2.0, 0.0]], array![[1.0, 0.0]], array![[0.0, 0.0]]),
            (array![[1.0, 1.0]], array![[1.0, 0.0]], array![[0.0, 1.0]]),
            (array![[3.0, 4.0]], array![[0.0, 2.0]], array![[3.0, 0.0]]),
            (array![[3.0, 4.0]], array![[0.0, 0.0]], array![[3.0, 4.0]]),
        ];
        for (v, r, want) in cases {
            let tape = Tape::new();
            let out = orthogonal_residual(&tape, tape.constant(v), tape.constant(r), DEFAULT_GUARD_EPS);
            assert_eq!(*tape.value(out), want);
        }
    }

    #[test]
    fn fuse_item_concatenates_in_order() {
        let tape = Tape::new();
        let t = tape.constant(array![[1.0, 2.0]]);
        let s = tape.constant(array![[3.0, 4.0]]);
        let v = tape.constant(array![[5.0, 6.0]]);
        assert_eq!(*tape.value(fuse_item(&tape, t, s, v)), array![[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]);

        let empty = tape.constant(Matrix::zeros((0, 2)));
        assert_eq!(tape.shape(fuse_item(&tape, empty, empty, empty)), (0, 6));
    }

    #[test]
    fn fuse_user_one_hot_weights_keep_textual_only() {
        let tape = Tape::new();
        let x = random(3, 2, 1);
        let t = tape.constant(x.clone());
        let w = tape.constant(Matrix::from_shape_fn((3, 3), |(_, k)| if k == 0 { 1.0 } else { 0.0 }));
        let out = tape.value(fuse_user(&tape, t, t, t, w)).clone();
        assert_eq!(out.slice(s![.., 0..2]), x);
        assert!(out.slice(s![.., 2..]).iter().all(|&e| e == 0.0));
    }

    #[test]
    fn user_weight_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let table = store.register("w", random(7, 3, 2) * 5.0);
        let tape = Tape::new();
        let w = tape.value(user_weights(&tape, &store, table)).clone();
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    /// Value and output maps set to identity: both directions return their
    /// context unchanged, so equal modalities give `s = x`.
    #[test]
    fn identity_cross_attention_passes_context_through() {
        let (mut store, params) = setup(4, 1, false);
        for attn in [params.vision_to_text, params.text_to_vision] {
            for lin in [attn.value, attn.output] {
                *store.value_mut(lin.weight) = Matrix::eye(4);
                *store.value_mut(lin.bias.unwrap()) = Matrix::zeros((1, 4));
            }
        }
        let x = random(5, 4, 3);
        let out = evaluate_items(&store, &params, &x, &x);
        assert_eq!(out.synergy, x);
    }

    #[test]
    fn tied_directions_swap_under_modality_swap() {
        let (store, params) = setup(4, 2, true);
        let v = random(6, 4, 4);
        let t = random(6, 4, 5);
        let a = evaluate_items(&store, &params, &v, &t);
        let b = evaluate_items(&store, &params, &t, &v);
        assert_eq!(a.vision_to_text, b.text_to_vision);
        assert_eq!(a.text_to_vision, b.vision_to_text);
    }

    #[test]
    fn averaging_identities_hold() {
        let (store, params) = setup(8, 4, false);
        let out = evaluate_items(&store, &params, &random(20, 8, 6), &random(20, 8, 7));
        let s = (&out.vision_to_text + &out.text_to_vision) * 0.5;
        assert!((&s - &out.synergy).iter().all(|e| e.abs() < 1e-15));
        let r = (&out.joint + &out.visual_only + &out.textual_only) * (1.0 / 3.0);
        assert!((&r - &out.redundancy).iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn masked_textual_input_reproduces_visual_only_encoding() {
        let (store, params) = setup(4, 2, false);
        let v = random(3, 4, 8);
        let mask = store.value(params.mask_textual).broadcast((3, 4)).unwrap().to_owned();
        let out = evaluate_items(&store, &params, &v, &mask);
        assert_eq!(out.joint, out.visual_only);
    }

    #[test]
    fn unique_visual_is_orthogonal_and_not_longer() {
        let (store, params) = setup(8, 4, false);
        let v = random(200, 8, 9);
        let out = evaluate_items(&store, &params, &v, &random(200, 8, 10));
        for ((vp, r), v) in out.unique_visual.rows().into_iter().zip(out.redundancy.rows()).zip(v.rows()) {
            let (vn, rn) = (v.dot(&v).sqrt(), r.dot(&r).sqrt());
            assert!(vp.dot(&r).abs() <= 1e-5 * vn * rn);
            assert!(vp.dot(&vp).sqrt() <= vn + 1e-12);
        }
    }

    #[test]
    fn fused_width_is_three_d() {
        let (store, params) = setup(4, 1, false);
        let out = evaluate_items(&store, &params, &random(2, 4, 1), &random(2, 4, 2));
        assert_eq!(out.fused.dim(), (2, 12));
    }

    #[test]
    fn redundancy_depends_on_mask_tokens() {
        let (mut store, params) = setup(4, 2, false);
        let v = random(4, 4, 11);
        let t = random(4, 4, 12);
        let base = evaluate_items(&store, &params, &v, &t).redundancy;
        store.value_mut(params.mask_visual)[[0, 0]] += 1e-3;
        let moved = evaluate_items(&store, &params, &v, &t).redundancy;
        assert!((&moved - &base).iter().any(|e| e.abs() > 1e-9));
    }
}
