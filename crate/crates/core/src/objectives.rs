//! Contrastive alignment losses, the pairwise ranking loss and their
//! weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_ALIGNMENT_WEIGHT: f64 = 0.1;
const NORM_FLOOR: f64 = 1e-12;

/// Scalar loss values of one step. `total = rec + alignment_weight * (synergy + redundancy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub synergy: f64,
    pub redundancy: f64,
    pub total: f64,
    pub alignment_weight: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.rec, self.synergy, self.redundancy, self.total].iter().all(|x| x.is_finite())
    }
}

/// Symmetric in-batch InfoNCE between paired rows of `a` and `b` after L2
/// normalization, averaged over rows and both directions.
pub fn infonce(tape: &Tape, a: Var, b: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let (n, _) = tape.shape(a);
    if n == 0 || tape.shape(a) != tape.shape(b) {
        return Err(Error::Internal(format!(
            "infonce needs equal non-empty operands, got {:?} and {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let an = tape.normalize_rows(a, NORM_FLOOR);
    let bn = tape.normalize_rows(b, NORM_FLOOR);
    let logits = tape.scale(tape.matmul(an, tape.transpose(bn)), 1.0 / temperature);
    let positives = tape.diag(logits);
    let forward = tape.sub(tape.logsumexp_rows(logits), positives);
    let backward = tape.sub(tape.logsumexp_rows(tape.transpose(logits)), positives);
    Ok(tape.scale(tape.add(tape.mean(forward), tape.mean(backward)), 0.5))
}

/// Alignment of the two attention directions.
pub fn synergy_loss(tape: &Tape, vision_to_text: Var, text_to_vision: Var, temperature: f64) -> Result<Var> {
    infonce(tape, vision_to_text, text_to_vision, temperature)
}

/// Sum of the three pairwise alignments among the full and half-masked encodings.
pub fn redundancy_loss(tape: &Tape, joint: Var, visual_only: Var, textual_only: Var, temperature: f64) -> Result<Var> {
    let a = infonce(tape, joint, visual_only, temperature)?;
    let b = infonce(tape, joint, textual_only, temperature)?;
    let c = infonce(tape, visual_only, textual_only, temperature)?;
    Ok(tape.add(tape.add(a, b), c))
}

/// Mean of `softplus(neg - pos)`; both operands are `n x 1`.
pub fn bpr_loss(tape: &Tape, positive: Var, negative: Var) -> Var {
    tape.mean(tape.softplus(tape.sub(negative, positive)))
}

/// Combines the parts on the tape and reports their values.
pub fn total_loss(tape: &Tape, rec: Var, synergy: Var, redundancy: Var, alignment_weight: f64) -> Result<(Var, LossBreakdown)> {
    if !(alignment_weight >= 0.0 && alignment_weight.is_finite()) {
        return Err(Error::Config(format!("alignment weight must be non-negative, got {alignment_weight}")));
    }
    let total = tape.add(rec, tape.scale(tape.add(synergy, redundancy), alignment_weight));
    let breakdown = LossBreakdown {
        rec: tape.scalar(rec),
        synergy: tape.scalar(synergy),
        redundancy: tape.scalar(redundancy),
        total: tape.scalar(total),
        alignment_weight,
    };
    Ok((total, breakdown))
}

/// Convenience wrapper evaluating `infonce` on plain matrices.
pub fn infonce_value(a: &Matrix, b: &Matrix, temperature: f64) -> Result<f64> {
    let tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let loss = infonce(&tape, a, b, temperature)?;
    Ok(tape.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn scalar_of(f: impl Fn(&Tape) -> Var) -> f64 {
        let tape = Tape::new();
        let v = f(&tape);
        tape.scalar(v)
    }

    #[test]
    fn single_row_infonce_is_zero() {
        let x = random(1, 4, 0);
        assert!(infonce_value(&x, &random(1, 4, 1), 0.2).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identical_rows_give_log_n() {
        let x = Matrix::from_elem((4, 3), 0.7);
        let got = infonce_value(&x, &x, 0.2).unwrap();
        assert!((got - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_pair_at_unit_temperature() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let want = (1.0 + (-1f64).exp()).ln();
        assert!((infonce_value(&x, &x, 1.0).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn non_positive_temperature_is_a_config_error() {
        let x = random(2, 2, 0);
        assert!(matches!(infonce_value(&x, &x, 0.0), Err(Error::Config(_))));
        assert!(matches!(infonce_value(&x, &x, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn alignment_lowers_synergy_loss() {
        for seed in 0..10 {
            let a = random(8, 4, seed);
            let b = random(8, 4, seed + 100);
            let misaligned = infonce_value(&a, &b, 0.2).unwrap();
            let aligned = infonce_value(&a, &a, 0.2).unwrap();
            assert!(aligned < misaligned);
            assert_ne!(infonce_value(&a, &b, 0.4).unwrap(), misaligned);
        }
    }

    #[test]
    fn redundancy_loss_is_sum_of_pairwise_terms() {
        let (h, hv, ht) = (random(5, 3, 1), random(5, 3, 2), random(5, 3, 3));
        let got = scalar_of(|tape| {
            let (a, b, c) = (tape.constant(h.clone()), tape.constant(hv.clone()), tape.constant(ht.clone()));
            redundancy_loss(tape, a, b, c, 0.2).unwrap()
        });
        let want = infonce_value(&h, &hv, 0.2).unwrap() + infonce_value(&h, &ht, 0.2).unwrap() + infonce_value(&hv, &ht, 0.2).unwrap();
        assert!((got - want).abs() < 1e-12);

        let one = random(1, 3, 9);
        let zero = scalar_of(|tape| {
            let a = tape.constant(one.clone());
            redundancy_loss(tape, a, a, a, 0.2).unwrap()
        });
        assert!(zero.abs() < 1e-15);
    }

    fn bpr(pos: f64, neg: f64) -> f64 {
        scalar_of(|tape| {
            let p = tape.constant(Matrix::from_elem((1, 1), pos));
            let n = tape.constant(Matrix::from_elem((1, 1), neg));
            bpr_loss(tape, p, n)
        })
    }

    #[test]
    fn bpr_hand_values_and_stability() {
        assert!((bpr(0.3, 0.3) - 2f64.ln()).abs() < 1e-15);
        let big = bpr(40.0, 0.0);
        assert!(big.is_finite() && big < 1e-17);
        assert!((bpr(0.0, 40.0) - 40.0).abs() < 1e-12);
        assert!(bpr(1.0, 0.0) < bpr(0.5, 0.0));
    }

    #[test]
    fn total_loss_combination() {
        let run = |rec: f64, s: f64, r: f64, lambda: f64| {
            let tape = Tape::new();
            let c = |x: f64| tape.constant(Matrix::from_elem((1, 1), x));
            total_loss(&tape, c(rec), c(s), c(r), lambda).unwrap().1
        };
        assert_eq!(run(2.0, 1.0, 1.0, 0.0).total, 2.0);
        assert!((run(2.0, 1.0, 1.0, 0.1).total - 2.2).abs() < 1e-15);
        assert_eq!(run(0.0, 0.0, 0.0, 0.1).total, 0.0);
        let tape = Tape::new();
        let z = tape.constant(Matrix::zeros((1, 1)));
        assert!(total_loss(&tape, z, z, z, -0.1).is_err());
    }
}
