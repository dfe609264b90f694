//! Randomized invariants of propagation, fusion, objectives and ranking.

use infofuse_core::autograd::{Matrix, ParamStore, Tape};
use infofuse_core::corpus::{InteractionSet, Vocabulary};
use infofuse_core::encoder::{propagate_bipartite_values, FinalEmbeddings};
use infofuse_core::evaluator::{ndcg_at_k, rank_items, recall_at_k};
use infofuse_core::fusion::{evaluate_items, FusionConfig, FusionParams};
use infofuse_core::graphs::build_norm_bipartite;
use infofuse_core::objectives::{bpr_loss, infonce_value};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn vocab(n_users: usize, n_items: usize) -> Vocabulary {
    Vocabulary {
        users: (0..n_users).map(|u| format!("u{u}")).collect(),
        items: (0..n_items).map(|i| format!("i{i}")).collect(),
    }
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bipartite_propagation_is_linear(
        pairs in proptest::collection::vec((0u32..8, 0u32..10), 1..40),
        users0 in matrix(8, 3),
        items0 in matrix(10, 3),
        alpha in -3.0f64..3.0,
        layers in 0usize..4,
    ) {
        let graph = build_norm_bipartite(&InteractionSet::from_pairs(vocab(8, 10), pairs));
        let (u, i) = propagate_bipartite_values(&graph, &users0, &items0, layers);
        let (su, si) = propagate_bipartite_values(&graph, &(&users0 * alpha), &(&items0 * alpha), layers);
        let tol = 1e-12 * (1.0 + max_abs(&u).max(max_abs(&i)) * alpha.abs());
        prop_assert!(max_abs(&(&su - &(&u * alpha))) <= tol);
        prop_assert!(max_abs(&(&si - &(&i * alpha))) <= tol);
    }

    #[test]
    fn user_scores_are_the_matrix_vector_product(users in matrix(4, 6), items in matrix(9, 6), user in 0usize..4) {
        let embeddings = FinalEmbeddings { users: users.clone(), items: items.clone() };
        let scores = embeddings.user_scores(user);
        let expected: Array1<f64> = items.rows().into_iter().map(|z| z.dot(&users.row(user))).collect();
        for (a, b) in scores.iter().zip(&expected) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn unique_visual_is_orthogonal_to_redundancy(visual in matrix(12, 8), textual in matrix(12, 8), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = FusionParams::new(&mut store, 8, FusionConfig::default(), &mut rng);
        let out = evaluate_items(&store, &params, &visual, &textual);
        for ((v, r), vp) in visual.rows().into_iter().zip(out.redundancy.rows()).zip(out.unique_visual.rows()) {
            let (rr, nvp) = (r.dot(&r), vp.dot(&vp).sqrt());
            if rr >= 1e-8 && nvp > 1e-12 {
                prop_assert!((vp.dot(&r) / (nvp * rr.sqrt())).abs() < 1e-5);
            }
            prop_assert!(nvp <= v.dot(&v).sqrt() + 1e-12);
        }
    }

    #[test]
    fn infonce_is_invariant_to_joint_row_permutation(a in matrix(6, 4), b in matrix(6, 4), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let original = infonce_value(&a, &b, 0.2).unwrap();
        let pa = Array2::from_shape_fn((6, 4), |(r, c)| a[[perm[r], c]]);
        let pb = Array2::from_shape_fn((6, 4), |(r, c)| b[[perm[r], c]]);
        let permuted = infonce_value(&pa, &pb, 0.2).unwrap();
        prop_assert!((original - permuted).abs() <= 1e-12 * (1.0 + original.abs()));
    }

    #[test]
    fn bpr_decreases_as_positive_score_rises(pos in -20.0f64..20.0, neg in -20.0f64..20.0, step in 0.01f64..5.0) {
        let loss = |p: f64| {
            let tape = Tape::new();
            let out = bpr_loss(&tape, tape.constant(Array2::from_elem((1, 1), p)), tape.constant(Array2::from_elem((1, 1), neg)));
            tape.scalar(out)
        };
        prop_assert!(loss(pos + step) < loss(pos));
    }

    #[test]
    fn ranking_respects_mask_and_recall_grows_with_k(
        scores in proptest::collection::vec(0u8..6, 30),
        mask in proptest::collection::btree_set(0u32..30, 0..12),
        relevant in proptest::collection::btree_set(0u32..30, 1..8),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let mask: Vec<u32> = mask.into_iter().collect();
        let relevant: Vec<u32> = relevant.into_iter().filter(|i| mask.binary_search(i).is_err()).collect();
        let mut previous = 0.0;
        for k in 1..=30 {
            let top = rank_items(&scores, &mask, k);
            prop_assert!(top.iter().all(|&i| mask.binary_search(&(i as u32)).is_err()));
            prop_assert_eq!(top.len(), k.min(30 - mask.len()));
            if relevant.is_empty() {
                continue;
            }
            let recall = recall_at_k(&top, &relevant, k);
            let ndcg = ndcg_at_k(&top, &relevant, k);
            prop_assert!((0.0..=1.0).contains(&recall));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ndcg));
            prop_assert!(recall >= previous);
            previous = recall;
        }
    }
}
