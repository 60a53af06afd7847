//! Invariants checked over random inputs.

use proptest::prelude::*;

use spotlighter::activation::{
    finish_profile, sample_scores, score_and_select, select_activated, semantic_scores, ActivationFlags,
    SelectionVariant,
};
use spotlighter::features::{decode_features, encode_features, FeatureSet, Provenance, Split};
use spotlighter::memory_bank::{assign_tokens, init_bank, match_class, InitMode};
use spotlighter::numerics::{cosine_matrix, softmax};
use spotlighter::pipeline::{harmonic_mean, RunConfig};
use spotlighter::Matrix;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_filter("rows must be nonzero", move |v| {
            v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-4)
        })
        .prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_are_permutation_equivariant(
        tokens in matrix(12, 6),
        text in prop::collection::vec(0.1f64..1.0, 6),
        protos in matrix(3, 6),
        perm in permutation(12),
    ) {
        let permuted = tokens.select_rows(&perm);
        let s = sample_scores(&tokens, &text).unwrap();
        let sp = sample_scores(&permuted, &text).unwrap();
        let m = semantic_scores(&tokens, &protos).unwrap();
        let mp = semantic_scores(&permuted, &protos).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((sp[i] - s[p]).abs() < 1e-12);
            prop_assert!((mp[i] - m[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_selects_the_same_token_set_under_permutation(
        scores in prop::collection::vec(-1.0f64..1.0, 16),
        perm in permutation(16),
        k in 1usize..=16,
    ) {
        let permuted: Vec<f64> = perm.iter().map(|&p| scores[p]).collect();
        let a = select_activated(&scores, k, SelectionVariant::TopK).unwrap();
        let b: Vec<usize> =
            select_activated(&permuted, k, SelectionVariant::TopK).unwrap().iter().map(|&i| perm[i]).collect();
        // Ties may resolve differently; compare the selected score multisets.
        let mut sa: Vec<f64> = a.iter().map(|&i| scores[i]).collect();
        let mut sb: Vec<f64> = b.iter().map(|&i| scores[i]).collect();
        sa.sort_by(f64::total_cmp);
        sb.sort_by(f64::total_cmp);
        prop_assert_eq!(sa, sb);
        prop_assert_eq!(a.len(), k);
    }

    #[test]
    fn selection_variants_partition_scores(scores in prop::collection::vec(-1.0f64..1.0, 20), k in 1usize..=20) {
        let top = select_activated(&scores, k, SelectionVariant::TopK).unwrap();
        let rest = select_activated(&scores, k, SelectionVariant::RemoveTopK).unwrap();
        let bottom = select_activated(&scores, k, SelectionVariant::BottomK).unwrap();
        let mut all: Vec<usize> = top.iter().chain(&rest).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..20).collect::<Vec<_>>());
        let min_top = top.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(rest.iter().all(|&i| scores[i] <= min_top));
        let max_bottom = bottom.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        let others = (0..20).filter(|i| !bottom.contains(i));
        prop_assert!(others.into_iter().all(|i| scores[i] >= max_bottom));
    }

    #[test]
    fn tiers_partition_the_selection(
        tokens in matrix(16, 5),
        text in prop::collection::vec(0.1f64..1.0, 5),
        protos in matrix(3, 5),
        k in 1usize..=16,
        semantic_on: bool,
        recalc_on: bool,
    ) {
        let flags = ActivationFlags { k, semantic_on, recalc_on, variant: SelectionVariant::TopK };
        let mut profile = score_and_select(&tokens, &text, &protos, flags).unwrap();
        finish_profile(&mut profile, &tokens, &protos).unwrap();
        prop_assert_eq!(profile.tier1.len(), k.div_ceil(2));
        prop_assert_eq!(profile.tier1.len() + profile.tier2.len(), k);
        let mut joined: Vec<usize> = profile.tier1.iter().chain(&profile.tier2).copied().collect();
        let mut selected = profile.selected.clone();
        joined.sort_unstable();
        selected.sort_unstable();
        prop_assert_eq!(joined, selected);
    }

    #[test]
    fn cosine_is_scale_invariant(a in matrix(4, 6), b in matrix(3, 6), s in 0.01f64..100.0) {
        let base = cosine_matrix(&a, &b).unwrap();
        let scaled = cosine_matrix(&a.scale(s), &b).unwrap();
        prop_assert!(base.max_abs_diff(&scaled) < 1e-12);
        prop_assert!(base.data().iter().all(|c| (-1.0 - 1e-12..=1.0 + 1e-12).contains(c)));
    }

    #[test]
    fn softmax_is_shift_invariant(x in prop::collection::vec(-5.0f64..5.0, 1..20), c in -50.0f64..50.0, t in 0.01f64..2.0) {
        let p = softmax(&x, t).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = softmax(&shifted, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_rows_are_distributions(tokens in matrix(9, 6), protos in matrix(4, 6), t in 0.01f64..1.0) {
        let a = assign_tokens(&tokens, &protos, t).unwrap();
        for r in 0..9 {
            let row = a.weights.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!(row[a.hard[r]] >= row.iter().copied().fold(0.0, f64::max));
        }
    }

    #[test]
    fn beta_one_freezes_the_bank(text in matrix(3, 6), tokens in matrix(8, 6), seed in 0u64..1000, label in 0usize..3) {
        let mut bank = init_bank(&text, 4, InitMode::TextSeeded, 0.1, seed).unwrap().with_beta(1.0);
        let before = bank.clone();
        for _ in 0..5 {
            let a = assign_tokens(&tokens, bank.class_prototypes(label), 0.01).unwrap();
            bank.momentum_update(label, &a, &tokens).unwrap();
        }
        prop_assert_eq!(bank, before);
    }

    #[test]
    fn update_touches_only_the_target_class(text in matrix(3, 6), tokens in matrix(8, 6), label in 0usize..3) {
        let mut bank = init_bank(&text, 4, InitMode::Random, 0.1, 5).unwrap();
        let before = bank.clone();
        let a = assign_tokens(&tokens, bank.class_prototypes(label), 0.01).unwrap();
        bank.momentum_update(label, &a, &tokens).unwrap();
        for c in (0..3).filter(|&c| c != label) {
            prop_assert_eq!(bank.class_prototypes(c), before.class_prototypes(c));
        }
        for row in bank.class_prototypes(label).row_iter() {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn match_class_is_scale_invariant(text in matrix(4, 6), pooled in prop::collection::vec(0.05f64..1.0, 6), s in 0.01f64..100.0) {
        let bank = init_bank(&text, 3, InitMode::TextSeeded, 0.2, 3).unwrap();
        let scaled: Vec<f64> = pooled.iter().map(|v| v * s).collect();
        prop_assert_eq!(match_class(&pooled, &bank).unwrap(), match_class(&scaled, &bank).unwrap());
    }

    #[test]
    fn harmonic_mean_is_bounded(b in 0.0f64..100.0, n in 0.0f64..100.0) {
        let hm = harmonic_mean(b, n);
        prop_assert!(hm >= 0.0);
        prop_assert!(hm <= (b + n) / 2.0 + 1e-9);
        prop_assert!(hm <= b.max(n) + 1e-9);
        if b > 0.0 && n > 0.0 {
            prop_assert!(hm >= b.min(n) - 1e-9);
        }
        prop_assert!((hm - harmonic_mean(n, b)).abs() < 1e-12);
    }

    #[test]
    fn feature_files_round_trip(
        items in prop::collection::vec(matrix(4, 3), 1..6),
        text in matrix(2, 3),
        labelled: bool,
    ) {
        let mut items = items;
        items.iter_mut().for_each(|m| m.round_to_f32());
        let mut text = text;
        text.round_to_f32();
        let labels = labelled.then(|| (0..items.len()).map(|i| i % 2).collect());
        let fs = FeatureSet::new(items, labels, text, Split::Novel, Provenance::Synthetic { seed: 0 }).unwrap();
        let bytes = encode_features(&fs).unwrap();
        let back = decode_features(&bytes, Provenance::Synthetic { seed: 0 }).unwrap();
        prop_assert_eq!(back, fs);
    }

    #[test]
    fn config_text_round_trips(
        k in 1usize..64,
        beta in 0.0f64..=1.0,
        lr in 1e-5f64..1.0,
        seed: u64,
        semantic_on: bool,
        variant in prop::sample::select(SelectionVariant::ALL.to_vec()),
    ) {
        let cfg = RunConfig { k_act: k, beta, lr, seed, semantic_on, selection_variant: variant, ..RunConfig::default() };
        let back = RunConfig::parse_kv(&cfg.to_kv(), RunConfig::default()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
