mod common;

use std::collections::BTreeSet;

use common::*;
use crowdspan::corpus::{tokenize, Document, Extent};
use crowdspan::scoring::{count_matches, score};
use crowdspan::simulate::SyntheticCorpusSpec;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn strict_match_partitions(input in span_lists()) {
        prop_check!(check_partition(&input));
    }

    #[test]
    fn threshold_sets_nest(input in tally_instance()) {
        prop_check!(check_threshold_nesting(&input));
    }

    #[test]
    fn f_lies_between_precision_and_recall(tp in 0usize..500, fp in 0usize..500, fn_ in 0usize..500) {
        prop_check!(score_bounded(tp, fp, fn_));
    }

    #[test]
    fn swapping_gold_and_hypothesis_swaps_p_and_r(
        gold in prop::collection::btree_set(extent(), 0..10),
        hyp in prop::collection::btree_set(extent(), 0..10),
    ) {
        let forward = crowdspan::scoring::Metrics::from(count_matches(&gold, &hyp));
        let backward = crowdspan::scoring::Metrics::from(count_matches(&hyp, &gold));
        prop_assert_eq!(forward.precision, backward.recall);
        prop_assert_eq!(forward.recall, backward.precision);
        prop_assert!((forward.f1 - backward.f1).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn micro_average_matches_brute_force(input in small_corpus_with_hypothesis()) {
        prop_check!(check_micro_average(&input));
    }

    #[test]
    fn full_redundancy_is_the_sweep_maximum(input in full_crowd()) {
        prop_check!(check_full_redundancy(&input));
    }

    #[test]
    fn pubtator_round_trip(corpus in pubtator_corpus()) {
        prop_check!(check_roundtrip(&corpus));
    }

    #[test]
    fn tokens_cover_all_non_whitespace(text in "[a-z é\\t.,()-]{0,40}") {
        let tokens = tokenize(&text);
        let chars: Vec<char> = text.chars().collect();
        let mut covered = vec![false; chars.len()];
        for pair in tokens.windows(2) {
            prop_assert!(pair[0].end < pair[1].start);
        }
        for t in &tokens {
            prop_assert!(!t.is_empty());
            for c in &mut covered[t.start..t.end] {
                *c = true;
            }
        }
        for (c, cov) in chars.iter().zip(&covered) {
            prop_assert_eq!(c.is_whitespace(), !cov);
        }
    }

    #[test]
    fn snapping_is_idempotent_and_covers_the_selection(
        title in "[a-z]{1,6}( [a-zé]{1,6}){0,4}",
        body in "[a-z]{1,6}( [a-z,]{1,6}){0,8}",
        a in 0usize..80,
        b in 0usize..80,
    ) {
        let doc = Document::new("1", title, body);
        let (start, end) = (a.min(b) % doc.len(), (a.max(b) % doc.len()) + 1);
        prop_assume!(start < end);
        if let Ok(span) = doc.snap_to_tokens(start, end) {
            let again = doc.snap_to_tokens(span.start, span.end).unwrap();
            prop_assert_eq!(again.extent(), span.extent());
            let starts: BTreeSet<usize> = doc.token_boundaries.iter().map(|t| t.start).collect();
            let ends: BTreeSet<usize> = doc.token_boundaries.iter().map(|t| t.end).collect();
            prop_assert!(starts.contains(&span.start) && ends.contains(&span.end));
            // every token touched by the selection is inside the snapped span
            for t in &doc.token_boundaries {
                if t.overlaps(&Extent::new(start, end)) {
                    prop_assert!(span.start <= t.start && t.end <= span.end);
                }
            }
        }
    }

    #[test]
    fn score_of_counts_is_consistent(tp in 0usize..100, fp in 0usize..100, fn_ in 0usize..100) {
        let m = score(tp, fp, fn_);
        prop_assert!((0.0..=1.0).contains(&m.f1));
        prop_assert_eq!(m.f1 == 1.0, tp > 0 && fp == 0 && fn_ == 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn replay_matches_live_state_at_every_prefix(seed in any::<u64>()) {
        let spec = SyntheticCorpusSpec {
            training_docs: 2,
            gold_feedback_docs: 2,
            regular_docs: 4,
            tokens_per_doc: 40,
            mentions_per_doc: 3,
        };
        prop_check!(check_replay_prefixes(seed, spec, 5, 3));
    }
}
