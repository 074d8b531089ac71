#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use crowdspan::aggregate::{apply_threshold, best_point, sweep_k, tally_votes, SweepOptions};
use crowdspan::corpus::{parse_pubtator, serialize_pubtator, DocContext, Document, Extent, GoldCorpus, Span};
use crowdspan::lifecycle::{LifecycleConfig, LifecycleState};
use crowdspan::redundancy::estimate_redundancy;
use crowdspan::scoring::{evaluate_corpus, match_strict, ratio, score, Hypothesis};
use crowdspan::service::{logical_clock, Service};
use crowdspan::simulate::{drive_campaign, synthetic_corpus, PopulationParams, SyntheticCorpusSpec};
use crowdspan::store::{replay, EventStore, MemoryStore};
use crowdspan::Submission;
use proptest::prelude::*;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {} else {
            return Err(format!($($fmt)+));
        }
    };
}

fn span(doc: &str, e: Extent) -> Span {
    Span {
        doc_id: doc.into(),
        start: e.start,
        end: e.end,
        surface: String::new(),
        label: None,
        concept_id: None,
    }
}

pub fn extent() -> impl Strategy<Value = Extent> {
    (0usize..40, 1usize..6).prop_map(|(s, l)| Extent::new(s, s + l))
}

/// Gold and hypothesis span lists over one document, possibly with repeats.
pub fn span_lists() -> impl Strategy<Value = (Vec<Extent>, Vec<Extent>)> {
    (prop::collection::vec(extent(), 0..12), prop::collection::vec(extent(), 0..12))
}

pub fn check_partition((gold, hyp): &(Vec<Extent>, Vec<Extent>)) -> Check {
    let g: Vec<Span> = gold.iter().map(|e| span("d", *e)).collect();
    let h: Vec<Span> = hyp.iter().map(|e| span("d", *e)).collect();
    let result = match_strict(&g, &h).map_err(|e| e.to_string())?;
    let set = |v: &[Span]| v.iter().map(Span::extent).collect::<BTreeSet<_>>();
    let (tp, fp, fn_) = (set(&result.true_positives), set(&result.false_positives), set(&result.false_negatives));
    let gold_set: BTreeSet<Extent> = gold.iter().copied().collect();
    let hyp_set: BTreeSet<Extent> = hyp.iter().copied().collect();
    ensure!(tp.is_disjoint(&fp), "TP and FP intersect");
    ensure!(tp.is_disjoint(&fn_), "TP and FN intersect");
    ensure!(&tp | &fp == hyp_set, "TP ∪ FP differs from the hypothesis");
    ensure!(&tp | &fn_ == gold_set, "TP ∪ FN differs from gold");
    let c = result.counts();
    ensure!(c.tp + c.fp == hyp_set.len(), "tp + fp = {} but |H| = {}", c.tp + c.fp, hyp_set.len());
    ensure!(c.tp + c.fn_ == gold_set.len(), "tp + fn = {} but |G| = {}", c.tp + c.fn_, gold_set.len());
    Ok(())
}

const WORD_TEXT: &str = "alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu";

/// Up to five documents, each with gold chosen among its tokens and an
/// arbitrary hypothesis.
pub fn small_corpus_with_hypothesis() -> impl Strategy<Value = (GoldCorpus, Hypothesis)> {
    let tokens = crowdspan::corpus::tokenize(&format!("t {WORD_TEXT}")).len();
    let doc = (
        prop::collection::vec(any::<bool>(), tokens),
        prop::collection::btree_set((0usize..60, 1usize..8).prop_map(|(s, l)| Extent::new(s, s + l)), 0..8),
        any::<bool>(),
    );
    prop::collection::vec(doc, 1..=5).prop_map(|docs| {
        let mut corpus = GoldCorpus::new();
        let mut hyp = Hypothesis::new();
        for (i, (picked, spans, present)) in docs.into_iter().enumerate() {
            let id = format!("{}", 100 + i);
            let doc = Document::new(id.clone(), "t", WORD_TEXT);
            let gold = doc
                .token_boundaries
                .iter()
                .zip(&picked)
                .filter(|(_, p)| **p)
                .map(|(t, _)| doc.span(*t).unwrap())
                .collect();
            let len = doc.len();
            corpus.insert(doc, gold).unwrap();
            if present {
                hyp.insert(id, spans.into_iter().filter(|e| e.end <= len).collect());
            }
        }
        (corpus, hyp)
    })
}

pub fn check_micro_average((corpus, hyp): &(GoldCorpus, Hypothesis)) -> Check {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (id, gold) in &corpus.gold {
        let predicted: Vec<Extent> = hyp.get(id).map(|s| s.iter().copied().collect()).unwrap_or_default();
        for p in &predicted {
            if gold.iter().any(|g| g.start == p.start && g.end == p.end) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        fn_ += gold.iter().filter(|g| !predicted.iter().any(|p| p.start == g.start && p.end == g.end)).count();
    }
    let m = evaluate_corpus(corpus, hyp).map_err(|e| e.to_string())?;
    ensure!((m.tp, m.fp, m.fn_) == (tp, fp, fn_), "counts {:?} vs brute force {:?}", (m.tp, m.fp, m.fn_), (tp, fp, fn_));
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    ensure!((m.precision - p).abs() < 1e-12 && (m.recall - r).abs() < 1e-12, "P/R differ");
    ensure!((m.f1 - f).abs() < 1e-12, "F {} vs {}", m.f1, f);
    Ok(())
}

/// Workers voting over ten candidate spans, plus a gold subset.
pub fn tally_instance() -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<bool>)> {
    (
        prop::collection::vec(prop::collection::vec(any::<bool>(), 10), 1..10),
        prop::collection::vec(any::<bool>(), 10),
    )
}

fn candidates() -> Vec<Extent> {
    (0..10).map(|i| Extent::new(i * 10, i * 10 + 4)).collect()
}

pub fn check_threshold_nesting((workers, gold_mask): &(Vec<Vec<bool>>, Vec<bool>)) -> Check {
    let cands = candidates();
    let subs: Vec<Submission> = workers
        .iter()
        .enumerate()
        .map(|(w, mask)| Submission {
            worker_id: format!("w{w}"),
            doc_id: "d".into(),
            spans: cands.iter().zip(mask).filter(|(_, m)| **m).map(|(e, _)| *e).collect(),
            submitted_at: 0,
            context: DocContext::Regular,
        })
        .collect();
    let refs: Vec<&Submission> = subs.iter().collect();
    let tally = tally_votes("d", &refs).map_err(|e| e.to_string())?;
    let gold: BTreeSet<Extent> = cands.iter().zip(gold_mask).filter(|(_, m)| **m).map(|(e, _)| *e).collect();
    let recall = |s: &BTreeSet<Extent>| ratio(s.intersection(&gold).count(), gold.len());
    for k in 1..=workers.len() + 1 {
        let wide = apply_threshold(&tally, k);
        let narrow = apply_threshold(&tally, k + 1);
        ensure!(narrow.is_subset(&wide), "S_{} is not inside S_{}", k + 1, k);
        ensure!(recall(&narrow) <= recall(&wide), "recall rose from k={} to k={}", k, k + 1);
    }
    ensure!(apply_threshold(&tally, workers.len() + 1).is_empty(), "spans above the worker count");
    Ok(())
}

/// A small corpus in which every one of `n` workers annotated every document.
pub fn full_crowd() -> impl Strategy<Value = (GoldCorpus, Vec<Submission>, usize)> {
    (1usize..=4, 1usize..=6).prop_flat_map(|(docs, workers)| {
        (
            prop::collection::vec(prop::collection::vec(any::<bool>(), 10), docs),
            prop::collection::vec(prop::collection::vec(prop::collection::vec(any::<bool>(), 10), docs), workers),
        )
            .prop_map(move |(gold_masks, worker_masks)| {
                let cands = candidates();
                let text = "aaaa ".repeat(20);
                let mut corpus = GoldCorpus::new();
                for (d, mask) in gold_masks.iter().enumerate() {
                    let doc = Document::new(format!("d{d}"), "", text.trim());
                    let gold = cands
                        .iter()
                        .zip(mask)
                        .filter(|(_, m)| **m)
                        .map(|(e, _)| doc.span(*e).unwrap())
                        .collect();
                    corpus.insert(doc, gold).unwrap();
                }
                let mut subs = Vec::new();
                for (w, per_doc) in worker_masks.iter().enumerate() {
                    for (d, mask) in per_doc.iter().enumerate() {
                        subs.push(Submission {
                            worker_id: format!("w{w}"),
                            doc_id: format!("d{d}"),
                            spans: cands.iter().zip(mask).filter(|(_, m)| **m).map(|(e, _)| *e).collect(),
                            submitted_at: 0,
                            context: DocContext::Regular,
                        });
                    }
                }
                (corpus, subs, workers)
            })
    })
}

pub fn check_full_redundancy((corpus, subs, n): &(GoldCorpus, Vec<Submission>, usize)) -> Check {
    let est = estimate_redundancy(subs, corpus, *n, 5, 11).map_err(|e| e.to_string())?;
    let sweep = sweep_k(subs, corpus, *n, SweepOptions::default()).map_err(|e| e.to_string())?;
    let best = best_point(&sweep).ok_or("empty sweep")?;
    ensure!(est.stddev_max_f == 0.0, "stddev {} at full N", est.stddev_max_f);
    ensure!(est.mean_max_f == best.metrics.f1, "mean {} vs sweep max {}", est.mean_max_f, best.metrics.f1);
    Ok(())
}

fn word() -> impl Strategy<Value = String> {
    "[A-Za-z0-9éüαβ(),.;:'-]{1,8}"
}

/// Corpora with free-form (tab- and newline-free) text and labelled gold.
pub fn pubtator_corpus() -> impl Strategy<Value = GoldCorpus> {
    let doc = (
        prop::collection::vec(word(), 1..6),
        prop::collection::vec(word(), 0..30),
        prop::collection::vec((any::<bool>(), 0u8..4, prop::option::of("D[0-9]{6}")), 36),
    );
    prop::collection::btree_map(1_000_000u32..9_999_999, doc, 0..5).prop_map(|docs| {
        let mut corpus = GoldCorpus::new();
        for (pmid, (title, body, marks)) in docs {
            let doc = Document::new(pmid.to_string(), title.join(" "), body.join(" "));
            let mut gold = Vec::new();
            let mut next_free = 0;
            for (tok, (pick, label, concept)) in doc.token_boundaries.iter().zip(marks) {
                if pick && tok.start >= next_free {
                    let mut s = doc.span(*tok).unwrap();
                    s.label = match label {
                        0 => None,
                        1 => Some("Disease".into()),
                        2 => Some("SpecificDisease".into()),
                        _ => Some("Modifier".into()),
                    };
                    s.concept_id = concept;
                    next_free = tok.end;
                    gold.push(s);
                }
            }
            corpus.insert(doc, gold).unwrap();
        }
        corpus
    })
}

pub fn check_roundtrip(corpus: &GoldCorpus) -> Check {
    let text = serialize_pubtator(corpus);
    let parsed = parse_pubtator(&text).map_err(|e| e.to_string())?;
    ensure!(parsed.documents == corpus.documents, "documents differ after round trip");
    ensure!(parsed.gold == corpus.gold, "gold differs after round trip");
    ensure!(serialize_pubtator(&parsed) == text, "serialization is not stable");
    Ok(())
}

/// Runs a simulated campaign, snapshotting live state after every event, then
/// replays every prefix of the log and compares.
pub fn check_replay_prefixes(seed: u64, spec: SyntheticCorpusSpec, workers: usize, redundancy: usize) -> Check {
    let corpus = Arc::new(synthetic_corpus(spec, seed));
    let config = LifecycleConfig { redundancy_target: redundancy, gold_interval: 3, seed, ..Default::default() };
    let mut service = Service::open(corpus.clone(), config.clone(), MemoryStore::new(), logical_clock())
        .map_err(|e| e.to_string())?;
    let live: Arc<Mutex<Vec<(u64, LifecycleState)>>> = Arc::default();
    let sink = live.clone();
    service.set_observer(Box::new(move |record, lifecycle| {
        sink.lock().unwrap().push((record.sequence, lifecycle.snapshot()));
    }));
    let campaign = drive_campaign(service, &PopulationParams::heterogeneous(workers), seed).map_err(|e| e.to_string())?;
    let records = campaign.service.store().records().map_err(|e| e.to_string())?;
    let live = live.lock().unwrap();
    ensure!(live.len() == records.len(), "{} snapshots for {} events", live.len(), records.len());
    ensure!(!records.is_empty(), "campaign produced no events");

    let empty = replay(corpus.clone(), config.clone(), &[]).map_err(|e| e.to_string())?;
    ensure!(empty.snapshot() == LifecycleState::default(), "empty log does not give empty state");
    let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
    for (n, (sequence, snapshot)) in live.iter().enumerate() {
        ensure!(*sequence == n as u64 + 1, "sequence {} at position {}", sequence, n);
        let replayed = replay(corpus.clone(), config.clone(), &records[..=n]).map_err(|e| e.to_string())?;
        ensure!(replayed.snapshot() == *snapshot, "replay of the first {} events differs from live state", n + 1);
        *kinds.entry(records[n].event.kind()).or_default() += 1;
    }
    ensure!(kinds.contains_key("SUBMITTED"), "no submissions in campaign");
    Ok(())
}

/// Asserts a [`Check`] inside a proptest body.
#[macro_export]
macro_rules! prop_check {
    ($e:expr) => {
        if let Err(msg) = $e {
            return Err(proptest::test_runner::TestCaseError::fail(msg));
        }
    };
}

pub fn score_bounded(tp: usize, fp: usize, fn_: usize) -> Check {
    let m = score(tp, fp, fn_);
    let (lo, hi) = (m.precision.min(m.recall), m.precision.max(m.recall));
    ensure!(m.f1 >= lo - 1e-12 && m.f1 <= hi + 1e-12, "F {} outside [{}, {}]", m.f1, lo, hi);
    Ok(())
}
