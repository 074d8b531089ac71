//! Quality as a function of workers per document, estimated by repeatedly
//! subsampling each document's annotators and re-running the threshold sweep.
//!
//! Randomness comes from ChaCha8 seeded with the caller's seed; repetition
//! `r` uses stream `r` of that generator, so repetitions are independent of
//! evaluation order and bit-reproducible across platforms.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    best_point, by_document, check_known, histograms, sweep_documents, AggregateError, Submission,
    SweepOptions, SweepPoint, VoteHistogram,
};
use crate::corpus::GoldCorpus;
use crate::scoring::{mean_and_population_stddev, Counts, Metrics};

pub const DEFAULT_REPETITIONS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum RedundancyError {
    #[error("no submissions to sample from")]
    NoSubmissions,
    #[error("workers per document and repetitions must both be at least 1")]
    InvalidArgument,
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

/// How the voting threshold is picked inside one repetition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// One threshold for the whole sampled corpus.
    #[default]
    Global,
    /// Each document keeps the threshold that maximises its own F.
    PerDocument,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyEstimate {
    pub n: usize,
    pub repetitions: usize,
    pub max_f_values: Vec<f64>,
    pub mean_max_f: f64,
    pub stddev_max_f: f64,
    pub best_k_per_rep: Vec<usize>,
}

impl RedundancyEstimate {
    pub const HEADER: &'static str = "n\tmean_max_f\tstddev_max_f\tbest_k_mode";

    /// Most frequent best threshold; the smallest wins ties.
    pub fn best_k_mode(&self) -> usize {
        mode(&self.best_k_per_rep)
    }

    pub fn to_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{}",
            self.n,
            self.mean_max_f,
            self.stddev_max_f,
            self.best_k_mode()
        )
    }
}

fn mode(values: &[usize]) -> usize {
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for v in values {
        *freq.entry(*v).or_default() += 1;
    }
    // BTreeMap iterates ascending, and max_by_key keeps the last maximum,
    // so walk in reverse to let the smallest value win.
    freq.into_iter()
        .rev()
        .max_by_key(|(_, count)| *count)
        .map(|(v, _)| v)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RedundancyOptions {
    pub sweep: SweepOptions,
    pub mode: ThresholdMode,
}

impl Default for RedundancyOptions {
    fn default() -> Self {
        Self { sweep: SweepOptions::default(), mode: ThresholdMode::Global }
    }
}

/// Submissions per document, sorted by worker id so sampling does not
/// depend on input order.
struct Pools<'a> {
    docs: Vec<&'a str>,
    by_doc: BTreeMap<&'a str, Vec<&'a Submission>>,
}

impl<'a> Pools<'a> {
    fn new(gold: &'a GoldCorpus, submissions: &'a [Submission], options: SweepOptions) -> Self {
        let docs = sweep_documents(gold, submissions, options);
        let mut by_doc = by_document(submissions);
        for subs in by_doc.values_mut() {
            subs.sort_by(|a, b| a.worker_id.cmp(&b.worker_id));
        }
        Pools { docs, by_doc }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> BTreeMap<&'a str, Vec<&'a Submission>> {
        self.docs
            .iter()
            .filter_map(|id| self.by_doc.get(id).map(|subs| (*id, subs)))
            .map(|(id, subs)| {
                if subs.len() <= n {
                    (id, subs.clone())
                } else {
                    let mut pool = subs.clone();
                    let (chosen, _) = pool.partial_shuffle(rng, n);
                    (id, chosen.to_vec())
                }
            })
            .collect()
    }
}

fn repetition_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// Best F and its threshold for one sampled corpus.
fn best_of_sample(hists: &[VoteHistogram], n: usize, mode: ThresholdMode) -> (f64, usize) {
    match mode {
        ThresholdMode::Global => {
            let mut acc = vec![Counts::default(); n];
            for h in hists {
                h.accumulate(&mut acc);
            }
            let points: Vec<SweepPoint> = acc
                .into_iter()
                .enumerate()
                .map(|(i, c)| SweepPoint { k: i + 1, metrics: c.into() })
                .collect();
            let best = best_point(&points).expect("n >= 1");
            (best.metrics.f1, best.k)
        }
        ThresholdMode::PerDocument => {
            let mut pooled = Counts::default();
            let mut chosen = Vec::with_capacity(hists.len());
            for h in hists {
                let mut acc = vec![Counts::default(); n];
                h.accumulate(&mut acc);
                let (k, counts) = acc
                    .iter()
                    .enumerate()
                    .fold((1, acc[0]), |(bk, bc), (i, c)| {
                        if Metrics::from(*c).f1 > Metrics::from(bc).f1 {
                            (i + 1, *c)
                        } else {
                            (bk, bc)
                        }
                    });
                pooled += counts;
                chosen.push(k);
            }
            (Metrics::from(pooled).f1, mode_or_one(&chosen))
        }
    }
}

fn mode_or_one(values: &[usize]) -> usize {
    if values.is_empty() {
        1
    } else {
        mode(values)
    }
}

pub fn estimate_redundancy(
    submissions: &[Submission],
    gold: &GoldCorpus,
    n: usize,
    repetitions: usize,
    seed: u64,
) -> Result<RedundancyEstimate, RedundancyError> {
    estimate_redundancy_with(submissions, gold, n, repetitions, seed, RedundancyOptions::default())
}

pub fn estimate_redundancy_with(
    submissions: &[Submission],
    gold: &GoldCorpus,
    n: usize,
    repetitions: usize,
    seed: u64,
    options: RedundancyOptions,
) -> Result<RedundancyEstimate, RedundancyError> {
    let pools = prepare(submissions, gold, n, repetitions, options)?;
    estimate_from_pools(&pools, gold, n, repetitions, seed, options.mode)
}

fn prepare<'a>(
    submissions: &'a [Submission],
    gold: &'a GoldCorpus,
    n: usize,
    repetitions: usize,
    options: RedundancyOptions,
) -> Result<Pools<'a>, RedundancyError> {
    if n == 0 || repetitions == 0 {
        return Err(RedundancyError::InvalidArgument);
    }
    if submissions.is_empty() {
        return Err(RedundancyError::NoSubmissions);
    }
    check_known(gold, submissions)?;
    Ok(Pools::new(gold, submissions, options.sweep))
}

fn estimate_from_pools(
    pools: &Pools<'_>,
    gold: &GoldCorpus,
    n: usize,
    repetitions: usize,
    seed: u64,
    mode: ThresholdMode,
) -> Result<RedundancyEstimate, RedundancyError> {
    let results: Vec<(f64, usize)> = (0..repetitions)
        .into_par_iter()
        .map(|rep| {
            let mut rng = repetition_rng(seed, rep);
            let sampled = pools.sample(n, &mut rng);
            let hists = histograms(gold, &sampled, &pools.docs)?;
            Ok(best_of_sample(&hists, n, mode))
        })
        .collect::<Result<_, AggregateError>>()?;

    let max_f_values: Vec<f64> = results.iter().map(|r| r.0).collect();
    let best_k_per_rep = results.iter().map(|r| r.1).collect();
    let (mean_max_f, stddev_max_f) = mean_and_population_stddev(&max_f_values);
    Ok(RedundancyEstimate {
        n,
        repetitions,
        max_f_values,
        mean_max_f,
        stddev_max_f,
        best_k_per_rep,
    })
}

/// Estimates for every `n` in `1..=n_max`.
pub fn redundancy_curve(
    submissions: &[Submission],
    gold: &GoldCorpus,
    n_max: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<RedundancyEstimate>, RedundancyError> {
    redundancy_curve_with(submissions, gold, n_max, repetitions, seed, RedundancyOptions::default())
}

pub fn redundancy_curve_with(
    submissions: &[Submission],
    gold: &GoldCorpus,
    n_max: usize,
    repetitions: usize,
    seed: u64,
    options: RedundancyOptions,
) -> Result<Vec<RedundancyEstimate>, RedundancyError> {
    let pools = prepare(submissions, gold, n_max, repetitions, options)?;
    (1..=n_max)
        .map(|n| estimate_from_pools(&pools, gold, n, repetitions, seed, options.mode))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::sweep_k;
    use crate::corpus::{DocContext, Document, Extent};
    use crate::scoring::{evaluate_corpus, Hypothesis};

    fn corpus() -> GoldCorpus {
        let mut corpus = GoldCorpus::new();
        for d in 0..4 {
            let doc = Document::new(format!("d{d}"), "alpha beta gamma", "delta epsilon zeta eta theta");
            let gold = vec![doc.span(Extent::new(0, 5)).unwrap(), doc.span(Extent::new(17, 22)).unwrap()];
            corpus.insert(doc, gold).unwrap();
        }
        corpus
    }

    // 5 workers per doc with varied quality
    fn submissions() -> Vec<Submission> {
        let choices: [&[(usize, usize)]; 5] = [
            &[(0, 5), (17, 22)],
            &[(0, 5)],
            &[(0, 5), (6, 10)],
            &[(17, 22), (23, 30)],
            &[(6, 10)],
        ];
        let mut subs = Vec::new();
        for d in 0..4 {
            for (w, spans) in choices.iter().enumerate() {
                let rot = (w + d) % 5;
                subs.push(Submission {
                    worker_id: format!("w{rot}"),
                    doc_id: format!("d{d}"),
                    spans: spans.iter().map(|&(s, e)| Extent::new(s, e)).collect(),
                    submitted_at: 0,
                    context: DocContext::Regular,
                });
            }
        }
        subs
    }

    #[test]
    fn full_redundancy_is_degenerate() {
        let (subs, gold) = (submissions(), corpus());
        let est = estimate_redundancy(&subs, &gold, 5, 7, 11).unwrap();
        let sweep = sweep_k(&subs, &gold, 5, SweepOptions::default()).unwrap();
        let best = best_point(&sweep).unwrap();
        assert_eq!(est.stddev_max_f, 0.0);
        assert_eq!(est.mean_max_f, best.metrics.f1);
        assert!(est.best_k_per_rep.iter().all(|&k| k == best.k));
        // asking for more workers than exist behaves the same
        let est = estimate_redundancy(&subs, &gold, 9, 3, 11).unwrap();
        assert_eq!(est.mean_max_f, best.metrics.f1);
    }

    #[test]
    fn single_worker_is_one_random_annotator_per_doc() {
        let (subs, gold) = (submissions(), corpus());
        let est = estimate_redundancy(&subs, &gold, 1, 1, 3).unwrap();
        // reproduce the draw independently
        let mut rng = repetition_rng(3, 0);
        let pools = Pools::new(&gold, &subs, SweepOptions::default());
        let sampled = pools.sample(1, &mut rng);
        let hyp: Hypothesis = sampled
            .iter()
            .map(|(id, s)| (id.to_string(), s[0].spans.clone()))
            .collect();
        assert_eq!(est.max_f_values[0], evaluate_corpus(&gold, &hyp).unwrap().f1);
        assert_eq!(est.best_k_per_rep, vec![1]);
    }

    #[test]
    fn perfect_clones_score_one_everywhere() {
        let gold = corpus();
        let subs: Vec<Submission> = (0..4)
            .flat_map(|d| {
                let gold = &gold;
                (0..6).map(move |w| Submission {
                    worker_id: format!("w{w}"),
                    doc_id: format!("d{d}"),
                    spans: gold.gold_extents(&format!("d{d}")),
                    submitted_at: 0,
                    context: DocContext::Regular,
                })
            })
            .collect();
        for est in redundancy_curve(&subs, &gold, 6, 4, 1).unwrap() {
            assert_eq!(est.mean_max_f, 1.0);
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let (subs, gold) = (submissions(), corpus());
        let a = redundancy_curve(&subs, &gold, 5, 10, 42).unwrap();
        let mut shuffled = subs.clone();
        shuffled.reverse();
        let b = redundancy_curve(&shuffled, &gold, 5, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|e| e.max_f_values.len() == 10));
        assert!(a.iter().all(|e| e.best_k_per_rep.iter().all(|&k| k >= 1 && k <= e.n)));
    }

    #[test]
    fn per_document_mode_on_one_document_equals_global() {
        let gold = corpus();
        let subs: Vec<Submission> = submissions().into_iter().filter(|s| s.doc_id == "d0").collect();
        let mut single = gold.clone();
        for d in 1..4 {
            single.documents.remove(&format!("d{d}"));
            single.gold.remove(&format!("d{d}"));
            single.partition.remove(&format!("d{d}"));
        }
        let options = RedundancyOptions { mode: ThresholdMode::PerDocument, ..Default::default() };
        let per_doc = estimate_redundancy_with(&subs, &single, 3, 5, 9, options).unwrap();
        let global = estimate_redundancy(&subs, &single, 3, 5, 9).unwrap();
        assert_eq!(per_doc, global);
    }

    #[test]
    fn argument_errors() {
        let gold = corpus();
        assert_eq!(estimate_redundancy(&[], &gold, 1, 1, 0).unwrap_err(), RedundancyError::NoSubmissions);
        assert_eq!(
            estimate_redundancy(&submissions(), &gold, 0, 1, 0).unwrap_err(),
            RedundancyError::InvalidArgument
        );
        assert_eq!(redundancy_curve(&submissions(), &gold, 1, 2, 0).unwrap().len(), 1);
    }

    #[test]
    fn mode_prefers_smallest_on_ties() {
        assert_eq!(mode(&[3, 2, 3, 2]), 2);
        assert_eq!(mode(&[5, 5, 1]), 5);
    }
}
