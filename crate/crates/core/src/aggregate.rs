//! Threshold voting over redundant submissions, and the precision/recall
//! sweep across every voting threshold.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DocContext, Extent, GoldCorpus};
use crate::scoring::{Counts, Hypothesis, Metrics, ScoringError};

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("worker {worker_id} appears twice in the tally for {doc_id}")]
    DuplicateWorker { worker_id: String, doc_id: String },
    #[error("submission for {found} passed to the tally for {expected}")]
    MixedDocuments { expected: String, found: String },
    #[error("voting threshold must be at least 1")]
    ZeroThreshold,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// One worker's complete span set for one document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub worker_id: String,
    pub doc_id: String,
    pub spans: BTreeSet<Extent>,
    /// Milliseconds since the Unix epoch (logical time for simulated runs).
    pub submitted_at: u64,
    pub context: DocContext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    pub doc_id: String,
    pub votes: BTreeMap<Extent, usize>,
    pub annotator_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl SweepPoint {
    pub const HEADER: &'static str = "k\ttp\tfp\tfn\tprecision\trecall\tf1";

    pub fn to_row(&self) -> String {
        format!("{}\t{}", self.k, self.metrics.to_row())
    }
}

/// Which documents enter a sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepOptions {
    /// Training documents are seen by every worker, so they are left out unless asked for.
    pub include_training: bool,
}

pub fn tally_votes(doc_id: &str, submissions: &[&Submission]) -> Result<VoteTally, AggregateError> {
    let mut workers = BTreeSet::new();
    let mut votes: BTreeMap<Extent, usize> = BTreeMap::new();
    for sub in submissions {
        if sub.doc_id != doc_id {
            return Err(AggregateError::MixedDocuments {
                expected: doc_id.to_string(),
                found: sub.doc_id.clone(),
            });
        }
        if !workers.insert(sub.worker_id.as_str()) {
            return Err(AggregateError::DuplicateWorker {
                worker_id: sub.worker_id.clone(),
                doc_id: doc_id.to_string(),
            });
        }
        for extent in &sub.spans {
            *votes.entry(*extent).or_default() += 1;
        }
    }
    Ok(VoteTally {
        doc_id: doc_id.to_string(),
        votes,
        annotator_count: workers.len(),
    })
}

/// Spans with at least `k` votes.
pub fn apply_threshold(tally: &VoteTally, k: usize) -> BTreeSet<Extent> {
    tally
        .votes
        .iter()
        .filter(|(_, &count)| count >= k)
        .map(|(extent, _)| *extent)
        .collect()
}

/// Groups submissions by document id.
pub fn by_document(submissions: &[Submission]) -> BTreeMap<&str, Vec<&Submission>> {
    let mut grouped: BTreeMap<&str, Vec<&Submission>> = BTreeMap::new();
    for sub in submissions {
        grouped.entry(sub.doc_id.as_str()).or_default().push(sub);
    }
    grouped
}

/// Documents scored by a sweep: the whole corpus, minus training documents
/// unless `include_training`. A document counts as training when the corpus
/// says so or when any submission for it was made in training context.
pub fn sweep_documents<'a>(
    gold: &'a GoldCorpus,
    submissions: &[Submission],
    options: SweepOptions,
) -> Vec<&'a str> {
    let training_by_context: BTreeSet<&str> = submissions
        .iter()
        .filter(|s| s.context == DocContext::Training)
        .map(|s| s.doc_id.as_str())
        .collect();
    gold.documents
        .keys()
        .map(String::as_str)
        .filter(|id| {
            options.include_training
                || (gold.context(id) != Some(DocContext::Training) && !training_by_context.contains(id))
        })
        .collect()
}

/// Per-vote-count histogram of one document: how many kept spans at each
/// vote count are correct and how many are not.
#[derive(Debug, Clone, Default)]
pub(crate) struct VoteHistogram {
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
    pub gold: usize,
}

impl VoteHistogram {
    pub fn new(tally: &VoteTally, gold: &BTreeSet<Extent>) -> Self {
        let mut hist = VoteHistogram {
            correct: vec![0; tally.annotator_count + 1],
            incorrect: vec![0; tally.annotator_count + 1],
            gold: gold.len(),
        };
        for (extent, &count) in &tally.votes {
            if gold.contains(extent) {
                hist.correct[count] += 1;
            } else {
                hist.incorrect[count] += 1;
            }
        }
        hist
    }

    pub fn empty(gold: usize) -> Self {
        VoteHistogram { correct: vec![0], incorrect: vec![0], gold }
    }

    /// Adds this document's counts at every k in `1..=k_max` into `acc[k-1]`.
    pub fn accumulate(&self, acc: &mut [Counts]) {
        let top = self.correct.len() - 1;
        let above = acc.len() + 1;
        let mut tp: usize = self.correct.iter().skip(above).sum();
        let mut fp: usize = self.incorrect.iter().skip(above).sum();
        // suffix sums from the highest vote count down
        for k in (1..=acc.len()).rev() {
            if k <= top {
                tp += self.correct[k];
                fp += self.incorrect[k];
            }
            acc[k - 1] += Counts { tp, fp, fn_: self.gold - tp };
        }
    }

    #[cfg(test)]
    pub fn counts_at(&self, k: usize) -> Counts {
        let top = self.correct.len() - 1;
        let tp: usize = (k..=top).map(|c| self.correct[c]).sum();
        let fp: usize = (k..=top).map(|c| self.incorrect[c]).sum();
        Counts { tp, fp, fn_: self.gold - tp }
    }
}

pub(crate) fn histograms(
    gold: &GoldCorpus,
    grouped: &BTreeMap<&str, Vec<&Submission>>,
    docs: &[&str],
) -> Result<Vec<VoteHistogram>, AggregateError> {
    docs.iter()
        .map(|id| {
            let gold_set = gold.gold_extents(id);
            match grouped.get(id) {
                Some(subs) => Ok(VoteHistogram::new(&tally_votes(id, subs)?, &gold_set)),
                None => Ok(VoteHistogram::empty(gold_set.len())),
            }
        })
        .collect()
}

pub(crate) fn check_known(gold: &GoldCorpus, submissions: &[Submission]) -> Result<(), AggregateError> {
    match submissions.iter().find(|s| !gold.documents.contains_key(&s.doc_id)) {
        Some(s) => Err(ScoringError::UnknownDocument(s.doc_id.clone()).into()),
        None => Ok(()),
    }
}

/// Precision, recall and F of the voted corpus at every threshold `1..=k_max`.
pub fn sweep_k(
    submissions: &[Submission],
    gold: &GoldCorpus,
    k_max: usize,
    options: SweepOptions,
) -> Result<Vec<SweepPoint>, AggregateError> {
    if k_max == 0 {
        return Err(AggregateError::ZeroThreshold);
    }
    check_known(gold, submissions)?;
    let docs = sweep_documents(gold, submissions, options);
    let grouped = by_document(submissions);
    let mut acc = vec![Counts::default(); k_max];
    for hist in histograms(gold, &grouped, &docs)? {
        hist.accumulate(&mut acc);
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(i, counts)| SweepPoint { k: i + 1, metrics: counts.into() })
        .collect())
}

/// The voted hypothesis at threshold `k` for every document with submissions.
pub fn aggregate_at(submissions: &[Submission], k: usize) -> Result<Hypothesis, AggregateError> {
    if k == 0 {
        return Err(AggregateError::ZeroThreshold);
    }
    by_document(submissions)
        .into_iter()
        .map(|(id, subs)| Ok((id.to_string(), apply_threshold(&tally_votes(id, &subs)?, k))))
        .collect()
}

/// The point with the highest F; the smallest k wins ties.
pub fn best_point(points: &[SweepPoint]) -> Option<SweepPoint> {
    points
        .iter()
        .copied()
        .fold(None, |best: Option<SweepPoint>, p| match best {
            Some(b) if b.metrics.f1 >= p.metrics.f1 => Some(b),
            _ => Some(p),
        })
}
