//! Strict span matching and micro-averaged precision, recall and F.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::Submission;
use crate::corpus::{Extent, GoldCorpus, Span};

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("spans from documents {0} and {1} cannot be matched together")]
    MixedDocuments(String, String),
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("worker {worker_id} submitted document {doc_id} more than once")]
    DuplicateSubmission { worker_id: String, doc_id: String },
    #[error("submission by {found} passed in a report for {expected}")]
    ForeignSubmission { expected: String, found: String },
}

/// Per-document hypothesis: span extents keyed by document id.
pub type Hypothesis = BTreeMap<String, BTreeSet<Extent>>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub true_positives: Vec<Span>,
    pub false_positives: Vec<Span>,
    pub false_negatives: Vec<Span>,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.true_positives.len(),
            fp: self.false_positives.len(),
            fn_: self.false_negatives.len(),
        }
    }
}

/// Raw match counts. Addition pools them (micro-averaging).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Add for Counts {
    type Output = Counts;

    fn add(self, rhs: Counts) -> Counts {
        Counts {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, rhs: Counts) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), Add::add)
    }
}

/// Counts with derived precision, recall and F. Zero denominators give 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub const HEADER: &'static str = "tp\tfp\tfn\tprecision\trecall\tf1";

    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp, fp: self.fp, fn_: self.fn_ }
    }

    /// Tab-delimited record matching [`Metrics::HEADER`], six decimals.
    pub fn to_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tp={} fp={} fn={} precision={:.6} recall={:.6} f1={:.6}",
            self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1
        )
    }
}

impl From<Counts> for Metrics {
    fn from(c: Counts) -> Self {
        score(c.tp, c.fp, c.fn_)
    }
}

pub fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn harmonic_mean(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn score(tp: usize, fp: usize, fn_: usize) -> Metrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Metrics {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
    }
}

/// Exact `(start, end)` matching. Labels are ignored and duplicate spans collapse.
pub fn match_strict(gold: &[Span], hypothesis: &[Span]) -> Result<MatchResult, ScoringError> {
    let mut doc: Option<&str> = None;
    for span in gold.iter().chain(hypothesis) {
        match doc {
            None => doc = Some(&span.doc_id),
            Some(d) if d != span.doc_id => {
                return Err(ScoringError::MixedDocuments(d.to_string(), span.doc_id.clone()))
            }
            _ => {}
        }
    }

    let gold_extents: BTreeSet<Extent> = gold.iter().map(Span::extent).collect();
    let hyp_extents: BTreeSet<Extent> = hypothesis.iter().map(Span::extent).collect();
    let mut result = MatchResult::default();
    let mut seen = BTreeSet::new();
    for span in hypothesis {
        if !seen.insert(span.extent()) {
            continue;
        }
        if gold_extents.contains(&span.extent()) {
            result.true_positives.push(span.clone());
        } else {
            result.false_positives.push(span.clone());
        }
    }
    let mut seen = BTreeSet::new();
    for span in gold {
        if seen.insert(span.extent()) && !hyp_extents.contains(&span.extent()) {
            result.false_negatives.push(span.clone());
        }
    }
    Ok(result)
}

/// Count-only strict matching over extent sets of one document.
pub fn count_matches(gold: &BTreeSet<Extent>, hypothesis: &BTreeSet<Extent>) -> Counts {
    let tp = hypothesis.intersection(gold).count();
    Counts {
        tp,
        fp: hypothesis.len() - tp,
        fn_: gold.len() - tp,
    }
}

/// Pools counts over every document of the corpus, then scores once.
/// Documents missing from `hypothesis` contribute their gold spans as misses.
pub fn evaluate_corpus(gold: &GoldCorpus, hypothesis: &Hypothesis) -> Result<Metrics, ScoringError> {
    evaluate_documents(gold, hypothesis, gold.documents.keys().map(String::as_str))
}

/// Like [`evaluate_corpus`] but restricted to the listed documents.
/// Hypothesis entries outside the list are ignored.
pub fn evaluate_documents<'a>(
    gold: &GoldCorpus,
    hypothesis: &Hypothesis,
    docs: impl IntoIterator<Item = &'a str>,
) -> Result<Metrics, ScoringError> {
    if let Some(unknown) = hypothesis.keys().find(|id| !gold.documents.contains_key(*id)) {
        return Err(ScoringError::UnknownDocument(unknown.clone()));
    }
    let empty = BTreeSet::new();
    let counts: Counts = docs
        .into_iter()
        .map(|id| count_matches(&gold.gold_extents(id), hypothesis.get(id).unwrap_or(&empty)))
        .sum();
    Ok(counts.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker_id: String,
    pub documents_completed: usize,
    pub mean_f: f64,
    pub stddev_f: f64,
    pub per_document_f: BTreeMap<String, f64>,
}

/// Per-document F for one worker, with population mean and standard deviation.
pub fn worker_report(
    worker_id: &str,
    submissions: &[&Submission],
    gold: &GoldCorpus,
) -> Result<WorkerReport, ScoringError> {
    let mut per_document_f = BTreeMap::new();
    for sub in submissions {
        if sub.worker_id != worker_id {
            return Err(ScoringError::ForeignSubmission {
                expected: worker_id.to_string(),
                found: sub.worker_id.clone(),
            });
        }
        if !gold.documents.contains_key(&sub.doc_id) {
            return Err(ScoringError::UnknownDocument(sub.doc_id.clone()));
        }
        let f = Metrics::from(count_matches(&gold.gold_extents(&sub.doc_id), &sub.spans)).f1;
        if per_document_f.insert(sub.doc_id.clone(), f).is_some() {
            return Err(ScoringError::DuplicateSubmission {
                worker_id: worker_id.to_string(),
                doc_id: sub.doc_id.clone(),
            });
        }
    }
    let values: Vec<f64> = per_document_f.values().copied().collect();
    let (mean_f, stddev_f) = mean_and_population_stddev(&values);
    Ok(WorkerReport {
        worker_id: worker_id.to_string(),
        documents_completed: values.len(),
        mean_f,
        stddev_f,
        per_document_f,
    })
}

/// Reports for every worker found in `submissions`, ordered by worker id.
pub fn worker_reports(submissions: &[Submission], gold: &GoldCorpus) -> Result<Vec<WorkerReport>, ScoringError> {
    let mut by_worker: BTreeMap<&str, Vec<&Submission>> = BTreeMap::new();
    for sub in submissions {
        by_worker.entry(&sub.worker_id).or_default().push(sub);
    }
    by_worker
        .into_iter()
        .map(|(worker, subs)| worker_report(worker, &subs, gold))
        .collect()
}

/// Mean and population standard deviation; `(0, 0)` for no values.
///
/// Computed on deviations from the first value, so a constant sample gives
/// back that exact value and a stddev of exactly zero.
pub fn mean_and_population_stddev(values: &[f64]) -> (f64, f64) {
    let Some(&pivot) = values.first() else {
        return (0.0, 0.0);
    };
    let n = values.len() as f64;
    let shift = values.iter().map(|v| v - pivot).sum::<f64>() / n;
    let var = values.iter().map(|v| (v - pivot - shift).powi(2)).sum::<f64>() / n;
    (pivot + shift, var.sqrt())
}
