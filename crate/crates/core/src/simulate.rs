//! Synthetic annotators and campaigns.
//!
//! Each simulated worker has an error profile: a chance of missing each gold
//! mention, a chance of shifting a mention boundary by one token, and a rate of
//! spurious mentions per hundred tokens. Errors are independent given the
//! profile. A campaign drives the real lifecycle with these workers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution as _, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::Submission;
use crate::corpus::{DocContext, Document, Extent, GoldCorpus, PartitionConfig};
use crate::lifecycle::{LifecycleConfig, LifecycleError, SurveyResponse, WorkerState};
use crate::service::{logical_clock, Service, ServiceError};
use crate::store::{EventStore, MemoryStore};

const SPURIOUS_RETRIES: usize = 20;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid distribution for {field}: {reason}")]
    InvalidDistribution { field: &'static str, reason: String },
    #[error("at least one worker is required")]
    NoWorkers,
    #[error("redundancy must be at least 1")]
    ZeroRedundancy,
    #[error(transparent)]
    Service(#[from] ServiceError),
}

impl From<LifecycleError> for SimError {
    fn from(e: LifecycleError) -> Self {
        SimError::Service(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorkerProfile {
    pub worker_id: String,
    pub p_miss: f64,
    /// Expected spurious spans per 100 tokens.
    pub p_spurious: f64,
    pub p_boundary: f64,
    pub ability_seed: u64,
}

impl SimWorkerProfile {
    pub fn perfect(worker_id: impl Into<String>, ability_seed: u64) -> Self {
        Self {
            worker_id: worker_id.into(),
            p_miss: 0.0,
            p_spurious: 0.0,
            p_boundary: 0.0,
            ability_seed,
        }
    }
}

/// A parametric distribution over one profile field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParamDistribution {
    Point { value: f64 },
    Uniform { low: f64, high: f64 },
    Beta { alpha: f64, beta: f64 },
    Gamma { shape: f64, scale: f64 },
}

impl ParamDistribution {
    fn check(&self, field: &'static str, probability: bool) -> Result<(), SimError> {
        let bad = |reason: String| Err(SimError::InvalidDistribution { field, reason });
        let in_range = |v: f64| v.is_finite() && v >= 0.0 && (!probability || v <= 1.0);
        match *self {
            ParamDistribution::Point { value } if !in_range(value) => bad(format!("value {value} out of range")),
            ParamDistribution::Uniform { low, high } if !(in_range(low) && in_range(high) && low <= high) => {
                bad(format!("bounds [{low}, {high}] invalid"))
            }
            ParamDistribution::Beta { alpha, beta } if !(alpha > 0.0 && beta > 0.0) => {
                bad(format!("shape parameters ({alpha}, {beta}) must be positive"))
            }
            ParamDistribution::Gamma { .. } if probability => bad("unbounded distribution for a probability".into()),
            ParamDistribution::Gamma { shape, scale } if !(shape > 0.0 && scale > 0.0) => {
                bad(format!("shape {shape} and scale {scale} must be positive"))
            }
            _ => Ok(()),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ParamDistribution::Point { value } => value,
            ParamDistribution::Uniform { low, high } if low == high => low,
            ParamDistribution::Uniform { low, high } => rng.random_range(low..=high),
            ParamDistribution::Beta { alpha, beta } => Beta::new(alpha, beta).expect("checked").sample(rng),
            ParamDistribution::Gamma { shape, scale } => Gamma::new(shape, scale).expect("checked").sample(rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub n_workers: usize,
    pub miss_distribution: ParamDistribution,
    pub spurious_distribution: ParamDistribution,
    pub boundary_distribution: ParamDistribution,
    /// Workers whose miss rate exceeds this fail the qualification quiz.
    #[serde(default)]
    pub quiz_fail_above_miss: Option<f64>,
    /// Profiles added verbatim after the sampled ones.
    #[serde(default)]
    pub extra_profiles: Vec<SimWorkerProfile>,
}

impl PopulationParams {
    /// Every worker annotates exactly like the gold standard.
    pub fn perfect(n_workers: usize) -> Self {
        let zero = ParamDistribution::Point { value: 0.0 };
        Self {
            n_workers,
            miss_distribution: zero,
            spurious_distribution: zero,
            boundary_distribution: zero,
            quiz_fail_above_miss: None,
            extra_profiles: vec![],
        }
    }

    /// A mixed crowd whose mean per-worker F is about 0.76 on
    /// [`synthetic_corpus`] documents.
    pub fn heterogeneous(n_workers: usize) -> Self {
        Self {
            n_workers,
            miss_distribution: ParamDistribution::Beta { alpha: 2.0, beta: 12.0 },
            spurious_distribution: ParamDistribution::Gamma { shape: 2.0, scale: 0.35 },
            boundary_distribution: ParamDistribution::Beta { alpha: 2.0, beta: 18.0 },
            quiz_fail_above_miss: Some(0.8),
            extra_profiles: vec![],
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n_workers == 0 && self.extra_profiles.is_empty() {
            return Err(SimError::NoWorkers);
        }
        self.miss_distribution.check("miss_distribution", true)?;
        self.spurious_distribution.check("spurious_distribution", false)?;
        self.boundary_distribution.check("boundary_distribution", true)?;
        for p in &self.extra_profiles {
            for (field, v, prob) in [
                ("p_miss", p.p_miss, true),
                ("p_spurious", p.p_spurious, false),
                ("p_boundary", p.p_boundary, true),
            ] {
                ParamDistribution::Point { value: v }.check(field, prob)?;
            }
        }
        Ok(())
    }

    fn passes_quiz(&self, profile: &SimWorkerProfile) -> bool {
        self.quiz_fail_above_miss.is_none_or(|cut| profile.p_miss <= cut)
    }
}

/// Draws `n_workers` independent profiles; extra profiles are appended.
pub fn sample_population(params: &PopulationParams, seed: u64) -> Result<Vec<SimWorkerProfile>, SimError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut profiles: Vec<SimWorkerProfile> = (0..params.n_workers)
        .map(|i| SimWorkerProfile {
            worker_id: format!("sim-{:04}", i + 1),
            p_miss: params.miss_distribution.sample(&mut rng).clamp(0.0, 1.0),
            p_spurious: params.spurious_distribution.sample(&mut rng).max(0.0),
            p_boundary: params.boundary_distribution.sample(&mut rng).clamp(0.0, 1.0),
            ability_seed: rng.random(),
        })
        .collect();
    profiles.extend(params.extra_profiles.iter().cloned());
    Ok(profiles)
}

/// One simulated worker's span set for `doc`. The result never overlaps.
pub fn simulate_annotation(
    profile: &SimWorkerProfile,
    doc: &Document,
    gold: &BTreeSet<Extent>,
    rng: &mut impl Rng,
) -> BTreeSet<Extent> {
    let tokens = &doc.token_boundaries;
    let mut kept: Vec<Extent> = Vec::new();
    for extent in gold {
        if rng.random_bool(profile.p_miss) {
            continue;
        }
        let produced = if rng.random_bool(profile.p_boundary) {
            perturb(doc, *extent, rng)
        } else {
            *extent
        };
        if !kept.iter().any(|k| k.overlaps(&produced)) {
            kept.push(produced);
        }
    }

    let rate = profile.p_spurious * tokens.len() as f64 / 100.0;
    if rate > 0.0 && !tokens.is_empty() {
        let count = Poisson::new(rate).expect("positive rate").sample(rng) as usize;
        for _ in 0..count {
            for _ in 0..SPURIOUS_RETRIES {
                let len = rng.random_range(1..=3usize);
                let first = rng.random_range(0..tokens.len());
                let last = (first + len - 1).min(tokens.len() - 1);
                let candidate = Extent::new(tokens[first].start, tokens[last].end);
                if gold.iter().chain(&kept).all(|e| !e.overlaps(&candidate)) {
                    kept.push(candidate);
                    break;
                }
            }
        }
    }
    kept.into_iter().collect()
}

/// Moves the start or the end of `extent` by one token in either direction,
/// clamped to the document. Returns `extent` unchanged if the move would
/// empty it.
fn perturb(doc: &Document, extent: Extent, rng: &mut impl Rng) -> Extent {
    let tokens = &doc.token_boundaries;
    if tokens.is_empty() {
        return extent;
    }
    let last = tokens.len() as isize - 1;
    let step: isize = if rng.random_bool(0.5) { -1 } else { 1 };
    let moved = if rng.random_bool(0.5) {
        let first = doc.token_at_or_after(extent.start) as isize;
        let i = (first + step).clamp(0, last) as usize;
        Extent::new(tokens[i].start, extent.end)
    } else {
        let Some(end_tok) = doc.token_before(extent.end) else {
            return extent;
        };
        let i = (end_tok as isize + step).clamp(0, last) as usize;
        Extent::new(extent.start, tokens[i].end)
    };
    if moved.is_empty() {
        extent
    } else {
        moved
    }
}

/// Shape of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub training_docs: usize,
    pub gold_feedback_docs: usize,
    pub regular_docs: usize,
    pub tokens_per_doc: usize,
    pub mentions_per_doc: usize,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            training_docs: 4,
            gold_feedback_docs: 2,
            regular_docs: 18,
            tokens_per_doc: 200,
            mentions_per_doc: 8,
        }
    }
}

const WORDS: &[&str] = &[
    "patients", "with", "the", "of", "and", "gene", "mutation", "was", "in", "a", "risk", "study", "family",
    "clinical", "analysis", "protein", "expression", "cells", "were", "found", "associated", "to", "for",
    "cases", "allele", "linkage", "region", "chromosome", "onset", "type", "(", ")", ",", ".",
];
const DISEASE_WORDS: &[&str] = &[
    "cancer", "syndrome", "dystrophy", "deficiency", "disease", "ataxia", "tumor", "fever", "amyloidosis",
    "anemia", "carcinoma", "dysplasia", "neuropathy", "arthritis",
];

/// Generates whitespace-tokenized documents with non-overlapping gold
/// mentions of one to three tokens, already partitioned.
pub fn synthetic_corpus(spec: SyntheticCorpusSpec, seed: u64) -> GoldCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let total = spec.training_docs + spec.gold_feedback_docs + spec.regular_docs;
    let tokens = spec.tokens_per_doc.max(2);
    let mut corpus = GoldCorpus::new();
    let mut ids = Vec::with_capacity(total);
    for d in 0..total {
        let doc_id = format!("{}", 10_000_000 + d);
        // one slot every tokens/mentions positions keeps mentions apart
        let slots = spec.mentions_per_doc.min(tokens / 4);
        let mut mention_at: BTreeMap<usize, usize> = BTreeMap::new();
        if let Some(width) = tokens.checked_div(slots) {
            for s in 0..slots {
                let len = rng.random_range(1..=3usize).min(width - 1);
                let start = s * width + rng.random_range(0..=(width - 1 - len));
                mention_at.insert(start, len);
            }
        }
        let mut words: Vec<String> = Vec::with_capacity(tokens);
        let mut mention_tokens: Vec<(usize, usize)> = Vec::new();
        let mut i = 0;
        while i < tokens {
            if let Some(&len) = mention_at.get(&i) {
                for j in 0..len {
                    let pool = if j + 1 == len { DISEASE_WORDS } else { WORDS };
                    words.push(pool[rng.random_range(0..pool.len())].to_string());
                }
                mention_tokens.push((i, i + len - 1));
                i += len;
            } else {
                words.push(WORDS[rng.random_range(0..WORDS.len())].to_string());
                i += 1;
            }
        }
        let split = (tokens / 10).max(1);
        let title = words[..split].join(" ");
        let body = words[split..].join(" ");
        let doc = Document::new(doc_id.clone(), title, body);
        let spans = mention_tokens
            .iter()
            .map(|&(a, b)| {
                let extent = Extent::new(doc.token_boundaries[a].start, doc.token_boundaries[b].end);
                let mut span = doc.span(extent).expect("token-aligned");
                span.label = Some("Disease".into());
                span
            })
            .collect();
        corpus.insert(doc, spans).expect("generated mentions never overlap");
        ids.push(doc_id);
    }
    let partition = PartitionConfig {
        training_ids: Some(ids[..spec.training_docs].to_vec()),
        gold_feedback_ids: Some(ids[spec.training_docs..spec.training_docs + spec.gold_feedback_docs].to_vec()),
        ..Default::default()
    };
    corpus.apply_partition(&partition).expect("ids come from the corpus");
    corpus
}

const GENDERS: &[&str] = &["female", "male"];
const AGES: &[&str] = &["18-20", "21-35", "36-45", "46+"];
const OCCUPATIONS: &[&str] = &["student", "technical", "science", "unemployed", "other"];
const EDUCATIONS: &[&str] = &["high school", "some college", "four-year degree", "masters", "phd"];
const MOTIVATIONS: &[&str] = &["money", "help science", "entertainment"];

fn pick<'a>(rng: &mut impl Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

fn survey(rng: &mut impl Rng) -> SurveyResponse {
    let mut motivations: Vec<String> = MOTIVATIONS
        .iter()
        .filter(|_| rng.random_bool(0.5))
        .map(|m| m.to_string())
        .collect();
    if motivations.is_empty() {
        motivations.push(MOTIVATIONS[0].to_string());
    }
    SurveyResponse {
        gender: pick(rng, GENDERS).into(),
        age: pick(rng, AGES).into(),
        occupation: pick(rng, OCCUPATIONS).into(),
        education: pick(rng, EDUCATIONS).into(),
        motivations,
    }
}

/// Result of a simulated campaign.
pub struct Campaign<S: EventStore> {
    pub service: Service<S>,
    pub profiles: Vec<SimWorkerProfile>,
    /// Lifecycle worker id → simulated profile id.
    pub worker_profiles: BTreeMap<String, String>,
}

impl<S: EventStore> Campaign<S> {
    pub fn submissions(&self) -> Vec<Submission> {
        self.service.lifecycle().submissions().to_vec()
    }

    pub fn lifecycle_id(&self, profile_id: &str) -> Option<&str> {
        self.worker_profiles
            .iter()
            .find(|(_, p)| *p == profile_id)
            .map(|(w, _)| w.as_str())
    }
}

/// Runs a campaign in memory and returns every submission.
pub fn run_campaign(
    corpus: &GoldCorpus,
    params: &PopulationParams,
    redundancy: usize,
    seed: u64,
) -> Result<Vec<Submission>, SimError> {
    let config = LifecycleConfig { redundancy_target: redundancy, seed, ..Default::default() };
    let campaign = run_campaign_with(Arc::new(corpus.clone()), params, config, seed, MemoryStore::new())?;
    Ok(campaign.submissions())
}

/// Opens a service over `store` and runs [`drive_campaign`] on it.
pub fn run_campaign_with<S: EventStore>(
    corpus: Arc<GoldCorpus>,
    params: &PopulationParams,
    config: LifecycleConfig,
    seed: u64,
    store: S,
) -> Result<Campaign<S>, SimError> {
    if config.redundancy_target == 0 {
        return Err(SimError::ZeroRedundancy);
    }
    let service = Service::open(corpus, config, store, logical_clock())?;
    drive_campaign(service, params, seed)
}

/// Drives the lifecycle end to end: every worker registers, takes the quiz,
/// fills in the survey and then asks for tasks, chosen uniformly at random
/// among the workers still going, until no worker gets a task.
pub fn drive_campaign<S: EventStore>(
    mut service: Service<S>,
    params: &PopulationParams,
    seed: u64,
) -> Result<Campaign<S>, SimError> {
    if service.lifecycle().config().redundancy_target == 0 {
        return Err(SimError::ZeroRedundancy);
    }
    let profiles = sample_population(params, seed)?;
    let corpus = service.lifecycle().corpus().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = service.lifecycle().quiz_key().to_vec();

    let mut worker_profiles = BTreeMap::new();
    let mut active: Vec<(String, usize, ChaCha8Rng)> = Vec::new();
    for (i, profile) in profiles.iter().enumerate() {
        let worker_id = service.register(None)?;
        worker_profiles.insert(worker_id.clone(), profile.worker_id.clone());
        let mut answers = key.clone();
        if !params.passes_quiz(profile) {
            for a in answers.iter_mut().take(key.len().div_ceil(4)) {
                *a = !*a;
            }
        }
        if !service.take_quiz(&worker_id, &answers, None)?.passed {
            continue;
        }
        service.record_survey(&worker_id, &survey(&mut rng), None)?;
        active.push((worker_id, i, ChaCha8Rng::seed_from_u64(profile.ability_seed)));
    }

    while !active.is_empty() {
        let slot = rng.random_range(0..active.len());
        let (worker_id, profile_index, worker_rng) = &mut active[slot];
        let Some(task) = service.next_task(worker_id)? else {
            active.remove(slot);
            continue;
        };
        let doc = corpus.document(&task.doc_id).expect("assigned documents exist");
        let spans = simulate_annotation(&profiles[*profile_index], doc, &corpus.gold_extents(&task.doc_id), worker_rng);
        let spans: Vec<Extent> = spans.into_iter().collect();
        let (_, record) = service.submit(worker_id, &task.doc_id, &spans, None)?;
        if record.state == WorkerState::Blocked {
            active.remove(slot);
        }
    }
    Ok(Campaign { service, profiles, worker_profiles })
}

/// Documents that count toward the campaign target.
pub fn paid_documents(corpus: &GoldCorpus) -> impl Iterator<Item = &str> {
    corpus
        .partition
        .iter()
        .filter(|(_, c)| **c != DocContext::Training)
        .map(|(id, _)| id.as_str())
}
