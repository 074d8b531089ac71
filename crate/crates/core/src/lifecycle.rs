//! Worker lifecycle and task routing.
//!
//! A worker moves REGISTERED → QUALIFIED (or REJECTED) → SURVEYED →
//! TRAINING(0..n) → ACTIVE, and may end BLOCKED. BLOCKED and REJECTED are
//! absorbing.
//!
//! [`Lifecycle`] is event sourced: every command first *decides* the events it
//! implies without touching state, the caller persists them, and only then
//! are they *applied*. Replaying a log through [`Lifecycle::apply`] rebuilds
//! the exact live state, including the idempotency tokens.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregate::Submission;
use crate::corpus::{DocContext, Extent, GoldCorpus, Span};
use crate::scoring::{count_matches, match_strict, Metrics, ScoringError};
use crate::store::{Event, EventRecord};

pub const QUIZ_PASS_THRESHOLD: f64 = 0.80;
pub const BLOCK_BELOW_F: f64 = 0.5;
pub const BLOCK_AFTER_RUN: u32 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum LifecycleError {
    #[error("unknown worker {0}")]
    UnknownWorker(String),
    #[error("worker {worker_id} is {state}; cannot {action}")]
    WrongState {
        worker_id: String,
        state: WorkerState,
        action: &'static str,
    },
    #[error("{answers} answers given for a quiz of {key} questions")]
    LengthMismatch { answers: usize, key: usize },
    #[error("invalid survey response: {0}")]
    InvalidSurvey(String),
    #[error("document {doc_id} is not assigned to worker {worker_id}")]
    NotAssigned { worker_id: String, doc_id: String },
    #[error("worker {worker_id} already submitted document {doc_id}")]
    AlreadySubmitted { worker_id: String, doc_id: String },
    #[error("spans {0} and {1} overlap")]
    OverlappingSpans(Extent, Extent),
    #[error("span {extent} is outside document {doc_id}")]
    InvalidSpan { doc_id: String, extent: Extent },
    #[error("request token {0} was already used for a different request")]
    TokenConflict(String),
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("invalid lifecycle configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WorkerState {
    Registered,
    Qualified,
    Rejected,
    Surveyed,
    /// Number of training documents already submitted.
    Training(u8),
    Active,
    Blocked,
}

impl WorkerState {
    pub fn is_terminal(self) -> bool {
        matches!(self, WorkerState::Blocked | WorkerState::Rejected)
    }
}

impl fmt::Display for WorkerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkerState::Registered => f.write_str("REGISTERED"),
            WorkerState::Qualified => f.write_str("QUALIFIED"),
            WorkerState::Rejected => f.write_str("REJECTED"),
            WorkerState::Surveyed => f.write_str("SURVEYED"),
            WorkerState::Training(i) => write!(f, "TRAINING({i})"),
            WorkerState::Active => f.write_str("ACTIVE"),
            WorkerState::Blocked => f.write_str("BLOCKED"),
        }
    }
}

impl FromStr for WorkerState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "REGISTERED" => WorkerState::Registered,
            "QUALIFIED" => WorkerState::Qualified,
            "REJECTED" => WorkerState::Rejected,
            "SURVEYED" => WorkerState::Surveyed,
            "ACTIVE" => WorkerState::Active,
            "BLOCKED" => WorkerState::Blocked,
            other => {
                let step = other
                    .strip_prefix("TRAINING(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| format!("unknown worker state {other:?}"))?;
                WorkerState::Training(step)
            }
        })
    }
}

impl Serialize for WorkerState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WorkerState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub gender: String,
    pub age: String,
    pub occupation: String,
    pub education: String,
    pub motivations: Vec<String>,
}

impl SurveyResponse {
    pub fn validate(&self) -> Result<(), LifecycleError> {
        if self.motivations.iter().all(|m| m.trim().is_empty()) {
            return Err(LifecycleError::InvalidSurvey("at least one motivation is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldScore {
    pub doc_id: String,
    pub f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker_id: String,
    pub state: WorkerState,
    pub quiz_score: Option<f64>,
    pub survey: Option<SurveyResponse>,
    /// Interspersed gold documents only; training documents are not included.
    pub gold_f_history: Vec<GoldScore>,
    pub consecutive_low_gold: u32,
    pub seen_docs: BTreeSet<String>,
    pub training_submissions: u32,
    /// Post-training assignments handed out so far.
    pub post_training_tasks: u32,
}

impl WorkerRecord {
    pub fn new(worker_id: impl Into<String>) -> Self {
        Self {
            worker_id: worker_id.into(),
            state: WorkerState::Registered,
            quiz_score: None,
            survey: None,
            gold_f_history: Vec::new(),
            consecutive_low_gold: 0,
            seen_docs: BTreeSet::new(),
            training_submissions: 0,
            post_training_tasks: 0,
        }
    }

    fn wrong_state(&self, action: &'static str) -> LifecycleError {
        LifecycleError::WrongState {
            worker_id: self.worker_id.clone(),
            state: self.state,
            action,
        }
    }

    /// Records an interspersed gold score. Scores below `rule.below` extend the
    /// current run, anything else resets it; a run of `rule.run` blocks.
    pub fn update_blocking(&mut self, doc_id: &str, gold_f: f64, rule: BlockingRule) -> Result<(), LifecycleError> {
        if self.state != WorkerState::Active {
            return Err(self.wrong_state("record a gold score"));
        }
        self.gold_f_history.push(GoldScore { doc_id: doc_id.to_string(), f: gold_f });
        if gold_f < rule.below {
            self.consecutive_low_gold += 1;
        } else {
            self.consecutive_low_gold = 0;
        }
        if self.consecutive_low_gold >= rule.run {
            self.state = WorkerState::Blocked;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockingRule {
    pub below: f64,
    pub run: u32,
}

impl Default for BlockingRule {
    fn default() -> Self {
        Self { below: BLOCK_BELOW_F, run: BLOCK_AFTER_RUN }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuizQuestion {
    pub statement: String,
    pub expected: bool,
    #[serde(default)]
    pub explanation: String,
}

/// The built-in true/false qualification questions.
pub fn default_quiz_bank() -> Vec<QuizQuestion> {
    let q = |statement: &str, expected: bool, explanation: &str| QuizQuestion {
        statement: statement.into(),
        expected,
        explanation: explanation.into(),
    };
    vec![
        q(
            "In \"patients with Huntington disease (HD)\", the abbreviation HD should also be highlighted.",
            true,
            "Disease abbreviations are highlighted like the full name.",
        ),
        q(
            "In \"the insulin-dependent diabetes mellitus locus\", highlighting only \"diabetes\" is enough.",
            false,
            "Highlight the longest span that is specific to the disease.",
        ),
        q(
            "In \"colorectal cancer families\", the span to highlight is \"colorectal cancer\".",
            true,
            "The disease phrase is highlighted even when it modifies another noun.",
        ),
        q(
            "\"Duchenne and Becker muscular dystrophy\" should be split into two separate highlights.",
            false,
            "Conjoined disease mentions are highlighted as one long span.",
        ),
        q(
            "Symptoms such as \"hearing loss\" should be highlighted.",
            true,
            "Physical results of having a disease count as mentions.",
        ),
        q(
            "When \"breast cancer\" appears twice in an abstract, only the first occurrence is highlighted.",
            false,
            "Every occurrence of a disease term is highlighted.",
        ),
        q(
            "In \"the spastic paraplegia gene (SPG)\", the gene abbreviation SPG should be highlighted.",
            false,
            "Gene names are never highlighted.",
        ),
        q(
            "\"huntingtin (HTT)\" names a gene and should not be highlighted.",
            true,
            "Gene names are never highlighted, even next to a disease.",
        ),
        q(
            "Disease groups such as \"lung cancer\" inside a list of tumor types should be highlighted.",
            true,
            "Disease groups are highlighted as well as specific diseases.",
        ),
        q(
            "A word that names both a gene and a disease is always highlighted.",
            false,
            "Highlight it only where it refers to the disease.",
        ),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuizGrade {
    pub correct: usize,
    pub total: usize,
    pub score: f64,
    pub passed: bool,
}

pub fn grade_quiz(answers: &[bool], key: &[bool]) -> Result<QuizGrade, LifecycleError> {
    grade_quiz_with_threshold(answers, key, QUIZ_PASS_THRESHOLD)
}

pub fn grade_quiz_with_threshold(answers: &[bool], key: &[bool], threshold: f64) -> Result<QuizGrade, LifecycleError> {
    if answers.len() != key.len() || key.is_empty() {
        return Err(LifecycleError::LengthMismatch { answers: answers.len(), key: key.len() });
    }
    let correct = answers.iter().zip(key).filter(|(a, k)| a == k).count();
    let score = correct as f64 / key.len() as f64;
    Ok(QuizGrade { correct, total: key.len(), score, passed: score >= threshold })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifecycleConfig {
    /// Every `gold_interval`-th post-training task is a gold-feedback document.
    pub gold_interval: u32,
    /// Submissions wanted per non-training document.
    pub redundancy_target: usize,
    pub quiz_pass_threshold: f64,
    pub blocking: BlockingRule,
    /// Seed for document assignment.
    pub seed: u64,
    /// Training documents in presentation order; taken from the corpus when unset.
    pub training_docs: Option<Vec<String>>,
    pub quiz: Vec<QuizQuestion>,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self {
            gold_interval: 10,
            redundancy_target: 15,
            quiz_pass_threshold: QUIZ_PASS_THRESHOLD,
            blocking: BlockingRule::default(),
            seed: 0,
            training_docs: None,
            quiz: default_quiz_bank(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub worker_id: String,
    pub doc_id: String,
    pub context: DocContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackKind {
    Gold,
    Peer,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub kind: FeedbackKind,
    pub true_positives: Vec<Span>,
    pub false_positives: Vec<Span>,
    pub false_negatives: Vec<Span>,
    pub f_score: Option<f64>,
    /// Other workers' spans under per-viewer aliases.
    pub peer_spans: BTreeMap<String, Vec<Span>>,
}

impl Feedback {
    fn none() -> Self {
        Feedback {
            kind: FeedbackKind::None,
            true_positives: vec![],
            false_positives: vec![],
            false_negatives: vec![],
            f_score: None,
            peer_spans: BTreeMap::new(),
        }
    }
}

/// Alias under which `viewed` appears to `viewer`. Stable per pair and
/// never contains either id.
pub fn peer_alias(viewer: &str, viewed: &str) -> String {
    let digest = Sha256::new()
        .chain_update(viewer.as_bytes())
        .chain_update([0u8])
        .chain_update(viewed.as_bytes())
        .finalize();
    let hex: String = digest.iter().take(4).map(|b| format!("{b:02x}")).collect();
    format!("peer-{hex}")
}

/// What a request token was spent on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenUse {
    Registration { worker_id: String },
    Quiz { worker_id: String },
    Survey { worker_id: String },
    Submission { worker_id: String, doc_id: String, index: usize },
}

/// Everything replay must reproduce.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LifecycleState {
    pub workers: BTreeMap<String, WorkerRecord>,
    pub submissions: Vec<Submission>,
    pub assignments: Vec<Assignment>,
    pub pending: BTreeMap<String, Assignment>,
}

pub struct Lifecycle {
    corpus: Arc<GoldCorpus>,
    config: LifecycleConfig,
    quiz_key: Vec<bool>,
    training_docs: Vec<String>,
    workers: BTreeMap<String, WorkerRecord>,
    pending: BTreeMap<String, Assignment>,
    assignments: Vec<Assignment>,
    submissions: Vec<Submission>,
    by_doc: HashMap<String, Vec<usize>>,
    tokens: HashMap<String, TokenUse>,
}

impl Lifecycle {
    pub fn new(corpus: Arc<GoldCorpus>, config: LifecycleConfig) -> Result<Self, LifecycleError> {
        if config.gold_interval == 0 {
            return Err(LifecycleError::Config("gold_interval must be at least 1".into()));
        }
        if config.redundancy_target == 0 {
            return Err(LifecycleError::Config("redundancy_target must be at least 1".into()));
        }
        if config.quiz.is_empty() {
            return Err(LifecycleError::Config("quiz bank is empty".into()));
        }
        let training_docs = match &config.training_docs {
            Some(ids) => ids.clone(),
            None if !corpus.training_order.is_empty() => corpus.training_order.clone(),
            None => corpus.docs_in(DocContext::Training).map(str::to_string).collect(),
        };
        if training_docs.len() > u8::MAX as usize {
            return Err(LifecycleError::Config("too many training documents".into()));
        }
        for id in &training_docs {
            if corpus.document(id).is_none() {
                return Err(LifecycleError::UnknownDocument(id.clone()));
            }
        }
        let quiz_key = config.quiz.iter().map(|q| q.expected).collect();
        Ok(Self {
            corpus,
            config,
            quiz_key,
            training_docs,
            workers: BTreeMap::new(),
            pending: BTreeMap::new(),
            assignments: Vec::new(),
            submissions: Vec::new(),
            by_doc: HashMap::new(),
            tokens: HashMap::new(),
        })
    }

    pub fn corpus(&self) -> &Arc<GoldCorpus> {
        &self.corpus
    }

    pub fn config(&self) -> &LifecycleConfig {
        &self.config
    }

    pub fn quiz_key(&self) -> &[bool] {
        &self.quiz_key
    }

    pub fn training_docs(&self) -> &[String] {
        &self.training_docs
    }

    pub fn worker(&self, worker_id: &str) -> Result<&WorkerRecord, LifecycleError> {
        self.workers
            .get(worker_id)
            .ok_or_else(|| LifecycleError::UnknownWorker(worker_id.to_string()))
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerRecord> {
        self.workers.values()
    }

    pub fn submissions(&self) -> &[Submission] {
        &self.submissions
    }

    pub fn pending(&self, worker_id: &str) -> Option<&Assignment> {
        self.pending.get(worker_id)
    }

    pub fn token(&self, token: &str) -> Option<&TokenUse> {
        self.tokens.get(token)
    }

    pub fn completed_count(&self, doc_id: &str) -> usize {
        self.by_doc.get(doc_id).map_or(0, Vec::len)
    }

    pub fn snapshot(&self) -> LifecycleState {
        LifecycleState {
            workers: self.workers.clone(),
            submissions: self.submissions.clone(),
            assignments: self.assignments.clone(),
            pending: self.pending.clone(),
        }
    }

    fn check_token(&self, token: Option<&str>) -> Result<(), LifecycleError> {
        match token {
            Some(t) if self.tokens.contains_key(t) => Err(LifecycleError::TokenConflict(t.to_string())),
            _ => Ok(()),
        }
    }

    // ---- decisions -------------------------------------------------------

    pub fn decide_register(&self, token: Option<&str>) -> Result<Vec<Event>, LifecycleError> {
        self.check_token(token)?;
        Ok(vec![Event::WorkerRegistered {
            worker_id: format!("W{:05}", self.workers.len() + 1),
            request_token: token.map(str::to_string),
        }])
    }

    pub fn decide_quiz(&self, worker_id: &str, answers: &[bool], token: Option<&str>) -> Result<Vec<Event>, LifecycleError> {
        self.check_token(token)?;
        let worker = self.worker(worker_id)?;
        if worker.state != WorkerState::Registered {
            return Err(worker.wrong_state("take the qualification quiz"));
        }
        let grade = grade_quiz_with_threshold(answers, &self.quiz_key, self.config.quiz_pass_threshold)?;
        Ok(vec![Event::QuizGraded {
            worker_id: worker_id.to_string(),
            correct: grade.correct,
            total: grade.total,
            passed: grade.passed,
            request_token: token.map(str::to_string),
        }])
    }

    pub fn decide_survey(
        &self,
        worker_id: &str,
        survey: &SurveyResponse,
        token: Option<&str>,
    ) -> Result<Vec<Event>, LifecycleError> {
        self.check_token(token)?;
        let worker = self.worker(worker_id)?;
        if worker.state != WorkerState::Qualified {
            return Err(worker.wrong_state("record a survey"));
        }
        survey.validate()?;
        Ok(vec![Event::SurveyRecorded {
            worker_id: worker_id.to_string(),
            survey: survey.clone(),
            request_token: token.map(str::to_string),
        }])
    }

    /// The worker's outstanding assignment, or the event creating a new one.
    /// `Ok((None, []))` means no eligible document is left.
    pub fn decide_next_task(&self, worker_id: &str) -> Result<(Option<Assignment>, Vec<Event>), LifecycleError> {
        let worker = self.worker(worker_id)?;
        match worker.state {
            WorkerState::Surveyed | WorkerState::Training(_) | WorkerState::Active => {}
            _ => return Err(worker.wrong_state("receive a task")),
        }
        if let Some(pending) = self.pending.get(worker_id) {
            return Ok((Some(pending.clone()), vec![]));
        }
        let choice = match worker.state {
            WorkerState::Surveyed if self.training_docs.is_empty() => self.route_active(worker),
            WorkerState::Surveyed => Some((self.training_docs[0].clone(), DocContext::Training)),
            WorkerState::Training(i) => self
                .training_docs
                .get(i as usize)
                .map(|d| (d.clone(), DocContext::Training)),
            _ => self.route_active(worker),
        };
        Ok(match choice {
            Some((doc_id, context)) => {
                let assignment = Assignment { worker_id: worker_id.to_string(), doc_id, context };
                let event = Event::Assigned {
                    worker_id: assignment.worker_id.clone(),
                    doc_id: assignment.doc_id.clone(),
                    context,
                };
                (Some(assignment), vec![event])
            }
            None => (None, vec![]),
        })
    }

    fn eligible(&self, worker: &WorkerRecord, context: DocContext) -> Vec<&str> {
        let candidates: Vec<(&str, usize)> = self
            .corpus
            .docs_in(context)
            .filter(|id| !worker.seen_docs.contains(*id))
            .map(|id| (id, self.completed_count(id)))
            .filter(|(_, n)| *n < self.config.redundancy_target)
            .collect();
        let fewest = candidates.iter().map(|(_, n)| *n).min();
        candidates
            .into_iter()
            .filter(|(_, n)| Some(*n) == fewest)
            .map(|(id, _)| id)
            .collect()
    }

    fn route_active(&self, worker: &WorkerRecord) -> Option<(String, DocContext)> {
        let task_number = worker.post_training_tasks + 1;
        let gold_turn = task_number.is_multiple_of(self.config.gold_interval);
        let gold = self.eligible(worker, DocContext::GoldFeedback);
        let regular = self.eligible(worker, DocContext::Regular);
        let (pool, context) = if gold_turn && !gold.is_empty() {
            (gold, DocContext::GoldFeedback)
        } else if !regular.is_empty() {
            (regular, DocContext::Regular)
        } else if !gold.is_empty() {
            (gold, DocContext::GoldFeedback)
        } else {
            return None;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.assignments.len() as u64);
        pool.choose(&mut rng).map(|id| (id.to_string(), context))
    }

    pub fn decide_submit(
        &self,
        worker_id: &str,
        doc_id: &str,
        spans: &[Extent],
        token: Option<&str>,
    ) -> Result<Vec<Event>, LifecycleError> {
        self.check_token(token)?;
        let worker = self.worker(worker_id)?;
        if !matches!(worker.state, WorkerState::Training(_) | WorkerState::Active) {
            return Err(worker.wrong_state("submit annotations"));
        }
        let assignment = match self.pending.get(worker_id) {
            Some(a) if a.doc_id == doc_id => a,
            _ if self.has_submitted(worker_id, doc_id) => {
                return Err(LifecycleError::AlreadySubmitted {
                    worker_id: worker_id.to_string(),
                    doc_id: doc_id.to_string(),
                })
            }
            _ => {
                return Err(LifecycleError::NotAssigned {
                    worker_id: worker_id.to_string(),
                    doc_id: doc_id.to_string(),
                })
            }
        };
        let extents = self.validate_spans(doc_id, spans)?;

        let mut events = vec![Event::Submitted {
            worker_id: worker_id.to_string(),
            doc_id: doc_id.to_string(),
            context: assignment.context,
            spans: extents.iter().copied().collect(),
            request_token: token.map(str::to_string),
            imported: false,
        }];
        if assignment.context == DocContext::GoldFeedback && worker.state == WorkerState::Active {
            let f = self.gold_f(doc_id, &extents);
            let mut probe = worker.clone();
            probe.update_blocking(doc_id, f, self.config.blocking)?;
            if probe.state == WorkerState::Blocked {
                events.push(Event::Blocked {
                    worker_id: worker_id.to_string(),
                    doc_id: doc_id.to_string(),
                });
            }
        }
        Ok(events)
    }

    fn has_submitted(&self, worker_id: &str, doc_id: &str) -> bool {
        self.by_doc
            .get(doc_id)
            .is_some_and(|ids| ids.iter().any(|&i| self.submissions[i].worker_id == worker_id))
    }

    fn validate_spans(&self, doc_id: &str, spans: &[Extent]) -> Result<BTreeSet<Extent>, LifecycleError> {
        let doc = self
            .corpus
            .document(doc_id)
            .ok_or_else(|| LifecycleError::UnknownDocument(doc_id.to_string()))?;
        let mut sorted = spans.to_vec();
        sorted.sort();
        for extent in &sorted {
            if !doc.contains_extent(*extent) {
                return Err(LifecycleError::InvalidSpan { doc_id: doc_id.to_string(), extent: *extent });
            }
        }
        for pair in sorted.windows(2) {
            if pair[0].overlaps(&pair[1]) {
                return Err(LifecycleError::OverlappingSpans(pair[0], pair[1]));
            }
        }
        Ok(sorted.into_iter().collect())
    }

    fn gold_f(&self, doc_id: &str, spans: &BTreeSet<Extent>) -> f64 {
        Metrics::from(count_matches(&self.corpus.gold_extents(doc_id), spans)).f1
    }

    // ---- state changes ---------------------------------------------------

    /// Applies one persisted event.
    pub fn apply(&mut self, record: &EventRecord) -> Result<(), LifecycleError> {
        match &record.event {
            Event::WorkerRegistered { worker_id, request_token } => {
                if self.workers.contains_key(worker_id) {
                    return Err(LifecycleError::Config(format!("worker {worker_id} registered twice")));
                }
                self.workers.insert(worker_id.clone(), WorkerRecord::new(worker_id.clone()));
                self.remember(request_token, TokenUse::Registration { worker_id: worker_id.clone() });
            }
            Event::QuizGraded { worker_id, correct, total, passed, request_token } => {
                let worker = self.worker_mut(worker_id)?;
                if worker.state != WorkerState::Registered {
                    return Err(worker.wrong_state("take the qualification quiz"));
                }
                worker.quiz_score = Some(*correct as f64 / (*total).max(1) as f64);
                worker.state = if *passed { WorkerState::Qualified } else { WorkerState::Rejected };
                self.remember(request_token, TokenUse::Quiz { worker_id: worker_id.clone() });
            }
            Event::SurveyRecorded { worker_id, survey, request_token } => {
                let worker = self.worker_mut(worker_id)?;
                if worker.state != WorkerState::Qualified {
                    return Err(worker.wrong_state("record a survey"));
                }
                worker.survey = Some(survey.clone());
                worker.state = WorkerState::Surveyed;
                self.remember(request_token, TokenUse::Survey { worker_id: worker_id.clone() });
            }
            Event::Assigned { worker_id, doc_id, context } => {
                if self.pending.contains_key(worker_id) {
                    return Err(LifecycleError::Config(format!("worker {worker_id} already has a task")));
                }
                let training = !self.training_docs.is_empty();
                let worker = self.worker_mut(worker_id)?;
                if !worker.seen_docs.insert(doc_id.clone()) {
                    return Err(LifecycleError::AlreadySubmitted {
                        worker_id: worker_id.clone(),
                        doc_id: doc_id.clone(),
                    });
                }
                match worker.state {
                    WorkerState::Surveyed if training => worker.state = WorkerState::Training(0),
                    WorkerState::Surveyed => {
                        worker.state = WorkerState::Active;
                        worker.post_training_tasks += 1;
                    }
                    WorkerState::Training(_) => {}
                    WorkerState::Active => worker.post_training_tasks += 1,
                    _ => return Err(worker.wrong_state("receive a task")),
                }
                let assignment = Assignment {
                    worker_id: worker_id.clone(),
                    doc_id: doc_id.clone(),
                    context: *context,
                };
                self.assignments.push(assignment.clone());
                self.pending.insert(worker_id.clone(), assignment);
            }
            Event::Submitted { worker_id, doc_id, context, spans, request_token, imported } => {
                let spans: BTreeSet<Extent> = spans.iter().copied().collect();
                if *imported {
                    let worker = self.worker_mut(worker_id)?;
                    worker.seen_docs.insert(doc_id.clone());
                } else {
                    match self.pending.get(worker_id) {
                        Some(a) if a.doc_id == *doc_id => {}
                        _ => {
                            return Err(LifecycleError::NotAssigned {
                                worker_id: worker_id.clone(),
                                doc_id: doc_id.clone(),
                            })
                        }
                    }
                    self.pending.remove(worker_id);
                    let gold_f = (*context == DocContext::GoldFeedback).then(|| self.gold_f(doc_id, &spans));
                    let training_len = self.training_docs.len();
                    let rule = self.config.blocking;
                    let worker = self.worker_mut(worker_id)?;
                    match (worker.state, context) {
                        (WorkerState::Training(i), DocContext::Training) => {
                            worker.training_submissions += 1;
                            worker.state = if (i as usize) + 1 >= training_len {
                                WorkerState::Active
                            } else {
                                WorkerState::Training(i + 1)
                            };
                        }
                        (WorkerState::Active, _) => {
                            if let Some(f) = gold_f {
                                worker.update_blocking(doc_id, f, rule)?;
                            }
                        }
                        _ => return Err(worker.wrong_state("submit annotations")),
                    }
                }
                let index = self.submissions.len();
                self.submissions.push(Submission {
                    worker_id: worker_id.clone(),
                    doc_id: doc_id.clone(),
                    spans,
                    submitted_at: record.at_ms,
                    context: *context,
                });
                self.by_doc.entry(doc_id.clone()).or_default().push(index);
                self.remember(
                    request_token,
                    TokenUse::Submission { worker_id: worker_id.clone(), doc_id: doc_id.clone(), index },
                );
            }
            Event::Blocked { worker_id, .. } => {
                let worker = self.worker_mut(worker_id)?;
                worker.state = WorkerState::Blocked;
            }
        }
        Ok(())
    }

    fn worker_mut(&mut self, worker_id: &str) -> Result<&mut WorkerRecord, LifecycleError> {
        self.workers
            .get_mut(worker_id)
            .ok_or_else(|| LifecycleError::UnknownWorker(worker_id.to_string()))
    }

    fn remember(&mut self, token: &Option<String>, use_: TokenUse) {
        if let Some(t) = token {
            self.tokens.insert(t.clone(), use_);
        }
    }

    // ---- feedback --------------------------------------------------------

    /// Feedback for the submission at `index`, computed only from that
    /// submission and the ones recorded before it.
    pub fn feedback_for(&self, index: usize) -> Result<Feedback, LifecycleError> {
        let sub = self
            .submissions
            .get(index)
            .ok_or_else(|| LifecycleError::Config(format!("no submission #{index}")))?;
        let doc = self
            .corpus
            .document(&sub.doc_id)
            .ok_or_else(|| LifecycleError::UnknownDocument(sub.doc_id.clone()))?;
        let to_spans = |set: &BTreeSet<Extent>| -> Vec<Span> { set.iter().filter_map(|e| doc.span(*e).ok()).collect() };

        match sub.context {
            DocContext::Training | DocContext::GoldFeedback => {
                let result = match_strict(self.corpus.gold_spans(&sub.doc_id), &to_spans(&sub.spans))?;
                let f = Metrics::from(result.counts()).f1;
                Ok(Feedback {
                    kind: FeedbackKind::Gold,
                    true_positives: result.true_positives,
                    false_positives: result.false_positives,
                    false_negatives: result.false_negatives,
                    f_score: Some(f),
                    peer_spans: BTreeMap::new(),
                })
            }
            DocContext::Regular => {
                let peers: BTreeMap<String, Vec<Span>> = self.by_doc[&sub.doc_id]
                    .iter()
                    .take_while(|&&i| i < index)
                    .map(|&i| &self.submissions[i])
                    .filter(|p| p.worker_id != sub.worker_id)
                    .map(|p| (peer_alias(&sub.worker_id, &p.worker_id), to_spans(&p.spans)))
                    .collect();
                if peers.is_empty() {
                    Ok(Feedback::none())
                } else {
                    Ok(Feedback { kind: FeedbackKind::Peer, peer_spans: peers, ..Feedback::none() })
                }
            }
        }
    }

    /// Index of the worker's submission for `doc_id`.
    pub fn submission_index(&self, worker_id: &str, doc_id: &str) -> Option<usize> {
        self.by_doc
            .get(doc_id)?
            .iter()
            .copied()
            .find(|&i| self.submissions[i].worker_id == worker_id)
    }
}
