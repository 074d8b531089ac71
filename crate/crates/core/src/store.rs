//! Append-only event log. One JSON record per line:
//!
//! ```text
//! {"sequence":1,"at_ms":0,"kind":"WORKER_REGISTERED","payload":{"worker_id":"W00001"}}
//! ```
//!
//! Sequences start at 1 and have no gaps. The log is the source of truth;
//! in-memory state is rebuilt by [`replay`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::Submission;
use crate::corpus::{DocContext, Extent, GoldCorpus};
use crate::lifecycle::{Lifecycle, LifecycleConfig, LifecycleError, LifecycleState, SurveyResponse};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure on {path}: {source}")]
    StorageFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("import {path} line {line}: {reason}")]
    Import { path: String, line: usize, reason: String },
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::StorageFailure { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Event {
    WorkerRegistered {
        worker_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_token: Option<String>,
    },
    QuizGraded {
        worker_id: String,
        correct: usize,
        total: usize,
        passed: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_token: Option<String>,
    },
    SurveyRecorded {
        worker_id: String,
        survey: SurveyResponse,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_token: Option<String>,
    },
    Assigned {
        worker_id: String,
        doc_id: String,
        context: DocContext,
    },
    Submitted {
        worker_id: String,
        doc_id: String,
        context: DocContext,
        spans: Vec<Extent>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        request_token: Option<String>,
        /// Loaded from an external dump rather than produced by the lifecycle.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        imported: bool,
    },
    Blocked {
        worker_id: String,
        doc_id: String,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::WorkerRegistered { .. } => "WORKER_REGISTERED",
            Event::QuizGraded { .. } => "QUIZ_GRADED",
            Event::SurveyRecorded { .. } => "SURVEY_RECORDED",
            Event::Assigned { .. } => "ASSIGNED",
            Event::Submitted { .. } => "SUBMITTED",
            Event::Blocked { .. } => "BLOCKED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub sequence: u64,
    pub at_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

pub trait EventStore {
    /// Persists `event` and returns the stored record with its sequence number.
    fn append(&mut self, event: Event, at_ms: u64) -> Result<EventRecord, StoreError>;

    fn records(&self) -> Result<Vec<EventRecord>, StoreError>;

    fn last_sequence(&self) -> u64;

    fn flush(&mut self) -> Result<(), StoreError> {
        Ok(())
    }
}

#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    records: Vec<EventRecord>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<EventRecord>) -> Result<Self, StoreError> {
        validate_sequence(&records)?;
        Ok(Self { records })
    }
}

impl EventStore for MemoryStore {
    fn append(&mut self, event: Event, at_ms: u64) -> Result<EventRecord, StoreError> {
        let record = EventRecord { sequence: self.last_sequence() + 1, at_ms, event };
        self.records.push(record.clone());
        Ok(record)
    }

    fn records(&self) -> Result<Vec<EventRecord>, StoreError> {
        Ok(self.records.clone())
    }

    fn last_sequence(&self) -> u64 {
        self.records.last().map_or(0, |r| r.sequence)
    }
}

/// A log file. Each append is written and synced before it returns.
#[derive(Debug)]
pub struct FileStore {
    path: PathBuf,
    file: File,
    last_sequence: u64,
}

impl FileStore {
    /// Opens or creates the log, validating any existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let last_sequence = if path.exists() {
            read_log(&path)?.last().map_or(0, |r| r.sequence)
        } else {
            0
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StoreError::io(&path, e))?;
        Ok(Self { path, file, last_sequence })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl EventStore for FileStore {
    fn append(&mut self, event: Event, at_ms: u64) -> Result<EventRecord, StoreError> {
        let record = EventRecord { sequence: self.last_sequence + 1, at_ms, event };
        let mut line = serde_json::to_string(&record).map_err(|e| StoreError::io(&self.path, e.into()))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.sync_data())
            .map_err(|e| StoreError::io(&self.path, e))?;
        self.last_sequence = record.sequence;
        Ok(record)
    }

    fn records(&self) -> Result<Vec<EventRecord>, StoreError> {
        read_log(&self.path)
    }

    fn last_sequence(&self) -> u64 {
        self.last_sequence
    }

    fn flush(&mut self) -> Result<(), StoreError> {
        self.file
            .flush()
            .and_then(|_| self.file.sync_all())
            .map_err(|e| StoreError::io(&self.path, e))
    }
}

/// Parses a log, checking that sequences run 1, 2, 3, ... without gaps.
pub fn parse_log(reader: impl BufRead) -> Result<Vec<EventRecord>, StoreError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| StoreError::CorruptLog { line: i + 1, reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EventRecord = serde_json::from_str(&line)
            .map_err(|e| StoreError::CorruptLog { line: i + 1, reason: e.to_string() })?;
        let expected = records.len() as u64 + 1;
        if record.sequence != expected {
            return Err(StoreError::CorruptLog {
                line: i + 1,
                reason: format!("expected sequence {expected}, found {}", record.sequence),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn read_log(path: &Path) -> Result<Vec<EventRecord>, StoreError> {
    let file = File::open(path).map_err(|e| StoreError::io(path, e))?;
    parse_log(BufReader::new(file))
}

pub fn validate_sequence(records: &[EventRecord]) -> Result<(), StoreError> {
    for (i, r) in records.iter().enumerate() {
        if r.sequence != i as u64 + 1 {
            return Err(StoreError::CorruptLog {
                line: i + 1,
                reason: format!("expected sequence {}, found {}", i + 1, r.sequence),
            });
        }
    }
    Ok(())
}

/// Rebuilds lifecycle state from a log.
pub fn replay(
    corpus: Arc<GoldCorpus>,
    config: LifecycleConfig,
    records: &[EventRecord],
) -> Result<Lifecycle, StoreError> {
    validate_sequence(records)?;
    let mut lifecycle = Lifecycle::new(corpus, config).map_err(|e| StoreError::CorruptLog {
        line: 0,
        reason: e.to_string(),
    })?;
    for (i, record) in records.iter().enumerate() {
        lifecycle.apply(record).map_err(|e: LifecycleError| StoreError::CorruptLog {
            line: i + 1,
            reason: e.to_string(),
        })?;
    }
    Ok(lifecycle)
}

/// Replays and returns the plain state (workers, submissions, assignments).
pub fn replay_state(
    corpus: Arc<GoldCorpus>,
    config: LifecycleConfig,
    records: &[EventRecord],
) -> Result<LifecycleState, StoreError> {
    Ok(replay(corpus, config, records)?.snapshot())
}

/// Every SUBMITTED event as a submission, without lifecycle validation.
pub fn submissions_from_log(records: &[EventRecord]) -> Vec<Submission> {
    records
        .iter()
        .filter_map(|r| match &r.event {
            Event::Submitted { worker_id, doc_id, context, spans, .. } => Some(Submission {
                worker_id: worker_id.clone(),
                doc_id: doc_id.clone(),
                spans: spans.iter().copied().collect(),
                submitted_at: r.at_ms,
                context: *context,
            }),
            _ => None,
        })
        .collect()
}

/// Converts a tab-delimited submission table into log events.
///
/// Columns: `worker_id`, `doc_id`, `start`, `end`, and an optional `text`.
/// A header row starting with `worker_id` is skipped. Each row is one span;
/// a row with empty `start` and `end` records a submission with no spans.
/// When `text` is present it must equal the document slice. Contexts come from
/// the corpus partition.
pub fn import_submission_table(
    source: &str,
    input: impl BufRead,
    corpus: &GoldCorpus,
) -> Result<Vec<Event>, StoreError> {
    let err = |line: usize, reason: String| StoreError::Import { path: source.to_string(), line, reason };
    let mut table: BTreeMap<(String, String), BTreeSet<Extent>> = BTreeMap::new();
    let mut worker_order: Vec<String> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| err(n, e.to_string()))?;
        if line.trim().is_empty() || (n == 1 && line.starts_with("worker_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(err(n, format!("expected 4 or 5 tab-separated fields, found {}", fields.len())));
        }
        let (worker, doc_id) = (fields[0].trim(), fields[1].trim());
        if worker.is_empty() {
            return Err(err(n, "empty worker id".into()));
        }
        let doc = corpus
            .document(doc_id)
            .ok_or_else(|| err(n, format!("unknown document {doc_id}")))?;
        let spans = table.entry((worker.to_string(), doc_id.to_string())).or_default();
        if !worker_order.iter().any(|w| w == worker) {
            worker_order.push(worker.to_string());
        }
        if fields[2].is_empty() && fields[3].is_empty() {
            continue;
        }
        let parse = |f: &str| f.trim().parse::<usize>().map_err(|_| err(n, format!("bad offset {f:?}")));
        let extent = Extent::new(parse(fields[2])?, parse(fields[3])?);
        let slice = doc
            .slice(extent.start, extent.end)
            .filter(|_| !extent.is_empty())
            .ok_or_else(|| err(n, format!("span {extent} outside document {doc_id}")))?;
        if let Some(text) = fields.get(4) {
            if *text != slice {
                return Err(err(n, format!("text {text:?} does not match document text {slice:?}")));
            }
        }
        spans.insert(extent);
    }

    let mut events: Vec<Event> = worker_order
        .iter()
        .map(|w| Event::WorkerRegistered { worker_id: w.clone(), request_token: None })
        .collect();
    for ((worker_id, doc_id), spans) in table {
        let context = corpus.context(&doc_id).unwrap_or(DocContext::Regular);
        events.push(Event::Submitted {
            worker_id,
            doc_id,
            context,
            spans: spans.into_iter().collect(),
            request_token: None,
            imported: true,
        });
    }
    Ok(events)
}
