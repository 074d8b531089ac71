//! Documents, gold spans and the PubTator text format.
//!
//! All offsets are zero-based, half-open and counted in Unicode scalar
//! values over `full_text`, which is the title, one space, then the body.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: malformed PubTator line: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("document {doc_id}: mention at [{start},{end}) is {expected:?} in the text but {found:?} in the annotation")]
    OffsetMismatch {
        doc_id: String,
        start: usize,
        end: usize,
        expected: String,
        found: String,
    },
    #[error("document {0} appears more than once")]
    DuplicateDocument(String),
    #[error("document {doc_id}: gold spans [{first_start},{first_end}) and [{second_start},{second_end}) overlap")]
    OverlappingGold {
        doc_id: String,
        first_start: usize,
        first_end: usize,
        second_start: usize,
        second_end: usize,
    },
    #[error("document {doc_id}: span [{start},{end}) is outside the text (length {len})")]
    SpanOutOfBounds {
        doc_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("selection [{start},{end}) covers no token")]
    NoTokenInRange { start: usize, end: usize },
    #[error("unknown document {0}")]
    UnknownDocument(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
}

/// A half-open character interval inside one document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Extent {
    pub start: usize,
    pub end: usize,
}

impl Extent {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn overlaps(&self, other: &Extent) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl fmt::Display for Extent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

/// One annotated mention. Only `(doc_id, start, end)` takes part in matching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept_id: Option<String>,
}

impl Span {
    pub fn extent(&self) -> Extent {
        Extent::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DocContext {
    Training,
    GoldFeedback,
    Regular,
}

impl fmt::Display for DocContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DocContext::Training => "TRAINING",
            DocContext::GoldFeedback => "GOLD_FEEDBACK",
            DocContext::Regular => "REGULAR",
        })
    }
}

/// One abstract.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    pub full_text: String,
    pub token_boundaries: Vec<Extent>,
    // byte offset of every char index, plus the end
    char_bytes: Vec<usize>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        let title = title.into();
        let body = body.into();
        let full_text = format!("{title} {body}");
        let mut char_bytes: Vec<usize> = full_text.char_indices().map(|(b, _)| b).collect();
        char_bytes.push(full_text.len());
        let token_boundaries = tokenize(&full_text);
        Self {
            doc_id: doc_id.into(),
            title,
            body,
            full_text,
            token_boundaries,
            char_bytes,
        }
    }

    /// Length of `full_text` in characters.
    pub fn len(&self) -> usize {
        self.char_bytes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The text covered by `[start, end)`, or `None` when out of bounds.
    pub fn slice(&self, start: usize, end: usize) -> Option<&str> {
        if start > end || end > self.len() {
            return None;
        }
        Some(&self.full_text[self.char_bytes[start]..self.char_bytes[end]])
    }

    pub fn contains_extent(&self, extent: Extent) -> bool {
        extent.start < extent.end && extent.end <= self.len()
    }

    /// Builds a span over this document, checking bounds.
    pub fn span(&self, extent: Extent) -> Result<Span, CorpusError> {
        if !self.contains_extent(extent) {
            return Err(CorpusError::SpanOutOfBounds {
                doc_id: self.doc_id.clone(),
                start: extent.start,
                end: extent.end,
                len: self.len(),
            });
        }
        Ok(Span {
            doc_id: self.doc_id.clone(),
            start: extent.start,
            end: extent.end,
            surface: self.slice(extent.start, extent.end).unwrap_or_default().to_string(),
            label: None,
            concept_id: None,
        })
    }

    pub fn token_count(&self) -> usize {
        self.token_boundaries.len()
    }

    /// Expands a raw selection to whole tokens.
    pub fn snap_to_tokens(&self, raw_start: usize, raw_end: usize) -> Result<Span, CorpusError> {
        let raw = Extent::new(raw_start, raw_end);
        if raw.is_empty() || raw_end > self.len() {
            return Err(CorpusError::SpanOutOfBounds {
                doc_id: self.doc_id.clone(),
                start: raw_start,
                end: raw_end,
                len: self.len(),
            });
        }
        let first = self.token_boundaries.partition_point(|t| t.end <= raw_start);
        let mut last = None;
        for (i, token) in self.token_boundaries.iter().enumerate().skip(first) {
            if token.start >= raw_end {
                break;
            }
            last = Some(i);
        }
        let Some(last) = last else {
            return Err(CorpusError::NoTokenInRange { start: raw_start, end: raw_end });
        };
        let extent = Extent::new(self.token_boundaries[first].start, self.token_boundaries[last].end);
        self.span(extent)
    }

    /// Index of the token containing character `offset`, or the first token after it.
    pub(crate) fn token_at_or_after(&self, offset: usize) -> usize {
        self.token_boundaries.partition_point(|t| t.end <= offset)
    }

    /// Index of the last token starting before character `offset`.
    pub(crate) fn token_before(&self, offset: usize) -> Option<usize> {
        self.token_boundaries
            .partition_point(|t| t.start < offset)
            .checked_sub(1)
    }
}

/// Maximal runs of non-whitespace characters, as character offsets.
pub fn tokenize(text: &str) -> Vec<Extent> {
    let mut tokens = Vec::new();
    let mut current: Option<usize> = None;
    let mut count = 0;
    for (i, c) in text.chars().enumerate() {
        count = i + 1;
        match (c.is_whitespace(), current) {
            (false, None) => current = Some(i),
            (true, Some(start)) => {
                tokens.push(Extent::new(start, i));
                current = None;
            }
            _ => {}
        }
    }
    if let Some(start) = current {
        tokens.push(Extent::new(start, count));
    }
    tokens
}

/// How documents are split into training, gold-feedback and regular groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    /// Explicit training documents, in presentation order.
    pub training_ids: Option<Vec<String>>,
    /// Number of training documents drawn when `training_ids` is unset.
    pub training_count: usize,
    pub gold_feedback_ids: Option<Vec<String>>,
    /// Share of all documents drawn as gold-feedback documents (rounded up).
    pub gold_fraction: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            training_ids: None,
            training_count: 4,
            gold_feedback_ids: None,
            gold_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Documents with their expert annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoldCorpus {
    pub documents: BTreeMap<String, Document>,
    /// Gold spans per document, sorted by offsets.
    pub gold: BTreeMap<String, Vec<Span>>,
    pub partition: BTreeMap<String, DocContext>,
    /// Training documents in presentation order.
    pub training_order: Vec<String>,
}

impl GoldCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Adds a document with its gold spans; the document starts as REGULAR.
    pub fn insert(&mut self, doc: Document, mut spans: Vec<Span>) -> Result<(), CorpusError> {
        if self.documents.contains_key(&doc.doc_id) {
            return Err(CorpusError::DuplicateDocument(doc.doc_id));
        }
        for span in &spans {
            check_gold_span(&doc, span)?;
        }
        spans.sort_by_key(|s| s.extent());
        for pair in spans.windows(2) {
            if pair[0].extent().overlaps(&pair[1].extent()) {
                return Err(CorpusError::OverlappingGold {
                    doc_id: doc.doc_id.clone(),
                    first_start: pair[0].start,
                    first_end: pair[0].end,
                    second_start: pair[1].start,
                    second_end: pair[1].end,
                });
            }
        }
        let id = doc.doc_id.clone();
        self.partition.insert(id.clone(), DocContext::Regular);
        self.gold.insert(id.clone(), spans);
        self.documents.insert(id, doc);
        Ok(())
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.get(doc_id)
    }

    pub fn gold_spans(&self, doc_id: &str) -> &[Span] {
        self.gold.get(doc_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn gold_extents(&self, doc_id: &str) -> BTreeSet<Extent> {
        self.gold_spans(doc_id).iter().map(Span::extent).collect()
    }

    pub fn context(&self, doc_id: &str) -> Option<DocContext> {
        self.partition.get(doc_id).copied()
    }

    pub fn docs_in(&self, context: DocContext) -> impl Iterator<Item = &str> {
        self.partition
            .iter()
            .filter(move |(_, c)| **c == context)
            .map(|(id, _)| id.as_str())
    }

    pub fn total_gold(&self) -> usize {
        self.gold.values().map(Vec::len).sum()
    }

    /// Assigns every document to exactly one group.
    pub fn apply_partition(&mut self, config: &PartitionConfig) -> Result<(), CorpusError> {
        let ids: Vec<String> = self.documents.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let training: Vec<String> = match &config.training_ids {
            Some(explicit) => explicit.clone(),
            None => {
                if config.training_count > ids.len() {
                    return Err(CorpusError::InvalidPartition(format!(
                        "{} training documents requested but corpus has {}",
                        config.training_count,
                        ids.len()
                    )));
                }
                let mut pool = ids.clone();
                pool.shuffle(&mut rng);
                pool.truncate(config.training_count);
                pool
            }
        };
        let mut seen = BTreeSet::new();
        for id in &training {
            if !self.documents.contains_key(id) {
                return Err(CorpusError::UnknownDocument(id.clone()));
            }
            if !seen.insert(id.clone()) {
                return Err(CorpusError::InvalidPartition(format!("training document {id} listed twice")));
            }
        }

        let gold: Vec<String> = match &config.gold_feedback_ids {
            Some(explicit) => explicit.clone(),
            None => {
                if !(0.0..=1.0).contains(&config.gold_fraction) {
                    return Err(CorpusError::InvalidPartition(format!(
                        "gold fraction {} outside [0,1]",
                        config.gold_fraction
                    )));
                }
                let mut pool: Vec<String> = ids.iter().filter(|id| !seen.contains(*id)).cloned().collect();
                // 0.1 * 593 must give 60, so round up after trimming float noise.
                let wanted = ((config.gold_fraction * ids.len() as f64) - 1e-9).ceil().max(0.0) as usize;
                pool.shuffle(&mut rng);
                pool.truncate(wanted.min(pool.len()));
                pool
            }
        };
        for id in &gold {
            if !self.documents.contains_key(id) {
                return Err(CorpusError::UnknownDocument(id.clone()));
            }
            if !seen.insert(id.clone()) {
                return Err(CorpusError::InvalidPartition(format!("document {id} assigned to two groups")));
            }
        }

        for context in self.partition.values_mut() {
            *context = DocContext::Regular;
        }
        for id in &training {
            self.partition.insert(id.clone(), DocContext::Training);
        }
        for id in &gold {
            self.partition.insert(id.clone(), DocContext::GoldFeedback);
        }
        self.training_order = training;
        Ok(())
    }
}

fn check_gold_span(doc: &Document, span: &Span) -> Result<(), CorpusError> {
    if span.doc_id != doc.doc_id {
        return Err(CorpusError::UnknownDocument(span.doc_id.clone()));
    }
    let Some(slice) = (span.start < span.end).then(|| doc.slice(span.start, span.end)).flatten() else {
        return Err(CorpusError::SpanOutOfBounds {
            doc_id: doc.doc_id.clone(),
            start: span.start,
            end: span.end,
            len: doc.len(),
        });
    };
    if slice != span.surface {
        return Err(CorpusError::OffsetMismatch {
            doc_id: doc.doc_id.clone(),
            start: span.start,
            end: span.end,
            expected: slice.to_string(),
            found: span.surface.clone(),
        });
    }
    Ok(())
}

/// Parses PubTator blocks. Every document starts in the REGULAR group.
pub fn parse_pubtator(input: &str) -> Result<GoldCorpus, CorpusError> {
    let mut corpus = GoldCorpus::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    for (i, raw) in input.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            if !block.is_empty() {
                parse_block(&block, &mut corpus)?;
                block.clear();
            }
        } else {
            block.push((i + 1, line));
        }
    }
    if !block.is_empty() {
        parse_block(&block, &mut corpus)?;
    }
    Ok(corpus)
}

fn malformed(line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::MalformedLine { line, reason: reason.into() }
}

fn parse_text_line<'a>(line_no: usize, line: &'a str, marker: &str) -> Result<(&'a str, &'a str), CorpusError> {
    let mut parts = line.splitn(3, '|');
    let pmid = parts.next().unwrap_or_default();
    let kind = parts.next().ok_or_else(|| malformed(line_no, format!("expected `PMID|{marker}|...`")))?;
    let text = parts.next().ok_or_else(|| malformed(line_no, format!("expected `PMID|{marker}|...`")))?;
    if kind != marker {
        return Err(malformed(line_no, format!("expected `|{marker}|` line, found `|{kind}|`")));
    }
    if pmid.is_empty() || pmid.contains('\t') {
        return Err(malformed(line_no, "missing document id"));
    }
    Ok((pmid, text))
}

fn parse_block(lines: &[(usize, &str)], corpus: &mut GoldCorpus) -> Result<(), CorpusError> {
    let (title_no, title_line) = lines[0];
    let (pmid, title) = parse_text_line(title_no, title_line, "t")?;
    let Some(&(body_no, body_line)) = lines.get(1) else {
        return Err(malformed(title_no, "title line without abstract line"));
    };
    let (body_pmid, body) = parse_text_line(body_no, body_line, "a")?;
    if body_pmid != pmid {
        return Err(malformed(body_no, format!("document id {body_pmid} does not match title id {pmid}")));
    }
    if corpus.documents.contains_key(pmid) {
        return Err(CorpusError::DuplicateDocument(pmid.to_string()));
    }
    let doc = Document::new(pmid, title, body);

    let mut spans = Vec::new();
    for &(line_no, line) in &lines[2..] {
        let fields: Vec<&str> = line.split('\t').collect();
        if !(4..=6).contains(&fields.len()) {
            return Err(malformed(line_no, format!("expected 4 to 6 tab-separated fields, found {}", fields.len())));
        }
        if fields[0] != pmid {
            return Err(malformed(line_no, format!("annotation for {} inside block {pmid}", fields[0])));
        }
        let start: usize = fields[1]
            .parse()
            .map_err(|_| malformed(line_no, format!("bad start offset {:?}", fields[1])))?;
        let end: usize = fields[2]
            .parse()
            .map_err(|_| malformed(line_no, format!("bad end offset {:?}", fields[2])))?;
        let optional = |i: usize| fields.get(i).filter(|f| !f.is_empty()).map(|f| f.to_string());
        let span = Span {
            doc_id: pmid.to_string(),
            start,
            end,
            surface: fields[3].to_string(),
            label: optional(4),
            concept_id: optional(5),
        };
        check_gold_span(&doc, &span)?;
        spans.push(span);
    }
    corpus.insert(doc, spans)
}

/// Writes the corpus back in PubTator format, documents ordered by id.
pub fn serialize_pubtator(corpus: &GoldCorpus) -> String {
    let mut out = String::new();
    for (i, (id, doc)) in corpus.documents.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("{id}|t|{}\n{id}|a|{}\n", doc.title, doc.body));
        for span in corpus.gold_spans(id) {
            out.push_str(&format!("{id}\t{}\t{}\t{}", span.start, span.end, span.surface));
            match (&span.label, &span.concept_id) {
                (Some(label), Some(concept)) => out.push_str(&format!("\t{label}\t{concept}")),
                (Some(label), None) => out.push_str(&format!("\t{label}")),
                (None, Some(concept)) => out.push_str(&format!("\t\t{concept}")),
                (None, None) => {}
            }
            out.push('\n');
        }
    }
    out
}
