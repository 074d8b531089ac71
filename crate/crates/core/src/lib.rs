//! Crowd annotation of entity mentions: gold corpora, strict span scoring,
//! threshold voting, redundancy estimation, the worker lifecycle, an
//! append-only event log, campaign costing and a campaign simulator.

pub mod aggregate;
pub mod corpus;
pub mod costing;
pub mod lifecycle;
pub mod redundancy;
pub mod scoring;
pub mod service;
pub mod simulate;
pub mod store;

pub use aggregate::{apply_threshold, sweep_k, tally_votes, Submission, SweepOptions, SweepPoint, VoteTally};
pub use corpus::{parse_pubtator, serialize_pubtator, DocContext, Document, Extent, GoldCorpus, Span};
pub use costing::{campaign_cost, CostParams, Money};
pub use lifecycle::{Lifecycle, LifecycleConfig, WorkerRecord, WorkerState};
pub use redundancy::{estimate_redundancy, redundancy_curve, RedundancyEstimate};
pub use scoring::{evaluate_corpus, match_strict, Hypothesis, Metrics};
pub use service::Service;
pub use store::{Event, EventRecord, EventStore, FileStore, MemoryStore};
