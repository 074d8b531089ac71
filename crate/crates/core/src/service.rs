//! Lifecycle commands backed by an event store.
//!
//! Each command decides its events, appends them, and only then applies them,
//! so nothing a worker sees is computed from unpersisted state. Commands that
//! carry a request token are idempotent: repeating one returns the original
//! outcome without writing anything.

use std::sync::Arc;

use thiserror::Error;

use crate::corpus::{Extent, GoldCorpus};
use crate::lifecycle::{
    Assignment, Feedback, Lifecycle, LifecycleConfig, LifecycleError, QuizGrade, SurveyResponse, TokenUse,
    WorkerRecord, WorkerState,
};
use crate::store::{replay, Event, EventRecord, EventStore, StoreError};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Source of event timestamps, in milliseconds.
pub type Clock = Box<dyn FnMut() -> u64 + Send>;

pub fn system_clock() -> Clock {
    Box::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    })
}

/// A clock that ticks one millisecond per reading, for reproducible runs.
pub fn logical_clock() -> Clock {
    let mut now = 0;
    Box::new(move || {
        now += 1;
        now
    })
}

/// Called after every applied event with the record and the updated state.
pub type Observer = Box<dyn FnMut(&EventRecord, &Lifecycle) + Send>;

pub struct Service<S: EventStore> {
    lifecycle: Lifecycle,
    store: S,
    clock: Clock,
    observer: Option<Observer>,
}

impl<S: EventStore> Service<S> {
    /// Builds the service by replaying whatever the store already holds.
    pub fn open(corpus: Arc<GoldCorpus>, config: LifecycleConfig, store: S, clock: Clock) -> Result<Self, ServiceError> {
        let records = store.records()?;
        let lifecycle = replay(corpus, config, &records)?;
        Ok(Self { lifecycle, store, clock, observer: None })
    }

    pub fn lifecycle(&self) -> &Lifecycle {
        &self.lifecycle
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn set_observer(&mut self, observer: Observer) {
        self.observer = Some(observer);
    }

    pub fn into_store(self) -> S {
        self.store
    }

    pub fn flush(&mut self) -> Result<(), ServiceError> {
        Ok(self.store.flush()?)
    }

    fn commit(&mut self, events: Vec<Event>) -> Result<(), ServiceError> {
        for event in events {
            let at = (self.clock)();
            let record = self.store.append(event, at)?;
            self.lifecycle.apply(&record)?;
            if let Some(observe) = self.observer.as_mut() {
                observe(&record, &self.lifecycle);
            }
        }
        Ok(())
    }

    fn conflict(token: &str) -> ServiceError {
        LifecycleError::TokenConflict(token.to_string()).into()
    }

    pub fn register(&mut self, token: Option<&str>) -> Result<String, ServiceError> {
        if let Some(t) = token {
            match self.lifecycle.token(t) {
                Some(TokenUse::Registration { worker_id }) => return Ok(worker_id.clone()),
                Some(_) => return Err(Self::conflict(t)),
                None => {}
            }
        }
        let events = self.lifecycle.decide_register(token)?;
        let worker_id = match &events[0] {
            Event::WorkerRegistered { worker_id, .. } => worker_id.clone(),
            _ => unreachable!("registration emits WORKER_REGISTERED"),
        };
        self.commit(events)?;
        Ok(worker_id)
    }

    pub fn take_quiz(&mut self, worker_id: &str, answers: &[bool], token: Option<&str>) -> Result<QuizGrade, ServiceError> {
        if let Some(t) = token {
            match self.lifecycle.token(t) {
                Some(TokenUse::Quiz { worker_id: w }) if w == worker_id => return Ok(self.quiz_grade(worker_id)?),
                Some(_) => return Err(Self::conflict(t)),
                None => {}
            }
        }
        let events = self.lifecycle.decide_quiz(worker_id, answers, token)?;
        self.commit(events)?;
        Ok(self.quiz_grade(worker_id)?)
    }

    fn quiz_grade(&self, worker_id: &str) -> Result<QuizGrade, LifecycleError> {
        let worker = self.lifecycle.worker(worker_id)?;
        let total = self.lifecycle.quiz_key().len();
        let score = worker.quiz_score.unwrap_or(0.0);
        Ok(QuizGrade {
            correct: (score * total as f64).round() as usize,
            total,
            score,
            passed: worker.state != WorkerState::Rejected,
        })
    }

    pub fn record_survey(
        &mut self,
        worker_id: &str,
        survey: &SurveyResponse,
        token: Option<&str>,
    ) -> Result<WorkerState, ServiceError> {
        if let Some(t) = token {
            match self.lifecycle.token(t) {
                Some(TokenUse::Survey { worker_id: w }) if w == worker_id => {
                    return Ok(self.lifecycle.worker(worker_id)?.state)
                }
                Some(_) => return Err(Self::conflict(t)),
                None => {}
            }
        }
        let events = self.lifecycle.decide_survey(worker_id, survey, token)?;
        self.commit(events)?;
        Ok(self.lifecycle.worker(worker_id)?.state)
    }

    /// The worker's current task, assigning a new one if needed.
    pub fn next_task(&mut self, worker_id: &str) -> Result<Option<Assignment>, ServiceError> {
        let (assignment, events) = self.lifecycle.decide_next_task(worker_id)?;
        self.commit(events)?;
        Ok(assignment)
    }

    pub fn submit(
        &mut self,
        worker_id: &str,
        doc_id: &str,
        spans: &[Extent],
        token: Option<&str>,
    ) -> Result<(Feedback, WorkerRecord), ServiceError> {
        if let Some(t) = token {
            match self.lifecycle.token(t) {
                Some(TokenUse::Submission { worker_id: w, doc_id: d, index }) if w == worker_id && d == doc_id => {
                    let feedback = self.lifecycle.feedback_for(*index)?;
                    return Ok((feedback, self.lifecycle.worker(worker_id)?.clone()));
                }
                Some(_) => return Err(Self::conflict(t)),
                None => {}
            }
        }
        let events = self.lifecycle.decide_submit(worker_id, doc_id, spans, token)?;
        self.commit(events)?;
        let index = self
            .lifecycle
            .submission_index(worker_id, doc_id)
            .expect("submission was just applied");
        let feedback = self.lifecycle.feedback_for(index)?;
        Ok((feedback, self.lifecycle.worker(worker_id)?.clone()))
    }
}
