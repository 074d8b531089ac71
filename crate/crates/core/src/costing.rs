//! Campaign cost in exact cents.

use std::fmt;
use std::ops::{Add, Mul};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("invalid amount {0:?}: expected a non-negative amount with at most two decimals")]
pub struct MoneyParseError(pub String);

/// A non-negative amount of money in whole cents.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Money(u64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub const fn from_cents(cents: u64) -> Self {
        Money(cents)
    }

    pub const fn cents(self) -> u64 {
        self.0
    }
}

impl Add for Money {
    type Output = Money;

    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl Mul<u64> for Money {
    type Output = Money;

    fn mul(self, rhs: u64) -> Money {
        Money(self.0 * rhs)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, Add::add)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl FromStr for Money {
    type Err = MoneyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || MoneyParseError(s.to_string());
        let trimmed = s.trim().trim_start_matches('$');
        let (whole, frac) = trimmed.split_once('.').unwrap_or((trimmed, ""));
        if frac.len() > 2 || (whole.is_empty() && frac.is_empty()) {
            return Err(err());
        }
        let digits = |t: &str| t.chars().all(|c| c.is_ascii_digit());
        if !digits(whole) || !digits(frac) {
            return Err(err());
        }
        let whole: u64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| err())? };
        let frac: u64 = match frac.len() {
            0 => 0,
            1 => frac.parse::<u64>().map_err(|_| err())? * 10,
            _ => frac.parse().map_err(|_| err())?,
        };
        whole
            .checked_mul(100)
            .and_then(|c| c.checked_add(frac))
            .map(Money)
            .ok_or_else(err)
    }
}

impl TryFrom<String> for Money {
    type Error = MoneyParseError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Money> for String {
    fn from(m: Money) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub per_annotation_fee: Money,
    pub survey_fee: Money,
    pub training_fee_per_doc: Money,
    pub training_docs: u64,
    pub redundancy: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            per_annotation_fee: Money::from_cents(6),
            survey_fee: Money::from_cents(6),
            training_fee_per_doc: Money::from_cents(6),
            training_docs: 4,
            redundancy: 15,
        }
    }
}

impl CostParams {
    /// What onboarding one worker costs: the survey plus every training document.
    pub fn per_worker_training(&self) -> Money {
        self.survey_fee + self.training_fee_per_doc * self.training_docs
    }

    pub fn per_document_annotation(&self) -> Money {
        self.per_annotation_fee * self.redundancy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub trained_workers: u64,
    pub paid_documents: u64,
    pub per_worker_training: Money,
    pub per_document_annotation: Money,
    pub training_total: Money,
    pub annotation_total: Money,
    pub total: Money,
}

/// `paid_documents` excludes the training documents, whose cost sits in the
/// per-worker term.
pub fn campaign_cost(params: &CostParams, trained_workers: u64, paid_documents: u64) -> Money {
    cost_breakdown(params, trained_workers, paid_documents).total
}

pub fn cost_breakdown(params: &CostParams, trained_workers: u64, paid_documents: u64) -> CostBreakdown {
    let training_total = params.per_worker_training() * trained_workers;
    let annotation_total = params.per_document_annotation() * paid_documents;
    CostBreakdown {
        trained_workers,
        paid_documents,
        per_worker_training: params.per_worker_training(),
        per_document_annotation: params.per_document_annotation(),
        training_total,
        annotation_total,
        total: training_total + annotation_total,
    }
}
