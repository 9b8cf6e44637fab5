use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank cutoff used for MRR and the largest reported K.
pub const K_MAX: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedPrediction {
    pub query: usize,
    /// Distinct ids, best first.
    pub ranked: Vec<usize>,
    pub truth: usize,
}

impl RankedPrediction {
    /// 1-based position of the truth, if listed.
    pub fn rank(&self) -> Option<usize> {
        self.ranked.iter().position(|&t| t == self.truth).map(|p| p + 1)
    }
}

pub fn acc_at_k(preds: &[RankedPrediction], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Config("K must be ≥ 1".into()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no predictions".into()));
    }
    let hits = preds
        .iter()
        .filter(|p| p.rank().is_some_and(|r| r <= k))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean reciprocal rank; a truth missing from the list contributes 0.
pub fn mrr(preds: &[RankedPrediction]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Empty("no predictions".into()));
    }
    let s: f64 = preds
        .iter()
        .map(|p| p.rank().map_or(0.0, |r| 1.0 / r as f64))
        .sum();
    Ok(s / preds.len() as f64)
}

/// Metrics as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc1: f64,
    pub acc5: f64,
    pub acc20: f64,
    pub mrr: f64,
    pub m: usize,
}

impl MetricsReport {
    pub fn from_predictions(preds: &[RankedPrediction]) -> Result<Self> {
        Ok(Self {
            acc1: acc_at_k(preds, 1)?,
            acc5: acc_at_k(preds, 5)?,
            acc20: acc_at_k(preds, 20)?,
            mrr: mrr(preds)?,
            m: preds.len(),
        })
    }

    /// `acc@1 ≤ acc@5 ≤ acc@20` and `acc@1 ≤ mrr ≤ acc@20`.
    pub fn is_consistent(&self) -> bool {
        self.acc1 <= self.acc5 && self.acc5 <= self.acc20 && self.acc1 <= self.mrr && self.mrr <= self.acc20
    }
}
