//! Full-catalog ranking metrics (HR@K, NDCG@K) for a single target item.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Example;
use crate::model::{forward, ModelConfig, ModelError, ModelParams};
use crate::segmentation::ItemId;

pub const DEFAULT_KS: [usize; 2] = [5, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("target {target} outside {n_items} scored items")]
    TargetOutOfRange { target: ItemId, n_items: usize },
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error("cutoff k must be at least 1")]
    BadK,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// 1-based rank of `target`: items with a strictly higher score come first,
/// and tied items are ordered by ascending id.
pub fn rank_of_target(scores: &[f64], target: ItemId) -> Result<usize, EvalError> {
    let Some(&t) = scores.get(target) else {
        return Err(EvalError::TargetOutOfRange {
            target,
            n_items: scores.len(),
        });
    };
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count();
    Ok(ahead + 1)
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    gain / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_examples: usize,
    pub metrics: Vec<CutoffMetrics>,
}

impl EvalReport {
    pub fn from_ranks(split: &str, ranks: &[usize], ks: &[usize]) -> Result<Self, EvalError> {
        if ks.contains(&0) {
            return Err(EvalError::BadK);
        }
        Ok(Self {
            split: split.to_string(),
            n_examples: ranks.len(),
            metrics: ks
                .iter()
                .map(|&k| CutoffMetrics {
                    k,
                    hr: hr_at_k(ranks, k),
                    ndcg: ndcg_at_k(ranks, k),
                })
                .collect(),
        })
    }

    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.at(k).map(|m| m.hr)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.at(k).map(|m| m.ndcg)
    }

    /// `H@5 N@5 H@10 N@10`-style summary line.
    pub fn summary_line(&self) -> String {
        self.metrics
            .iter()
            .map(|m| format!("H@{k}={:.4} N@{k}={:.4}", m.hr, m.ndcg, k = m.k))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Scores every example against the full catalog and returns the report and
/// the per-example ranks (in input order).
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    examples: &[Example],
    split: &str,
    ks: &[usize],
) -> Result<(EvalReport, Vec<usize>), EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let ranks = examples
        .par_iter()
        .map(|(prompt, target)| {
            let trace = forward(prompt, params, config, false)?;
            rank_of_target(&trace.scores, *target)
        })
        .collect::<Result<Vec<usize>, EvalError>>()?;
    Ok((EvalReport::from_ranks(split, &ranks, ks)?, ranks))
}
