//! Synthetic interaction corpora driven by an item-level Markov chain.
//!
//! Transitions depend only on item identity. With `title_noise` the titles
//! are random words that carry no information about the chain, so any
//! predictive signal has to come from learning which items follow which.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CatalogRecord, DataError, Event, InteractionSequence};

pub const MIN_TITLE_LEN: usize = 2;
pub const MAX_TITLE_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub seq_len: usize,
    /// Row-stochastic `n_items × n_items` matrix.
    pub transition: Vec<Vec<f64>>,
    pub title_noise: bool,
    /// Number of distinct words noise titles are drawn from.
    pub noise_vocab: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_items == 0 || self.n_users == 0 || self.seq_len == 0 {
            return bad("n_items, n_users and seq_len must be positive".into());
        }
        if self.title_noise && self.noise_vocab == 0 {
            return bad("noise_vocab must be positive".into());
        }
        if self.transition.len() != self.n_items {
            return bad(format!(
                "transition has {} rows for {} items",
                self.transition.len(),
                self.n_items
            ));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != self.n_items {
                return bad(format!("row {i} has {} entries", row.len()));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return bad(format!("row {i} has a negative or non-finite entry"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return bad(format!("row {i} sums to {s}"));
            }
        }
        Ok(())
    }
}

/// Each item gets `out_degree` distinct random successors with random
/// weights.
pub fn sparse_transition(n_items: usize, out_degree: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = out_degree.clamp(1, n_items);
    (0..n_items)
        .map(|_| {
            let mut row = vec![0.0; n_items];
            for idx in rand::seq::index::sample(&mut rng, n_items, k) {
                row[idx] = rng.random_range(0.2..1.0);
            }
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
            row
        })
        .collect()
}

fn sample_row(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Deterministic corpus for `spec`: one Markov walk per user starting from a
/// uniformly drawn item, with increasing timestamps.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(Vec<InteractionSequence>, Vec<CatalogRecord>), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let catalog = (0..spec.n_items)
        .map(|i| {
            let title = if spec.title_noise {
                let len = rng.random_range(MIN_TITLE_LEN..=MAX_TITLE_LEN);
                (0..len)
                    .map(|_| format!("w{}", rng.random_range(0..spec.noise_vocab)))
                    .collect::<Vec<_>>()
                    .join(" ")
            } else {
                format!("item i{i}")
            };
            CatalogRecord {
                item_id: i as u64,
                title,
            }
        })
        .collect();

    let sequences = (0..spec.n_users)
        .map(|u| {
            let mut t: i64 = rng.random_range(0..1_000_000);
            let mut item = rng.random_range(0..spec.n_items);
            let mut events = Vec::with_capacity(spec.seq_len);
            for step in 0..spec.seq_len {
                if step > 0 {
                    item = sample_row(&spec.transition[item], &mut rng);
                    t += rng.random_range(60..3600);
                }
                events.push(Event {
                    item_id: item as u64,
                    timestamp: t,
                });
            }
            InteractionSequence {
                user_id: u as u64,
                events,
            }
        })
        .collect();
    Ok((sequences, catalog))
}
