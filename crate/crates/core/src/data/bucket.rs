//! Bucket assignment for grouped metric breakdowns.

use super::sequences::SequenceDataset;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BucketAxis {
    /// Users grouped by train-sequence length.
    SequenceLength,
    /// Items grouped by train-interaction count.
    ItemPopularity,
}

/// Strictly increasing edges; bucket i covers `[edges[i], edges[i+1])` and
/// the last bucket is open-ended.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BucketSpec {
    pub axis: BucketAxis,
    pub edges: Vec<usize>,
}

impl BucketSpec {
    pub fn validate(&self) -> Result<()> {
        if self.edges.is_empty() {
            return Err(CoreError::Data("bucket edges must be non-empty".into()));
        }
        if !self.edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::Data(
                "bucket edges must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn num_buckets(&self) -> usize {
        self.edges.len()
    }

    /// Index of the half-open bucket containing `value`.
    pub fn bucket_of(&self, value: usize) -> Result<usize> {
        if value < self.edges[0] {
            return Err(CoreError::Data(format!(
                "value {value} below the first bucket edge {}",
                self.edges[0]
            )));
        }
        Ok(self
            .edges
            .iter()
            .rposition(|&e| e <= value)
            .expect("checked above"))
    }

    /// Human-readable label for bucket i, e.g. "[4, 8)" or "[8, inf)".
    pub fn label(&self, i: usize) -> String {
        match self.edges.get(i + 1) {
            Some(hi) => format!("[{}, {})", self.edges[i], hi),
            None => format!("[{}, inf)", self.edges[i]),
        }
    }
}

/// Per-entity bucket indices. Users are indexed 1..=|U|; items 1..=|V| with
/// `None` for items that never appear in a train portion.
#[derive(Debug, Clone)]
pub enum BucketAssignment {
    Users { spec: BucketSpec, of_user: Vec<usize> },
    Items { spec: BucketSpec, of_item: Vec<Option<usize>> },
}

/// Maps every user (by train-sequence length) or every train-active item (by
/// train-interaction count) to exactly one bucket.
pub fn bucketize(dataset: &SequenceDataset, spec: &BucketSpec) -> Result<BucketAssignment> {
    spec.validate()?;
    match spec.axis {
        BucketAxis::SequenceLength => {
            let mut of_user = vec![0usize; dataset.num_users() + 1];
            for u in 1..=dataset.num_users() {
                of_user[u] = spec.bucket_of(dataset.train_portion(u).len())?;
            }
            Ok(BucketAssignment::Users {
                spec: spec.clone(),
                of_user,
            })
        }
        BucketAxis::ItemPopularity => {
            let pop = dataset.train_popularity();
            let mut of_item = vec![None; dataset.num_items() + 1];
            for item in 1..=dataset.num_items() {
                if pop[item] >= 1 {
                    of_item[item] = Some(spec.bucket_of(pop[item])?);
                }
            }
            Ok(BucketAssignment::Items {
                spec: spec.clone(),
                of_item,
            })
        }
    }
}

/// Quartile-based default edges for an empirical value distribution; used
/// when no explicit edges are configured.
pub fn quartile_edges(values: &[usize]) -> Vec<usize> {
    if values.is_empty() {
        return vec![0];
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let q = |f: f64| sorted[((sorted.len() - 1) as f64 * f).floor() as usize];
    let mut edges = vec![sorted[0], q(0.25), q(0.5), q(0.75)];
    edges.dedup();
    edges
}
