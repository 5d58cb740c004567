//! TSV ingestion and k-core filtering.

use crate::error::{CoreError, Result};
use std::collections::HashMap;
use std::io::BufRead;

/// One `(user, item, timestamp)` event, the ingestion atom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Outcome of parsing a stream: well-formed records in file order plus a
/// trace of every malformed line.
#[derive(Debug, Default)]
pub struct ParseReport {
    pub interactions: Vec<Interaction>,
    /// (1-based line number, reason)
    pub malformed: Vec<(usize, String)>,
}

/// Parses tab-separated `user<TAB>item<TAB>timestamp` lines. Extra fields are
/// ignored; malformed lines are recorded, not silently dropped.
pub fn parse_interactions<R: BufRead>(reader: R) -> Result<ParseReport> {
    let mut report = ParseReport::default();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CoreError::Ingest(format!("read failed: {e}")))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let user = fields.next().unwrap_or("");
        let item = fields.next();
        let ts = fields.next();
        let (item, ts) = match (item, ts) {
            (Some(i), Some(t)) => (i, t),
            _ => {
                report
                    .malformed
                    .push((lineno + 1, "fewer than 3 fields".to_string()));
                continue;
            }
        };
        if user.is_empty() || item.is_empty() {
            report
                .malformed
                .push((lineno + 1, "empty user or item id".to_string()));
            continue;
        }
        let timestamp = match ts.trim().parse::<i64>() {
            Ok(t) => t,
            Err(_) => {
                report
                    .malformed
                    .push((lineno + 1, format!("non-integer timestamp `{ts}`")));
                continue;
            }
        };
        report.interactions.push(Interaction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KCoreMode {
    /// Single pass dropping users with fewer than k interactions.
    UserOnly,
    /// Alternate user- and item-side filtering until a fixpoint.
    UserItemIterative,
}

/// Retains interactions of users with at least `k` events. Repeated items
/// count; relative order is preserved; items are not filtered.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    assert!(k >= 1, "k must be positive");
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for it in interactions {
        *counts.entry(it.user.as_str()).or_default() += 1;
    }
    interactions
        .iter()
        .filter(|it| counts[it.user.as_str()] >= k)
        .cloned()
        .collect()
}

/// Iterative user+item k-core: repeatedly drop users and items with fewer
/// than `k` remaining interactions until both sides are stable.
pub fn k_core_filter_iterative(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    assert!(k >= 1, "k must be positive");
    let mut kept: Vec<Interaction> = interactions.to_vec();
    loop {
        let mut users: HashMap<String, usize> = HashMap::new();
        let mut items: HashMap<String, usize> = HashMap::new();
        for it in &kept {
            *users.entry(it.user.clone()).or_default() += 1;
            *items.entry(it.item.clone()).or_default() += 1;
        }
        let before = kept.len();
        kept.retain(|it| users[&it.user] >= k && items[&it.item] >= k);
        if kept.len() == before {
            return kept;
        }
    }
}
