//! Full-ranking evaluation: per-user rank of the held-out item, Recall@N /
//! NDCG@N / MRR, and bucketed breakdowns.

use crate::data::{BucketAssignment, BucketAxis, BucketSpec};
use crate::data::SequenceDataset;
use crate::error::{CoreError, Result};
use crate::model::{encode_context, score_all_items, ModelParams, ScoreVector};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, HashSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Validation,
    Test,
}

impl EvalSplit {
    fn name(&self) -> &'static str {
        match self {
            EvalSplit::Validation => "validation",
            EvalSplit::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSet {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketReport {
    pub label: String,
    pub size: usize,
    /// `null` for empty buckets, never zero-filled.
    pub metrics: Option<MetricSet>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketBreakdown {
    pub axis: BucketAxis,
    pub edges: Vec<usize>,
    pub buckets: Vec<BucketReport>,
    /// Users whose test item fell below the first edge (possible for
    /// zero-popularity items when edges start above zero).
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankingReport {
    pub split: String,
    pub users: usize,
    pub metrics: MetricSet,
    pub buckets: Option<BucketBreakdown>,
    pub per_user_rank: Vec<(String, usize)>,
}

/// 1-based rank of `target` among the non-excluded candidates: one plus the
/// number of candidates scoring strictly better, with equal-score candidates
/// of smaller id counted first (same tie rule as top-N).
pub fn rank_of(scores: &ScoreVector, target: u32, excluded: &HashSet<u32>) -> Result<usize> {
    if target == 0 || target as usize > scores.num_items() {
        return Err(CoreError::Eval(format!("target {target} out of range")));
    }
    if excluded.contains(&target) {
        return Err(CoreError::Eval(format!(
            "target {target} was filtered out of the candidate set"
        )));
    }
    let ts = scores.get(target);
    if !ts.is_finite() {
        return Err(CoreError::Eval(format!(
            "target {target} has a non-finite score"
        )));
    }
    let mut rank = 1usize;
    for (j, s) in scores.iter_items() {
        if j == target || excluded.contains(&j) {
            continue;
        }
        if s < ts || (s == ts && j < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Aggregates ranks into Recall@N, NDCG@N (single relevant item,
/// `1/log2(rank+1)` gain) and MRR.
pub fn compute_metrics(ranks: &[usize], ns: &[usize]) -> Result<MetricSet> {
    if ranks.is_empty() {
        return Err(CoreError::Eval("empty user set".into()));
    }
    if ranks.contains(&0) {
        return Err(CoreError::Eval("ranks are 1-based".into()));
    }
    let count = ranks.len() as f64;
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &n in ns {
        let hits = ranks.iter().filter(|&&r| r <= n).count() as f64;
        recall.insert(n, hits / count);
        let gain: f64 = ranks
            .iter()
            .filter(|&&r| r <= n)
            .map(|&r| 1.0 / ((r + 1) as f64).log2())
            .sum();
        ndcg.insert(n, gain / count);
    }
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / count;
    Ok(MetricSet { recall, ndcg, mrr })
}

/// Context items, target and candidate exclusions for one user under the
/// ranking protocol: validation ranks the second-to-last item given the
/// train prefix (test item additionally excluded); test ranks the last item
/// given everything before it. Exclusions apply only in exclude-seen mode
/// and never remove the target itself.
fn eval_case(
    dataset: &SequenceDataset,
    u: usize,
    split: EvalSplit,
    exclude_seen: bool,
) -> (Vec<u32>, u32, HashSet<u32>) {
    let seq = dataset.sequence(u);
    let (context, target): (&[u32], u32) = match split {
        EvalSplit::Validation => (&seq[..seq.len() - 2], dataset.val_item(u)),
        EvalSplit::Test => (&seq[..seq.len() - 1], dataset.test_item(u)),
    };
    let mut excluded: HashSet<u32> = HashSet::new();
    if exclude_seen {
        excluded.extend(context.iter().copied());
        if split == EvalSplit::Validation {
            excluded.insert(dataset.test_item(u));
        }
        excluded.remove(&target);
    }
    (context.to_vec(), target, excluded)
}

/// Scores and ranks the held-out item for every user (parallel, collected in
/// user order) and aggregates the configured metrics.
pub fn evaluate(
    model: &ModelParams,
    dataset: &SequenceDataset,
    split: EvalSplit,
    bucket_spec: Option<&BucketSpec>,
) -> Result<RankingReport> {
    if dataset.num_users() == 0 {
        return Err(CoreError::Eval("empty user set".into()));
    }
    let exclude_seen = model.config.exclude_seen;
    let ranks: Vec<(String, usize)> = (1..=dataset.num_users())
        .into_par_iter()
        .map(|u| -> Result<(String, usize)> {
            let (context, target, excluded) = eval_case(dataset, u, split, exclude_seen);
            let state = encode_context(model, &context)?;
            let scores = score_all_items(model, &state)?;
            let rank = rank_of(&scores, target, &excluded)?;
            Ok((dataset.user_name(u).to_string(), rank))
        })
        .collect::<Result<Vec<_>>>()?;

    let plain: Vec<usize> = ranks.iter().map(|(_, r)| *r).collect();
    let metrics = compute_metrics(&plain, &model.config.eval_ns)?;
    let buckets = match bucket_spec {
        Some(spec) => Some(bucketed_metrics(
            dataset,
            spec,
            &plain,
            &model.config.eval_ns,
        )?),
        None => None,
    };
    Ok(RankingReport {
        split: split.name().to_string(),
        users: dataset.num_users(),
        metrics,
        buckets,
        per_user_rank: ranks,
    })
}

/// Groups per-user ranks by bucket. User-axis buckets group by train
/// sequence length; item-axis buckets group each user by the train
/// popularity of their test item.
pub fn bucketed_metrics(
    dataset: &SequenceDataset,
    spec: &BucketSpec,
    ranks: &[usize],
    ns: &[usize],
) -> Result<BucketBreakdown> {
    if ranks.len() != dataset.num_users() {
        return Err(CoreError::Eval(
            "rank vector does not cover every user".into(),
        ));
    }
    let assignment = crate::data::bucketize(dataset, spec)?;
    let mut per_bucket: Vec<Vec<usize>> = vec![Vec::new(); spec.num_buckets()];
    let mut skipped = 0usize;
    match &assignment {
        BucketAssignment::Users { of_user, .. } => {
            for u in 1..=dataset.num_users() {
                per_bucket[of_user[u]].push(ranks[u - 1]);
            }
        }
        BucketAssignment::Items { of_item, .. } => {
            let pop = dataset.train_popularity();
            for u in 1..=dataset.num_users() {
                let item = dataset.test_item(u) as usize;
                let bucket = match of_item[item] {
                    Some(b) => Some(b),
                    // zero train popularity: place by value when the edges
                    // admit it, otherwise skip
                    None => spec.bucket_of(pop[item]).ok(),
                };
                match bucket {
                    Some(b) => per_bucket[b].push(ranks[u - 1]),
                    None => skipped += 1,
                }
            }
        }
    }
    let mut buckets = Vec::with_capacity(spec.num_buckets());
    for (i, bucket_ranks) in per_bucket.iter().enumerate() {
        let metrics = if bucket_ranks.is_empty() {
            None
        } else {
            Some(compute_metrics(bucket_ranks, ns)?)
        };
        buckets.push(BucketReport {
            label: spec.label(i),
            size: bucket_ranks.len(),
            metrics,
        });
    }
    Ok(BucketBreakdown {
        axis: spec.axis,
        edges: spec.edges.clone(),
        buckets,
        skipped,
    })
}

/// Writes per-user ranks as CSV for offline analysis.
pub fn ranks_to_csv(report: &RankingReport) -> String {
    let mut out = String::from("user,rank\n");
    for (user, rank) in &report.per_user_rank {
        out.push_str(&format!("{user},{rank}\n"));
    }
    out
}

/// Side-by-side comparison of two reports with per-metric relative
/// improvement percentages and per-bucket MRR deltas.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub a: MetricSet,
    pub b: MetricSet,
    pub improvement_pct: BTreeMap<String, f64>,
    pub bucket_delta: Option<Vec<(String, Option<f64>, Option<f64>)>>,
}

pub fn compare_reports(a: &RankingReport, b: &RankingReport) -> Comparison {
    let mut improvement = BTreeMap::new();
    let pct = |x: f64, y: f64| {
        if y == 0.0 {
            f64::NAN
        } else {
            (x - y) / y * 100.0
        }
    };
    improvement.insert("mrr".to_string(), pct(a.metrics.mrr, b.metrics.mrr));
    for (n, r) in &a.metrics.recall {
        if let Some(rb) = b.metrics.recall.get(n) {
            improvement.insert(format!("recall@{n}"), pct(*r, *rb));
        }
    }
    for (n, r) in &a.metrics.ndcg {
        if let Some(rb) = b.metrics.ndcg.get(n) {
            improvement.insert(format!("ndcg@{n}"), pct(*r, *rb));
        }
    }
    let bucket_delta = match (&a.buckets, &b.buckets) {
        (Some(ba), Some(bb)) if ba.buckets.len() == bb.buckets.len() => Some(
            ba.buckets
                .iter()
                .zip(bb.buckets.iter())
                .map(|(x, y)| {
                    (
                        x.label.clone(),
                        x.metrics.as_ref().map(|m| m.mrr),
                        y.metrics.as_ref().map(|m| m.mrr),
                    )
                })
                .collect(),
        ),
        _ => None,
    };
    Comparison {
        a: a.metrics.clone(),
        b: b.metrics.clone(),
        improvement_pct: improvement,
        bucket_delta,
    }
}
