//! Full-ranking evaluation, attention diagnostics and metric slicing.

mod diagnostics;
mod kendall;
mod metrics;

pub use diagnostics::{
    erase_experiment, gradient_importance, kendall_tau_analysis, EraseReport,
};
pub use kendall::tau_b;
pub use metrics::{full_rank, metrics_from_ranks, ndcg_at_k, rank_of_target, recall_at_k};

use std::collections::BTreeMap;

use acrec_autodiff::{Graph, Scalar};
use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::{SequenceBatch, SplitExample};
use crate::error::EvalError;
use crate::model::{forward, predict_scores, Branch, EraseMax, ForwardOptions, ParameterStore};

#[derive(Clone, Debug, Serialize)]
pub struct SliceMetrics {
    pub recall: BTreeMap<u32, f64>,
    pub ndcg: BTreeMap<u32, f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub recall: BTreeMap<u32, f64>,
    pub ndcg: BTreeMap<u32, f64>,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slices: Option<BTreeMap<String, SliceMetrics>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kendall: Option<Vec<f64>>,
}

/// Rank of every example's target under the model's inference attention.
pub fn compute_ranks<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    examples: &[SplitExample],
    batch_size: usize,
    intervention: Option<&EraseMax>,
) -> Result<Vec<usize>, EvalError> {
    let mut ranks = Vec::with_capacity(examples.len());
    let mut calibrator_ops = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&SplitExample> = chunk.iter().collect();
        let batch = SequenceBatch::from_examples(&refs, cfg.n);
        let (row_ranks, ops) = rank_batch(store, cfg, &batch, intervention)?;
        calibrator_ops += ops;
        ranks.extend(row_ranks);
    }
    debug_assert!(
        !cfg.lite_inference || calibrator_ops == 0,
        "lite inference must not execute calibrator operations"
    );
    Ok(ranks)
}

/// Same as [`compute_ranks`] but also reports how many calibrator operations
/// ran (zero under lite inference).
pub fn compute_ranks_counting<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    examples: &[SplitExample],
    batch_size: usize,
) -> Result<(Vec<usize>, usize), EvalError> {
    let mut ranks = Vec::with_capacity(examples.len());
    let mut total_ops = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&SplitExample> = chunk.iter().collect();
        let batch = SequenceBatch::from_examples(&refs, cfg.n);
        let (row_ranks, ops) = rank_batch(store, cfg, &batch, None)?;
        total_ops += ops;
        ranks.extend(row_ranks);
    }
    Ok((ranks, total_ops))
}

fn rank_batch<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    batch: &SequenceBatch,
    intervention: Option<&EraseMax>,
) -> Result<(Vec<usize>, usize), EvalError> {
    let mut g: Graph<F> = Graph::inference();
    let bound = store.bind(&mut g, |_| false);
    let opts = ForwardOptions::inference(Branch::Calibrated);
    let out = forward(&mut g, batch, &bound, cfg, &opts, intervention)?;
    let scores = predict_scores(&mut g, out.hidden, &bound);
    let values = g.value(scores);
    let item_count = store.item_count();
    let mut ranks = Vec::with_capacity(batch.rows);
    for (row, &target) in batch.targets.iter().enumerate() {
        let row_scores = &values.data()[row * item_count..(row + 1) * item_count];
        ranks.push(rank_of_target(row_scores, target));
    }
    Ok((ranks, out.calibrator_ops))
}

/// Recall@K / NDCG@K over all examples.
pub fn evaluate<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    examples: &[SplitExample],
    ks: &[u32],
    batch_size: usize,
) -> Result<MetricsReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::NoData);
    }
    let ranks = compute_ranks(store, cfg, examples, batch_size, None)?;
    let (recall, ndcg) = metrics_from_ranks(&ranks, ks);
    Ok(MetricsReport {
        recall,
        ndcg,
        count: examples.len(),
        slices: None,
        kendall: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceMode {
    Length,
    Popularity,
}

/// Metrics grouped by user training-interaction count or by target item
/// training popularity. `edges` are ascending bucket boundaries; bucket i
/// covers [edges[i], edges[i+1]).
pub fn sliced_metrics<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    test: &[SplitExample],
    train: &[SplitExample],
    mode: SliceMode,
    edges: &[f64],
    ks: &[u32],
    batch_size: usize,
) -> Result<MetricsReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::NoData);
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadEdges);
    }
    // Per-user training footprint from each user's longest training pair.
    let mut user_train: BTreeMap<u32, &SplitExample> = BTreeMap::new();
    for ex in train {
        let slot = user_train.entry(ex.user).or_insert(ex);
        if ex.context.len() > slot.context.len() {
            *slot = ex;
        }
    }
    let mut popularity: BTreeMap<u32, usize> = BTreeMap::new();
    for ex in user_train.values() {
        for &item in ex.context.iter().chain(std::iter::once(&ex.target)) {
            *popularity.entry(item).or_insert(0) += 1;
        }
    }

    let ranks = compute_ranks(store, cfg, test, batch_size, None)?;
    let (recall, ndcg) = metrics_from_ranks(&ranks, ks);

    let bucket_label = |i: usize| -> String {
        let hi = edges[i + 1];
        if hi.is_infinite() {
            format!("[{},inf)", edges[i])
        } else {
            format!("[{},{})", edges[i], hi)
        }
    };
    let mut grouped: BTreeMap<String, Vec<usize>> = (0..edges.len() - 1)
        .map(|i| (bucket_label(i), Vec::new()))
        .collect();
    for (ex, &rank) in test.iter().zip(&ranks) {
        let value = match mode {
            SliceMode::Length => user_train
                .get(&ex.user)
                .map(|e| e.context.len() + 1)
                .unwrap_or(0) as f64,
            SliceMode::Popularity => popularity.get(&ex.target).copied().unwrap_or(0) as f64,
        };
        for i in 0..edges.len() - 1 {
            if value >= edges[i] && value < edges[i + 1] {
                grouped.get_mut(&bucket_label(i)).unwrap().push(rank);
                break;
            }
        }
    }
    let slices = grouped
        .into_iter()
        .map(|(label, bucket_ranks)| {
            let (r, n) = metrics_from_ranks(&bucket_ranks, ks);
            (
                label,
                SliceMetrics {
                    recall: r,
                    ndcg: n,
                    count: bucket_ranks.len(),
                },
            )
        })
        .collect();

    Ok(MetricsReport {
        recall,
        ndcg,
        count: test.len(),
        slices: Some(slices),
        kendall: None,
    })
}
