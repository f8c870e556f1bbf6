//! Attention-quality diagnostics: the erasing experiment, gradient-based
//! importance and the attention/importance rank-correlation analysis.

use std::collections::BTreeMap;

use acrec_autodiff::{Graph, Scalar};
use serde::Serialize;

use crate::config::ModelConfig;
use crate::data::{SequenceBatch, SplitExample};
use crate::error::EvalError;
use crate::eval::kendall::tau_b;
use crate::eval::metrics::metrics_from_ranks;
use crate::eval::{compute_ranks, MetricsReport};
use crate::model::params::names;
use crate::model::{
    embed, encode, BatchMasks, Branch, EraseMax, ForwardOptions, HeadSelection, ParameterStore,
};

#[derive(Clone, Debug, Serialize)]
pub struct EraseReport {
    pub layer: usize,
    /// `None` means the erased key is picked on the head-averaged row and
    /// removed from every head.
    pub head: Option<usize>,
    pub original: MetricsReport,
    pub erased: MetricsReport,
    /// (erased - original) / original per metric, e.g. "recall@20".
    pub relative_change: BTreeMap<String, f64>,
    /// Sequences with fewer than two valid keys, excluded from both sides.
    pub skipped: usize,
}

/// Remove the largest attention entry of the final query row at one layer,
/// renormalize, and measure the damage against the untouched model.
pub fn erase_experiment<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    examples: &[SplitExample],
    layer: Option<usize>,
    head: Option<usize>,
    ks: &[u32],
    batch_size: usize,
) -> Result<EraseReport, EvalError> {
    let layer = layer.unwrap_or(cfg.layers - 1);
    let (kept, skipped): (Vec<SplitExample>, Vec<SplitExample>) = examples
        .iter()
        .cloned()
        .partition(|ex| ex.context.len().min(cfg.n) >= 2);
    if kept.is_empty() {
        return Err(EvalError::NoData);
    }
    let erase = EraseMax {
        layer,
        head: match head {
            Some(h) => HeadSelection::Single(h),
            None => HeadSelection::All,
        },
    };
    let original_ranks = compute_ranks(store, cfg, &kept, batch_size, None)?;
    let erased_ranks = compute_ranks(store, cfg, &kept, batch_size, Some(&erase))?;
    let (ro, no) = metrics_from_ranks(&original_ranks, ks);
    let (re, ne) = metrics_from_ranks(&erased_ranks, ks);
    let mut relative_change = BTreeMap::new();
    for &k in ks {
        let rel = |orig: f64, new: f64| {
            if orig == 0.0 {
                0.0
            } else {
                (new - orig) / orig
            }
        };
        relative_change.insert(format!("recall@{k}"), rel(ro[&k], re[&k]));
        relative_change.insert(format!("ndcg@{k}"), rel(no[&k], ne[&k]));
    }
    let count = kept.len();
    Ok(EraseReport {
        layer,
        head,
        original: MetricsReport {
            recall: ro,
            ndcg: no,
            count,
            slices: None,
            kendall: None,
        },
        erased: MetricsReport {
            recall: re,
            ndcg: ne,
            count,
            slices: None,
            kendall: None,
        },
        relative_change,
        skipped: skipped.len(),
    })
}

/// Euclidean norm of the gradient of the target-item logit with respect to
/// each real position's input embedding, oldest position first.
pub fn gradient_importance<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    example: &SplitExample,
) -> Result<Vec<f64>, EvalError> {
    let batch = SequenceBatch::from_examples(&[example], cfg.n);
    let masks = BatchMasks::build(&batch);
    let mut g: Graph<F> = Graph::new();
    let bound = store.bind(&mut g, |_| false);
    let emb = embed(&mut g, &masks, &bound, cfg, store.item_count())?;
    // Re-enter the embeddings as a tracked leaf so the adjoint stops there.
    let emb_value = g.value(emb).clone();
    let emb_leaf = g.leaf(emb_value);
    let opts = ForwardOptions::inference(Branch::Calibrated);
    let out = encode(&mut g, emb_leaf, &masks, &bound, cfg, &opts, None)?;
    let f_n = g.last_position(out.hidden);
    let logits = g.matmul_nt(f_n, bound.var(names::ITEM_TABLE));
    let target_logit = g.pick(logits, 0, example.target as usize);
    let mut grads = g.backward(target_logit);
    let de = grads
        .take(emb_leaf)
        .expect("embedding leaf must receive a gradient");
    let d = cfg.d;
    let mut importance = Vec::new();
    for pos in 0..cfg.n {
        if !masks.valid[pos] {
            continue;
        }
        let row = &de.data()[pos * d..(pos + 1) * d];
        let norm: f64 = row.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        importance.push(norm);
    }
    Ok(importance)
}

/// Mean Kendall tau-b per layer between the final query position's
/// inference attention row (heads averaged) and gradient importance, over
/// all test sequences with at least two valid keys.
pub fn kendall_tau_analysis<F: Scalar>(
    store: &ParameterStore<F>,
    cfg: &ModelConfig,
    examples: &[SplitExample],
) -> Result<Vec<f64>, EvalError> {
    let mut sums = vec![0.0; cfg.layers];
    let mut counts = vec![0usize; cfg.layers];
    for example in examples {
        if example.context.len().min(cfg.n) < 2 {
            continue;
        }
        let importance = gradient_importance(store, cfg, example)?;
        let batch = SequenceBatch::from_examples(&[example], cfg.n);
        let mut g: Graph<F> = Graph::inference();
        let bound = store.bind(&mut g, |_| false);
        let opts = ForwardOptions {
            keep_trace: true,
            ..ForwardOptions::inference(Branch::Calibrated)
        };
        let out = crate::model::forward(&mut g, &batch, &bound, cfg, &opts, None)?;
        let trace = out.trace.expect("trace requested");
        let masks = BatchMasks::build(&batch);
        let n = cfg.n;
        let valid_keys: Vec<usize> = (0..n).filter(|&j| masks.valid[j]).collect();
        for (layer, arts) in trace.layers.iter().enumerate() {
            let att = &arts.final_attention;
            let mut head_taus = Vec::new();
            for h in 0..cfg.heads {
                let row: Vec<f64> = valid_keys
                    .iter()
                    .map(|&j| att.data()[(h * n + (n - 1)) * n + j].as_f64())
                    .collect();
                if let Some(t) = tau_b(&row, &importance) {
                    head_taus.push(t);
                }
            }
            if !head_taus.is_empty() {
                sums[layer] += head_taus.iter().sum::<f64>() / head_taus.len() as f64;
                counts[layer] += 1;
            }
        }
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(EvalError::NoData);
    }
    Ok(sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect())
}
