//! Two-branch adversarial training: the calibrated loss trains the backbone
//! group, the perturbation objective trains the mask projections, and both
//! groups step together under Adam.

use std::collections::HashMap;

use acrec_autodiff::{central_diff, max_rel_err, Graph, Scalar, Tensor, Var};
use serde::Serialize;

use crate::config::{ModelConfig, RunConfig};
use crate::data::{batch as make_batches, SequenceBatch, SplitSet};
use crate::error::TrainError;
use crate::eval;
use crate::model::{
    cross_entropy, forward, predict_scores, Branch, ForwardOptions, ParamGroup, ParameterStore,
};

/// All scalar losses of one step. The identities
/// `l_p_final = -l_p + alpha * l_norm` and `l_final = l_p_final + l_c` hold
/// by construction.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct LossBundle {
    pub l_c: f64,
    pub l_p: f64,
    pub l_norm: f64,
    pub l_p_final: f64,
    pub l_final: f64,
}

/// -L_P + alpha * L_norm.
pub fn perturbation_objective(l_p: f64, l_norm: f64, alpha: f64) -> f64 {
    -l_p + alpha * l_norm
}

/// Value-level mask-norm penalty from traced masks: per layer and head the
/// Euclidean norm of (1 - M) over all entries (invalid ones are exactly 1
/// and contribute nothing), averaged over batch rows, summed over layers and
/// heads.
pub fn norm_penalty<F: Scalar>(masks: &[Tensor<F>]) -> f64 {
    let mut total = 0.0;
    for m in masks {
        let shape = m.shape();
        let (b, h) = (shape[0], shape[1]);
        let nn = shape[2] * shape[3];
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * nn;
                let ss: f64 = m.data()[base..base + nn]
                    .iter()
                    .map(|&x| {
                        let v = 1.0 - x.as_f64();
                        v * v
                    })
                    .sum();
                total += ss.sqrt() / b as f64;
            }
        }
    }
    total
}

/// Graph-side mask-norm penalty over the perturbed branch's mask variables.
pub fn norm_penalty_graph<F: Scalar>(g: &mut Graph<F>, mask_vars: &[Var]) -> Var {
    assert!(!mask_vars.is_empty(), "norm penalty needs at least one mask");
    let mut total: Option<Var> = None;
    for &m in mask_vars {
        let b = g.value(m).shape()[0];
        let om = g.one_minus(m);
        let sq = g.mul(om, om);
        let per_row = g.sum_last2(sq);
        let norms = g.sqrt(per_row);
        let summed = g.sum_all(norms);
        let layer_term = g.scale(summed, F::from_f64(1.0 / b as f64));
        total = Some(match total {
            Some(t) => g.add(t, layer_term),
            None => layer_term,
        });
    }
    total.unwrap()
}

/// Cross-entropy of the calibrated branch. Only backbone parameters are
/// differentiable here.
pub fn calibrated_loss<F: Scalar>(
    store: &ParameterStore<F>,
    batch: &SequenceBatch,
    cfg: &ModelConfig,
    dropout_seed: u64,
) -> Result<f64, TrainError> {
    let mut g: Graph<F> = Graph::inference();
    let bound = store.bind(&mut g, |_| false);
    let opts = ForwardOptions::training(Branch::Calibrated, dropout_seed);
    let out = forward(&mut g, batch, &bound, cfg, &opts, None)?;
    let probs = predict_scores(&mut g, out.hidden, &bound);
    let loss = cross_entropy(&mut g, probs, &batch.targets);
    Ok(g.value(loss).item().as_f64())
}

/// Cross-entropy of the perturbed branch (requires the adversarial
/// calibrator).
pub fn perturbed_loss<F: Scalar>(
    store: &ParameterStore<F>,
    batch: &SequenceBatch,
    cfg: &ModelConfig,
    dropout_seed: u64,
) -> Result<f64, TrainError> {
    let mut g: Graph<F> = Graph::inference();
    let bound = store.bind(&mut g, |_| false);
    let opts = ForwardOptions::training(Branch::Perturbed, dropout_seed);
    let out = forward(&mut g, batch, &bound, cfg, &opts, None)?;
    let probs = predict_scores(&mut g, out.hidden, &bound);
    let loss = cross_entropy(&mut g, probs, &batch.targets);
    Ok(g.value(loss).item().as_f64())
}

/// Gradients of one step, already routed: backbone tensors from the
/// calibrated loss, perturbation tensors from the perturbation objective.
pub struct StepGrads<F: Scalar> {
    pub backbone: Vec<(String, Tensor<F>)>,
    pub perturbation: Vec<(String, Tensor<F>)>,
}

pub fn compute_step<F: Scalar>(
    store: &ParameterStore<F>,
    batch: &SequenceBatch,
    cfg: &ModelConfig,
    dropout_seed: u64,
) -> Result<(LossBundle, StepGrads<F>), TrainError> {
    // Calibrated branch: backbone group tracked, perturbation constant.
    let mut g1: Graph<F> = Graph::new();
    let bound1 = store.bind(&mut g1, |grp| grp == ParamGroup::Backbone);
    let opts1 = ForwardOptions::training(Branch::Calibrated, dropout_seed);
    let out1 = forward(&mut g1, batch, &bound1, cfg, &opts1, None)?;
    let probs1 = predict_scores(&mut g1, out1.hidden, &bound1);
    let lc_var = cross_entropy(&mut g1, probs1, &batch.targets);
    let l_c = g1.value(lc_var).item().as_f64();
    let mut grads1 = g1.backward(lc_var);
    let backbone = store.collect_grads(&bound1, &mut grads1, |grp| grp == ParamGroup::Backbone);
    drop(g1);

    // Perturbed branch: perturbation group tracked, backbone constant.
    let (l_p, l_norm, perturbation) = if cfg.adversarial_enabled {
        let mut g2: Graph<F> = Graph::new();
        let bound2 = store.bind(&mut g2, |grp| grp == ParamGroup::Perturbation);
        let opts2 = ForwardOptions::training(Branch::Perturbed, dropout_seed.wrapping_add(1));
        let out2 = forward(&mut g2, batch, &bound2, cfg, &opts2, None)?;
        let probs2 = predict_scores(&mut g2, out2.hidden, &bound2);
        let lp_var = cross_entropy(&mut g2, probs2, &batch.targets);
        let lnorm_var = norm_penalty_graph(&mut g2, &out2.mask_vars);
        let neg_lp = g2.neg(lp_var);
        let alpha_term = g2.scale(lnorm_var, F::from_f64(cfg.alpha));
        let lpf_var = g2.add(neg_lp, alpha_term);
        let l_p = g2.value(lp_var).item().as_f64();
        let l_norm = g2.value(lnorm_var).item().as_f64();
        let mut grads2 = g2.backward(lpf_var);
        let perturbation =
            store.collect_grads(&bound2, &mut grads2, |grp| grp == ParamGroup::Perturbation);
        (l_p, l_norm, perturbation)
    } else {
        (0.0, 0.0, Vec::new())
    };

    // Routing is structural: each gradient list only ever contains its own
    // group.
    debug_assert!(backbone
        .iter()
        .all(|(n, _)| store.group_of(n) == Some(ParamGroup::Backbone)));
    debug_assert!(perturbation
        .iter()
        .all(|(n, _)| store.group_of(n) == Some(ParamGroup::Perturbation)));

    let l_p_final = if cfg.adversarial_enabled {
        perturbation_objective(l_p, l_norm, cfg.alpha)
    } else {
        0.0
    };
    let bundle = LossBundle {
        l_c,
        l_p,
        l_norm,
        l_p_final,
        l_final: l_p_final + l_c,
    };
    Ok((bundle, StepGrads { backbone, perturbation }))
}

/// Adam with bias correction; state is keyed by parameter name.
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Tensor<F>>,
    v: HashMap<String, Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over the given gradients; `clip` caps the global gradient
    /// norm across everything passed in.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<F>,
        grads: &[(String, Tensor<F>)],
        clip: Option<f64>,
    ) {
        self.t += 1;
        let scale = match clip {
            Some(cap) => {
                let sq: f64 = grads
                    .iter()
                    .flat_map(|(_, g)| g.iter())
                    .map(|&x| x.as_f64() * x.as_f64())
                    .sum();
                let norm = sq.sqrt();
                if norm > cap {
                    cap / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let one_m_b1 = F::from_f64(1.0 - self.beta1);
        let one_m_b2 = F::from_f64(1.0 - self.beta2);
        let lr = F::from_f64(self.lr / bc1);
        let denom_scale = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(self.eps);
        let gscale = F::from_f64(scale);
        for (name, grad) in grads {
            let param = store.get_mut(name).expect("gradient for unknown parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let pd = param.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = grad.data()[i] * gscale;
                md[i] = b1 * md[i] + one_m_b1 * gi;
                vd[i] = b2 * vd[i] + one_m_b2 * gi * gi;
                pd[i] = pd[i] - lr * md[i] / ((vd[i]).sqrt() * denom_scale + eps);
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_c: f64,
    pub l_p: f64,
    pub l_norm: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "recall@20")]
    pub recall_20: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
    #[serde(rename = "ndcg@20")]
    pub ndcg_20: f64,
}

pub struct TrainOutcome<F: Scalar> {
    pub best: ParameterStore<F>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// One optimizer step on one batch.
pub fn train_step<F: Scalar>(
    store: &mut ParameterStore<F>,
    adam: &mut Adam<F>,
    batch: &SequenceBatch,
    cfg: &ModelConfig,
    dropout_seed: u64,
    grad_clip: Option<f64>,
    update: GroupUpdate,
) -> Result<LossBundle, TrainError> {
    let (bundle, grads) = compute_step(store, batch, cfg, dropout_seed)?;
    if !bundle.l_final.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: 0,
            step: 0,
            diagnostics: format!("{bundle:?}"),
        });
    }
    let mut merged: Vec<(String, Tensor<F>)> = Vec::new();
    if update.backbone {
        merged.extend(grads.backbone);
    }
    if update.perturbation {
        merged.extend(grads.perturbation);
    }
    adam.step(store, &merged, grad_clip);
    Ok(bundle)
}

#[derive(Clone, Copy, Debug)]
pub struct GroupUpdate {
    pub backbone: bool,
    pub perturbation: bool,
}

impl GroupUpdate {
    pub fn both() -> Self {
        GroupUpdate {
            backbone: true,
            perturbation: true,
        }
    }
}

/// Full training loop with per-epoch validation metrics and optional early
/// stopping on validation NDCG@10.
pub fn train<F: Scalar>(split: &SplitSet, run: &RunConfig, item_count: usize) -> Result<TrainOutcome<F>, TrainError> {
    if split.train.is_empty() {
        return Err(TrainError::NoData);
    }
    let cfg = &run.model;
    let mut store: ParameterStore<F> = ParameterStore::init(cfg, item_count, run.seed, 0.02);
    let mut adam = Adam::new(run.learning_rate);
    let mut best = store.clone();
    let mut best_epoch = 0usize;
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut patience_left = run.patience;
    let mut log = Vec::new();

    for epoch in 0..run.epochs {
        let epoch_seed = run
            .seed
            .wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let batches = make_batches(&split.train, cfg.n, run.batch_size, epoch_seed);
        let update = if run.alternating {
            GroupUpdate {
                backbone: epoch % 2 == 0,
                perturbation: epoch % 2 == 1,
            }
        } else {
            GroupUpdate::both()
        };
        let mut sums = (0.0, 0.0, 0.0);
        for (step, batch) in batches.iter().enumerate() {
            let dropout_seed = epoch_seed.wrapping_add(step as u64 * 2 + 1);
            let bundle =
                train_step(&mut store, &mut adam, batch, cfg, dropout_seed, run.grad_clip, update)
                    .map_err(|e| match e {
                        TrainError::NonFinite { diagnostics, .. } => TrainError::NonFinite {
                            epoch,
                            step,
                            diagnostics,
                        },
                        other => other,
                    })?;
            sums.0 += bundle.l_c;
            sums.1 += bundle.l_p;
            sums.2 += bundle.l_norm;
        }
        let nb = batches.len().max(1) as f64;

        let report = eval::evaluate(&store, cfg, &split.valid, &[10, 20], run.batch_size)
            .map_err(|_| TrainError::NoData)?;
        let record = EpochRecord {
            epoch,
            l_c: sums.0 / nb,
            l_p: sums.1 / nb,
            l_norm: sums.2 / nb,
            recall_10: report.recall[&10],
            recall_20: report.recall[&20],
            ndcg_10: report.ndcg[&10],
            ndcg_20: report.ndcg[&20],
        };
        let ndcg10 = record.ndcg_10;
        log.push(record);
        if ndcg10 > best_ndcg {
            best_ndcg = ndcg10;
            best = store.clone();
            best_epoch = epoch;
            patience_left = run.patience;
        } else if run.patience > 0 {
            patience_left -= 1;
            if patience_left == 0 {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        log,
    })
}

/// Loss used for a tensor's finite-difference check, respecting the routing:
/// backbone tensors against the calibrated loss, perturbation tensors
/// against the perturbation objective.
fn routed_loss(
    store: &ParameterStore<f64>,
    batch: &SequenceBatch,
    cfg: &ModelConfig,
    group: ParamGroup,
) -> f64 {
    match group {
        ParamGroup::Backbone => calibrated_loss(store, batch, cfg, 0).expect("loss"),
        ParamGroup::Perturbation => {
            let mut g: Graph<f64> = Graph::inference();
            let bound = store.bind(&mut g, |_| false);
            let opts = ForwardOptions::training(Branch::Perturbed, 1);
            let out = forward(&mut g, batch, &bound, cfg, &opts, None).expect("forward");
            let probs = predict_scores(&mut g, out.hidden, &bound);
            let lp = cross_entropy(&mut g, probs, &batch.targets);
            let ln = norm_penalty_graph(&mut g, &out.mask_vars);
            perturbation_objective(g.value(lp).item(), g.value(ln).item(), cfg.alpha)
        }
    }
}

/// Maximum relative error between the analytic gradient of `tensor_name`
/// and central finite differences at 64-bit precision. The fixture must run
/// without dropout.
pub fn finite_difference_check(
    store: &ParameterStore<f64>,
    batch: &SequenceBatch,
    cfg: &ModelConfig,
    tensor_name: &str,
    step: f64,
) -> Result<f64, TrainError> {
    assert_eq!(cfg.dropout, 0.0, "gradient checks need dropout = 0");
    let group = store
        .group_of(tensor_name)
        .unwrap_or_else(|| panic!("unknown tensor {tensor_name}"));
    let (_, grads) = compute_step(store, batch, cfg, 0)?;
    let all: Vec<&(String, Tensor<f64>)> = grads
        .backbone
        .iter()
        .chain(grads.perturbation.iter())
        .collect();
    let analytic = &all
        .iter()
        .find(|(n, _)| n == tensor_name)
        .unwrap_or_else(|| panic!("no gradient entry for {tensor_name}"))
        .1;

    let base = store.get(tensor_name).unwrap().clone();
    let numeric = central_diff(
        |point| {
            let mut probe = store.clone();
            *probe.get_mut(tensor_name).unwrap() = Tensor::new(base.shape(), point.to_vec());
            routed_loss(&probe, batch, cfg, group)
        },
        base.data(),
        step,
    );
    let analytic_v: Vec<f64> = analytic.data().to_vec();
    Ok(max_rel_err(&analytic_v, &numeric, 1e-6))
}

/// Analytic gradient of the *other* group's objective with respect to a
/// tensor; routing makes this identically zero by construction.
pub fn cross_objective_grad(
    store: &ParameterStore<f64>,
    batch: &SequenceBatch,
    cfg: &ModelConfig,
    tensor_name: &str,
) -> Result<Tensor<f64>, TrainError> {
    let group = store
        .group_of(tensor_name)
        .unwrap_or_else(|| panic!("unknown tensor {tensor_name}"));
    let shape = store.get(tensor_name).unwrap().shape().to_vec();
    match group {
        // Backbone tensor against the perturbation objective.
        ParamGroup::Backbone => {
            let mut g: Graph<f64> = Graph::new();
            let bound = store.bind(&mut g, |grp| grp == ParamGroup::Perturbation);
            let opts = ForwardOptions::training(Branch::Perturbed, 1);
            let out = forward(&mut g, batch, &bound, cfg, &opts, None)?;
            let probs = predict_scores(&mut g, out.hidden, &bound);
            let lp = cross_entropy(&mut g, probs, &batch.targets);
            let ln = norm_penalty_graph(&mut g, &out.mask_vars);
            let neg = g.neg(lp);
            let a = g.scale(ln, cfg.alpha);
            let lpf = g.add(neg, a);
            let mut grads = g.backward(lpf);
            Ok(grads
                .take(bound.var(tensor_name))
                .unwrap_or_else(|| Tensor::zeros(&shape)))
        }
        // Perturbation tensor against the calibrated loss.
        ParamGroup::Perturbation => {
            let mut g: Graph<f64> = Graph::new();
            let bound = store.bind(&mut g, |grp| grp == ParamGroup::Backbone);
            let opts = ForwardOptions::training(Branch::Calibrated, 0);
            let out = forward(&mut g, batch, &bound, cfg, &opts, None)?;
            let probs = predict_scores(&mut g, out.hidden, &bound);
            let lc = cross_entropy(&mut g, probs, &batch.targets);
            let mut grads = g.backward(lc);
            Ok(grads
                .take(bound.var(tensor_name))
                .unwrap_or_else(|| Tensor::zeros(&shape)))
        }
    }
}
