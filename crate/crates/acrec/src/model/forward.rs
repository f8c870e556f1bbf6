use std::sync::Arc;

use acrec_autodiff::{Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{self, ValidityMasks};
use crate::config::{ModelConfig, PositionMode};
use crate::data::SequenceBatch;
use crate::error::ModelError;
use crate::model::params::{names, BoundParams};
use crate::model::trace::{LayerArtifacts, LayerTrace};
use crate::spatial::{self, SpatialTargets};

const LN_EPS: f64 = 1e-8;
/// Probability floor applied before the cross-entropy log.
pub const CE_FLOOR: f64 = 1e-12;

/// Which attention map drives the block stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Spatially calibrated attention only (A_s; plain A when spatial off).
    Clean,
    /// Full calibrated path (A_comb when the adversarial calibrator is on).
    Calibrated,
    /// Perturbed path (A_p); requires the adversarial calibrator.
    Perturbed,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub branch: Branch,
    /// Training mode: dropout is active and lite inference does not bypass
    /// the calibrators.
    pub training: bool,
    pub keep_trace: bool,
    pub dropout_seed: u64,
}

impl ForwardOptions {
    pub fn inference(branch: Branch) -> Self {
        ForwardOptions {
            branch,
            training: false,
            keep_trace: false,
            dropout_seed: 0,
        }
    }

    pub fn training(branch: Branch, dropout_seed: u64) -> Self {
        ForwardOptions {
            branch,
            training: true,
            keep_trace: false,
            dropout_seed,
        }
    }
}

/// Head choice for attention diagnostics.
#[derive(Clone, Copy, Debug)]
pub enum HeadSelection {
    /// Pick the erased key from the head-averaged row, erase in every head.
    All,
    Single(usize),
}

/// Inference-time intervention: at `layer`, zero the largest entry of the
/// final query position's attention row and rescale the row to its original
/// mass.
#[derive(Clone, Copy, Debug)]
pub struct EraseMax {
    pub layer: usize,
    pub head: HeadSelection,
}

pub struct ForwardOutput<F: Scalar> {
    /// F^L, [B, n, d].
    pub hidden: Var,
    /// Block-stack input embeddings (pre-dropout).
    pub embeddings: Var,
    /// Perturbation masks per layer (perturbed branch only).
    pub mask_vars: Vec<Var>,
    pub trace: Option<LayerTrace<F>>,
    /// Number of calibrator operations executed while building the pass.
    pub calibrator_ops: usize,
}

/// Validity-derived constants for one batch.
pub struct BatchMasks {
    pub ids: Arc<Vec<usize>>,
    pub valid: Arc<Vec<bool>>,
    pub allow: Arc<Vec<bool>>,
    pub rows: usize,
    pub n: usize,
}

impl BatchMasks {
    pub fn build(batch: &SequenceBatch) -> Self {
        let (rows, n) = (batch.rows, batch.n);
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let valid = batch.valid_mask.clone();
        let mut allow = vec![false; rows * n * n];
        for b in 0..rows {
            for i in 0..n {
                for j in 0..=i {
                    allow[(b * n + i) * n + j] = valid[b * n + j];
                }
            }
        }
        BatchMasks {
            ids: Arc::new(ids),
            valid: Arc::new(valid),
            allow: Arc::new(allow),
            rows,
            n,
        }
    }
}

/// Item (plus optional position) embeddings; padding rows embed to zero.
pub fn embed<F: Scalar>(
    g: &mut Graph<F>,
    masks: &BatchMasks,
    bound: &BoundParams,
    cfg: &ModelConfig,
    item_count: usize,
) -> Result<Var, ModelError> {
    for &id in masks.ids.iter() {
        if id > item_count {
            return Err(ModelError::IdOutOfRange {
                id,
                count: item_count,
            });
        }
    }
    let table = bound.var(names::ITEM_TABLE);
    let e = g.gather_rows(table, Arc::clone(&masks.ids), masks.rows, masks.n, true);
    match cfg.position_mode {
        PositionMode::None => Ok(e),
        PositionMode::Absolute => {
            let p = bound.var(names::POS_TABLE);
            Ok(g.add_pos(e, p, Arc::clone(&masks.valid)))
        }
    }
}

/// Full forward pass: embeddings, dropout, L calibrated blocks.
pub fn forward<F: Scalar>(
    g: &mut Graph<F>,
    batch: &SequenceBatch,
    bound: &BoundParams,
    cfg: &ModelConfig,
    opts: &ForwardOptions,
    intervention: Option<&EraseMax>,
) -> Result<ForwardOutput<F>, ModelError> {
    let masks = BatchMasks::build(batch);
    let item_count = g.value(bound.var(names::ITEM_TABLE)).shape()[0] - 1;
    let emb = embed(g, &masks, bound, cfg, item_count)?;
    encode(g, emb, &masks, bound, cfg, opts, intervention)
}

/// The block stack from a given embedding variable (kept separate so
/// diagnostics can differentiate with respect to the embeddings).
pub fn encode<F: Scalar>(
    g: &mut Graph<F>,
    emb: Var,
    masks: &BatchMasks,
    bound: &BoundParams,
    cfg: &ModelConfig,
    opts: &ForwardOptions,
    intervention: Option<&EraseMax>,
) -> Result<ForwardOutput<F>, ModelError> {
    if opts.branch == Branch::Perturbed && !cfg.adversarial_enabled {
        return Err(ModelError::PerturbedWithoutAdversarial);
    }
    let (b_dim, n, d, heads) = (masks.rows, masks.n, cfg.d, cfg.heads);
    let dh = cfg.head_dim();
    let bypass = cfg.lite_inference && !opts.training;
    let spatial_active = cfg.spatial_enabled
        && (cfg.order_enabled || cfg.distance_enabled)
        && !bypass;
    let adversarial_active = cfg.adversarial_enabled
        && !bypass
        && matches!(opts.branch, Branch::Calibrated | Branch::Perturbed);

    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
    let dropout_p = if opts.training { cfg.dropout } else { 0.0 };

    let targets = if spatial_active {
        Some(SpatialTargets::<F>::build(b_dim, heads, n))
    } else {
        None
    };
    let validity = if spatial_active || adversarial_active {
        Some(ValidityMasks::<F>::build(&masks.allow, b_dim, heads, n))
    } else {
        None
    };
    let mu = if adversarial_active && opts.branch == Branch::Perturbed {
        Some(adversarial::uniform_reference::<F>(&masks.allow, b_dim, heads, n))
    } else {
        None
    };

    let mut calibrator_ops = 0usize;
    let mut mask_vars = Vec::new();
    let mut trace = opts.keep_trace.then(LayerTrace::default);

    let mut x = apply_dropout(g, emb, dropout_p, &mut dropout_rng);

    for layer in 0..cfg.layers {
        let xn = if cfg.layer_norm_enabled {
            g.layer_norm(x, F::from_f64(LN_EPS))
        } else {
            x
        };
        let q = g.linear(xn, bound.var(&names::w_q(layer)));
        let k = g.linear(xn, bound.var(&names::w_k(layer)));
        let v = g.linear(xn, bound.var(&names::w_v(layer)));
        let qh = split_heads(g, q, b_dim, n, heads, dh);
        let kh = split_heads(g, k, b_dim, n, heads, dh);
        let vh = split_heads(g, v, b_dim, n, heads, dh);

        let logits = g.bmm_nt(qh, kh);
        let logits = g.scale(logits, F::from_f64(1.0 / (dh as f64).sqrt()));

        // Penalized softmax (A_s); plain A only where needed.
        let penalties = if spatial_active {
            calibrator_ops += 1;
            spatial::penalties_graph(
                g,
                qh,
                kh,
                bound,
                layer,
                cfg,
                targets.as_ref().unwrap(),
                &validity.as_ref().unwrap().valid01,
            )
        } else {
            None
        };
        let plain_attention = if penalties.is_none() || opts.keep_trace {
            Some(g.masked_softmax(logits, Arc::clone(&masks.allow)))
        } else {
            None
        };
        let a_s = match penalties {
            Some(p) => {
                let shifted = g.add(logits, p);
                g.masked_softmax(shifted, Arc::clone(&masks.allow))
            }
            None => plain_attention.unwrap(),
        };

        let mut gate = None;
        let mut corrected = None;
        let mut perturbed = None;
        let mut mask = None;
        let a_branch = if adversarial_active {
            let m = adversarial::perturbation_mask_graph(
                g,
                qh,
                kh,
                bound,
                layer,
                dh,
                validity.as_ref().unwrap(),
            );
            calibrator_ops += 1;
            mask = Some(m);
            match opts.branch {
                Branch::Perturbed => {
                    let a_p = adversarial::perturb_attention_graph(g, a_s, m, mu.as_ref().unwrap());
                    calibrator_ops += 1;
                    mask_vars.push(m);
                    perturbed = Some(a_p);
                    a_p
                }
                Branch::Calibrated => {
                    let m_det = g.detach(m);
                    let a_c = adversarial::correct_attention_graph(g, a_s, m_det);
                    calibrator_ops += 1;
                    corrected = Some(a_c);
                    let gv = match cfg.fusion_mode {
                        crate::config::FusionMode::Gate => {
                            let gv = adversarial::gate_graph(g, qh, bound, layer);
                            calibrator_ops += 1;
                            Some(gv)
                        }
                        crate::config::FusionMode::Sum => None,
                    };
                    gate = gv;
                    let a_comb = adversarial::combine_graph(g, a_s, a_c, gv, cfg.fusion_mode);
                    calibrator_ops += 1;
                    a_comb
                }
                Branch::Clean => unreachable!("adversarial_active excludes Clean"),
            }
        } else {
            a_s
        };

        // Diagnostics may rewrite the attention actually used.
        let a_final = match intervention {
            Some(erase) if erase.layer == layer => {
                let mut value = g.value(a_branch).clone();
                erase_max_entries(&mut value, &masks.allow, b_dim, heads, n, erase.head);
                g.constant(value)
            }
            _ => a_branch,
        };

        if let Some(t) = trace.as_mut() {
            t.layers.push(LayerArtifacts {
                logits: g.value(logits).clone(),
                attention: g.value(plain_attention.unwrap_or(a_s)).clone(),
                spatial: g.value(a_s).clone(),
                mask: mask.map(|m| g.value(m).clone()),
                perturbed: perturbed.map(|p| g.value(p).clone()),
                corrected: corrected.map(|c| g.value(c).clone()),
                combined: (adversarial_active && opts.branch == Branch::Calibrated)
                    .then(|| g.value(a_branch).clone()),
                gate: gate.map(|gv| g.value(gv).clone()),
                final_attention: g.value(a_final).clone(),
            });
        }

        let heads_out = g.bmm_nn(a_final, vh);
        let merged = merge_heads(g, heads_out, b_dim, n, heads, dh);
        let merged = apply_dropout(g, merged, dropout_p, &mut dropout_rng);
        let after_attn = if cfg.residual_enabled {
            g.add(x, merged)
        } else {
            merged
        };

        let ffn_in = if cfg.layer_norm_enabled {
            g.layer_norm(after_attn, F::from_f64(LN_EPS))
        } else {
            after_attn
        };
        let h1 = g.linear(ffn_in, bound.var(&names::ffn_w1(layer)));
        let h1 = g.add_bias(h1, bound.var(&names::ffn_b1(layer)));
        let h1 = g.relu(h1);
        let h2 = g.linear(h1, bound.var(&names::ffn_w2(layer)));
        let h2 = g.add_bias(h2, bound.var(&names::ffn_b2(layer)));
        let h2 = apply_dropout(g, h2, dropout_p, &mut dropout_rng);
        x = if cfg.residual_enabled {
            g.add(after_attn, h2)
        } else {
            h2
        };
    }

    let hidden = if cfg.layer_norm_enabled {
        g.layer_norm(x, F::from_f64(LN_EPS))
    } else {
        x
    };

    Ok(ForwardOutput {
        hidden,
        embeddings: emb,
        mask_vars,
        trace,
        calibrator_ops,
    })
}

/// Scores over the real item vocabulary: softmax(T F_n^T) without the
/// padding row. Returns [B, item_count]; column c scores item c+1.
pub fn predict_scores<F: Scalar>(g: &mut Graph<F>, hidden: Var, bound: &BoundParams) -> Var {
    let f_n = g.last_position(hidden);
    let table = bound.var(names::ITEM_TABLE);
    let logits = g.matmul_nt(f_n, table);
    let vocab = g.value(logits).shape()[1];
    let real = g.slice_last(logits, 1, vocab);
    g.softmax_rows(real)
}

/// Mean batch cross-entropy of predicted probabilities against dense item
/// targets (1-based). Probabilities are floored at 1e-12 before the log.
pub fn cross_entropy<F: Scalar>(g: &mut Graph<F>, probs: Var, targets: &[u32]) -> Var {
    let cols: Vec<usize> = targets.iter().map(|&t| t as usize - 1).collect();
    g.nll_mean(probs, Arc::new(cols), F::from_f64(CE_FLOOR))
}

fn split_heads<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    b: usize,
    n: usize,
    heads: usize,
    dh: usize,
) -> Var {
    let r = g.reshape(x, &[b, n, heads, dh]);
    g.permute_0213(r)
}

fn merge_heads<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    b: usize,
    n: usize,
    heads: usize,
    dh: usize,
) -> Var {
    let p = g.permute_0213(x);
    g.reshape(p, &[b, n, heads * dh])
}

fn apply_dropout<F: Scalar>(g: &mut Graph<F>, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Var {
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let scale = F::from_f64(1.0 / keep);
    let mask = Tensor::from_fn(g.value(x).shape(), |_| {
        if rng.gen_bool(keep) {
            scale
        } else {
            F::zero()
        }
    });
    g.mul_const(x, &mask)
}

/// Zero the largest valid entry of each sequence's final attention row and
/// rescale the row to its original mass. With `HeadSelection::All` the key
/// position comes from the head-averaged row; ties break to the lowest key
/// index. Erasing a zero-weight entry is a no-op, and a row whose whole mass
/// sat on the erased entry stays zeroed.
pub fn erase_max_entries<F: Scalar>(
    att: &mut Tensor<F>,
    allow: &[bool],
    b_dim: usize,
    heads: usize,
    n: usize,
    head: HeadSelection,
) {
    let data = att.data_mut();
    for b in 0..b_dim {
        let i = n - 1;
        let arow = &allow[(b * n + i) * n..(b * n + i + 1) * n];
        let pick = |scores: &dyn Fn(usize) -> F| -> Option<usize> {
            let mut best: Option<(usize, F)> = None;
            for j in 0..n {
                if !arow[j] {
                    continue;
                }
                let s = scores(j);
                match best {
                    Some((_, bs)) if s <= bs => {}
                    _ => best = Some((j, s)),
                }
            }
            best.map(|(j, _)| j)
        };
        match head {
            HeadSelection::All => {
                let avg = |j: usize| -> F {
                    let mut acc = F::zero();
                    for h in 0..heads {
                        acc += data[((b * heads + h) * n + i) * n + j];
                    }
                    acc / F::from_f64(heads as f64)
                };
                let Some(jstar) = pick(&avg) else { continue };
                for h in 0..heads {
                    let base = ((b * heads + h) * n + i) * n;
                    erase_entry(&mut data[base..base + n], jstar);
                }
            }
            HeadSelection::Single(h) => {
                let base = ((b * heads + h) * n + i) * n;
                let at = |j: usize| data[base + j];
                let Some(jstar) = pick(&at) else { continue };
                erase_entry(&mut data[base..base + n], jstar);
            }
        }
    }
}

/// Zero `row[j]` and rescale the remainder so the row keeps its mass.
pub fn erase_entry<F: Scalar>(row: &mut [F], j: usize) {
    let removed = row[j];
    if removed == F::zero() {
        return;
    }
    let total: F = row.iter().copied().sum();
    let rest = total - removed;
    row[j] = F::zero();
    if rest <= F::zero() {
        for e in row.iter_mut() {
            *e = F::zero();
        }
        return;
    }
    let factor = total / rest;
    for e in row.iter_mut() {
        *e *= factor;
    }
}
