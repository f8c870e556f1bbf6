//! Spatial calibrator: order and log-distance targets are predicted from
//! query/key pairs and the prediction errors are added to the pre-softmax
//! attention logits as penalties.

use std::sync::Arc;

use acrec_autodiff::{Graph, Scalar, Tensor, Var};

use crate::config::ModelConfig;
use crate::model::params::{names, BoundParams};

/// Clamp bound on predicted order probabilities before the log.
pub const ORDER_EPS: f64 = 1e-7;

/// 1 when position `i` precedes position `j`.
pub fn order_target(i: usize, j: usize) -> f64 {
    if i < j {
        1.0
    } else {
        0.0
    }
}

/// ln(1 + |i - j|).
pub fn distance_target(i: usize, j: usize) -> f64 {
    (1.0 + (i as f64 - j as f64).abs()).ln()
}

/// Predicted order probability and distance for one query/key pair.
/// `w_*` concatenate the query and key halves: `[q-half; k-half]`.
pub fn predict_spatial(
    q: &[f64],
    k: &[f64],
    w_order: &[f64],
    b_order: f64,
    w_dist: &[f64],
    b_dist: f64,
) -> (f64, f64) {
    let dh = q.len();
    assert_eq!(k.len(), dh);
    assert_eq!(w_order.len(), 2 * dh);
    assert_eq!(w_dist.len(), 2 * dh);
    let mut o = b_order;
    let mut d = b_dist;
    for f in 0..dh {
        o += q[f] * w_order[f] + k[f] * w_order[dh + f];
        d += q[f] * w_dist[f] + k[f] * w_dist[dh + f];
    }
    (1.0 / (1.0 + (-o).exp()), d)
}

/// Order penalty. The default is the sigmoid cross-entropy log-likelihood
/// `o ln(ô) + (1-o) ln(1-ô)`; `literal` reproduces the alternative printed
/// form `o ln(ô) + (1-o)(1 - ln(ô))` for comparison runs.
pub fn order_penalty(o: f64, o_hat: f64, literal: bool) -> f64 {
    let p = o_hat.clamp(ORDER_EPS, 1.0 - ORDER_EPS);
    if literal {
        o * p.ln() + (1.0 - o) * (1.0 - p.ln())
    } else {
        o * p.ln() + (1.0 - o) * (1.0 - p).ln()
    }
}

/// Distance penalty -theta^2 (d - d_hat)^2 / 2.
pub fn distance_penalty(d: f64, d_hat: f64, theta: f64) -> f64 {
    let diff = d - d_hat;
    -(theta * theta * diff * diff) / 2.0
}

/// Reference composition of Eq-style calibration on plain tensors: add the
/// penalties (zeroed on invalid entries) to the logits and softmax each row
/// over its valid keys. Used by tests as the semantic mirror of the graph
/// path.
pub fn calibrate_spatial<F: Scalar>(
    logits: &Tensor<F>,
    penalties: &Tensor<F>,
    allow: &[bool],
) -> Tensor<F> {
    let mut g: Graph<F> = Graph::inference();
    let l = g.constant(logits.clone());
    let masked_pen = {
        let mut p = penalties.clone();
        apply_validity(&mut p, allow);
        p
    };
    let sum = g.add_const(l, &masked_pen);
    let a_s = g.masked_softmax(sum, Arc::new(allow.to_vec()));
    g.value(a_s).clone()
}

fn apply_validity<F: Scalar>(t: &mut Tensor<F>, allow: &[bool]) {
    let shape = t.shape().to_vec();
    let (b, h) = (shape[0], shape[1]);
    let n = shape[2];
    let data = t.data_mut();
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..n {
                for j in 0..n {
                    if !allow[(bi * n + i) * n + j] {
                        data[((bi * h + hi) * n + i) * n + j] = F::zero();
                    }
                }
            }
        }
    }
}

/// Constant matrices shared by all layers of one forward pass.
pub struct SpatialTargets<F: Scalar> {
    /// Broadcast order targets, [B, H, n, n].
    pub order: Tensor<F>,
    /// 1 - order, same shape.
    pub order_complement: Tensor<F>,
    /// Broadcast log-distance targets, [B, H, n, n].
    pub distance: Tensor<F>,
}

impl<F: Scalar> SpatialTargets<F> {
    pub fn build(batch: usize, heads: usize, n: usize) -> Self {
        let order = Tensor::from_fn(&[batch, heads, n, n], |idx| {
            let (i, j) = ((idx / n) % n, idx % n);
            F::from_f64(order_target(i, j))
        });
        let order_complement = order.map(|x| F::one() - x);
        let distance = Tensor::from_fn(&[batch, heads, n, n], |idx| {
            let (i, j) = ((idx / n) % n, idx % n);
            F::from_f64(distance_target(i, j))
        });
        SpatialTargets {
            order,
            order_complement,
            distance,
        }
    }
}

/// Graph-side spatial penalties for one layer: returns `s^(o) + s^(d)` as a
/// [B, H, n, n] variable, already zeroed on invalid entries. `valid01` is
/// the 0/1 validity tensor broadcast to [B, H, n, n].
#[allow(clippy::too_many_arguments)]
pub fn penalties_graph<F: Scalar>(
    g: &mut Graph<F>,
    qh: Var,
    kh: Var,
    bound: &BoundParams,
    layer: usize,
    cfg: &ModelConfig,
    targets: &SpatialTargets<F>,
    valid01: &Tensor<F>,
) -> Option<Var> {
    let dh = cfg.head_dim();
    let mut total: Option<Var> = None;

    if cfg.order_enabled {
        let w = bound.var(&names::spc_w_order(layer));
        let b = bound.var(&names::spc_b_order(layer));
        let wq = g.slice_last(w, 0, dh);
        let wk = g.slice_last(w, dh, 2 * dh);
        let u = g.head_matvec(qh, wq);
        let u = g.add_head_bias(u, b);
        let v = g.head_matvec(kh, wk);
        let score = g.outer_sum(u, v);
        let o_hat = g.sigmoid(score);
        let o_hat = g.clamp(o_hat, F::from_f64(ORDER_EPS), F::from_f64(1.0 - ORDER_EPS));
        let ln_p = g.ln(o_hat);
        let first = g.mul_const(ln_p, &targets.order);
        let second = if cfg.literal_eq10 {
            let one_minus_ln = g.one_minus(ln_p);
            g.mul_const(one_minus_ln, &targets.order_complement)
        } else {
            let one_minus_p = g.one_minus(o_hat);
            let ln_q = g.ln(one_minus_p);
            g.mul_const(ln_q, &targets.order_complement)
        };
        let s_o = g.add(first, second);
        let s_o = g.mul_const(s_o, valid01);
        total = Some(s_o);
    }

    if cfg.distance_enabled {
        let w = bound.var(&names::spc_w_dist(layer));
        let b = bound.var(&names::spc_b_dist(layer));
        let theta = bound.var(&names::spc_theta_dist(layer));
        let wq = g.slice_last(w, 0, dh);
        let wk = g.slice_last(w, dh, 2 * dh);
        let u = g.head_matvec(qh, wq);
        let u = g.add_head_bias(u, b);
        let v = g.head_matvec(kh, wk);
        let d_hat = g.outer_sum(u, v);
        let diff = g.rsub_const(&targets.distance, d_hat);
        let sq = g.mul(diff, diff);
        let theta_sq = g.mul(theta, theta);
        let scaled = g.mul_scalar_var(sq, theta_sq);
        let s_d = g.scale(scaled, F::from_f64(-0.5));
        let s_d = g.mul_const(s_d, valid01);
        total = match total {
            Some(t) => Some(g.add(t, s_d)),
            None => Some(s_d),
        };
    }

    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_targets() {
        assert_eq!(order_target(2, 5), 1.0);
        assert_eq!(order_target(5, 2), 0.0);
        assert_eq!(order_target(3, 3), 0.0);
    }

    #[test]
    fn distance_targets() {
        assert_eq!(distance_target(4, 4), 0.0);
        assert!((distance_target(2, 5) - 4.0_f64.ln()).abs() < 1e-12);
        assert_eq!(distance_target(5, 2), distance_target(2, 5));
    }

    #[test]
    fn predict_spatial_degenerate_weights() {
        // Zero weights: order prediction sits at sigmoid(0) = 0.5.
        let (o, _) = predict_spatial(&[1.0], &[2.0], &[0.0, 0.0], 0.0, &[0.0, 0.0], 0.0);
        assert!((o - 0.5).abs() < 1e-12);
        // Zero distance weights with bias b predict exactly b.
        let (_, d) = predict_spatial(&[1.0], &[2.0], &[0.0, 0.0], 0.0, &[0.0, 0.0], 0.7);
        assert!((d - 0.7).abs() < 1e-12);
        // Hand case: q=[1], k=[2], w=[1,1], bias 0 -> sigmoid(3).
        let (o, _) = predict_spatial(&[1.0], &[2.0], &[1.0, 1.0], 0.0, &[0.0, 0.0], 0.0);
        assert!((o - 0.9525741268224334).abs() < 1e-10);
    }

    #[test]
    fn order_penalty_default_semantics() {
        // Perfect prediction approaches zero penalty.
        assert!(order_penalty(1.0, 1.0, false).abs() < 1e-6);
        // o=1, o_hat=0.5 and o=0, o_hat=0.5 both give ln(0.5).
        let ln_half = 0.5_f64.ln();
        assert!((order_penalty(1.0, 0.5, false) - ln_half).abs() < 1e-12);
        assert!((order_penalty(0.0, 0.5, false) - ln_half).abs() < 1e-12);
    }

    #[test]
    fn order_penalty_literal_form() {
        // o=0: literal form gives 1 - ln(o_hat), positive for small o_hat.
        let v = order_penalty(0.0, 0.5, true);
        assert!((v - (1.0 - 0.5_f64.ln())).abs() < 1e-12);
        assert!(v > 0.0);
    }

    #[test]
    fn order_penalty_is_nonpositive_and_monotone_by_default() {
        let mut prev = f64::NEG_INFINITY;
        for step in 0..100 {
            let o_hat = 0.001 + 0.998 * step as f64 / 99.0;
            let p = order_penalty(1.0, o_hat, false);
            assert!(p <= 0.0);
            assert!(p >= prev, "penalty must not decrease as |o - o_hat| shrinks");
            prev = p;
        }
    }

    #[test]
    fn distance_penalty_closed_forms() {
        assert_eq!(distance_penalty(1.5, 1.5, 3.0), 0.0);
        assert!((distance_penalty(2.0, 0.0, 1.0) + 2.0).abs() < 1e-12);
        assert!((distance_penalty(1.0, 0.0, 2.0) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn calibrate_identity_when_no_penalty() {
        let logits = Tensor::<f64>::from_fn(&[1, 1, 2, 2], |i| i as f64 * 0.3);
        let allow = vec![true, false, true, true];
        let zero = Tensor::zeros(&[1, 1, 2, 2]);
        let a_s = calibrate_spatial(&logits, &zero, &allow);
        let mut g: Graph<f64> = Graph::inference();
        let l = g.constant(logits);
        let a = g.masked_softmax(l, Arc::new(allow));
        assert_eq!(a_s.data(), g.value(a).data());
    }

    #[test]
    fn uniform_penalty_shift_leaves_rows_unchanged() {
        let logits = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| (i % 5) as f64 * 0.21 - 0.4);
        let allow: Vec<bool> = (0..9).map(|i| (i % 3) <= (i / 3)).collect();
        let base = calibrate_spatial(&logits, &Tensor::zeros(&[1, 1, 3, 3]), &allow);
        let shifted = calibrate_spatial(&logits, &Tensor::full(&[1, 1, 3, 3], -0.77), &allow);
        for (a, b) in base.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_ratio_changes_row() {
        // Row logits [0,0] with penalties [0, ln 2] redistribute to [1/3, 2/3].
        let logits = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let mut pen = Tensor::zeros(&[1, 1, 2, 2]);
        pen.data_mut()[3] = 2.0_f64.ln();
        let allow = vec![true, false, true, true];
        let a_s = calibrate_spatial(&logits, &pen, &allow);
        assert!((a_s.data()[2] - 1.0 / 3.0).abs() < 1e-12);
        assert!((a_s.data()[3] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_ignore_penalties() {
        // Randomizing penalties on invalid entries must not move A_s.
        let logits = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.11);
        let allow: Vec<bool> = (0..9).map(|i| (i % 3) <= (i / 3)).collect();
        let pen_a = Tensor::zeros(&[1, 1, 3, 3]);
        let pen_b = Tensor::from_fn(&[1, 1, 3, 3], |i| {
            if allow[i] {
                0.0
            } else {
                (i as f64 * 7.3).sin() * 100.0
            }
        });
        let a = calibrate_spatial(&logits, &pen_a, &allow);
        let b = calibrate_spatial(&logits, &pen_b, &allow);
        assert_eq!(a.data(), b.data());
    }
}
