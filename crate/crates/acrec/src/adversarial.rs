//! Adversarial calibrator: a learned perturbation mask mixes attention with
//! a uniform reference to locate decisive entries, a correction map boosts
//! them, and a gate fuses corrected and spatial attention.

use acrec_autodiff::{Graph, Scalar, Tensor, Var};

use crate::config::FusionMode;
use crate::model::params::{names, BoundParams};

/// Uniform reference over each query's valid key set: [B, H, n, n] with
/// 1/count on valid entries and, for rows without any valid key, weight 1 on
/// the query's own position (mirroring the attention fallback).
pub fn uniform_reference<F: Scalar>(allow: &[bool], batch: usize, heads: usize, n: usize) -> Tensor<F> {
    let mut mu = vec![F::zero(); batch * heads * n * n];
    for b in 0..batch {
        for i in 0..n {
            let row = &allow[(b * n + i) * n..(b * n + i + 1) * n];
            let count = row.iter().filter(|&&a| a).count();
            for h in 0..heads {
                let base = ((b * heads + h) * n + i) * n;
                if count == 0 {
                    mu[base + i] = F::one();
                } else {
                    let w = F::one() / F::from_f64(count as f64);
                    for (j, &a) in row.iter().enumerate() {
                        if a {
                            mu[base + j] = w;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[batch, heads, n, n], mu)
}

/// Indicator tensors of the validity pattern broadcast to [B, H, n, n].
pub struct ValidityMasks<F: Scalar> {
    /// 1 on valid entries, 0 elsewhere.
    pub valid01: Tensor<F>,
    /// 1 on invalid entries, 0 elsewhere.
    pub invalid01: Tensor<F>,
}

impl<F: Scalar> ValidityMasks<F> {
    pub fn build(allow: &[bool], batch: usize, heads: usize, n: usize) -> Self {
        let valid01 = Tensor::from_fn(&[batch, heads, n, n], |idx| {
            let j = idx % n;
            let i = (idx / n) % n;
            let b = idx / (heads * n * n);
            if allow[(b * n + i) * n + j] {
                F::one()
            } else {
                F::zero()
            }
        });
        let invalid01 = valid01.map(|x| F::one() - x);
        ValidityMasks { valid01, invalid01 }
    }
}

/// Perturbation mask M = sigmoid(QWqp (KWkp)^T / sqrt(dh)) with invalid
/// entries forced to exactly 1 (no perturbation where no attention).
pub fn perturbation_mask_graph<F: Scalar>(
    g: &mut Graph<F>,
    qh: Var,
    kh: Var,
    bound: &BoundParams,
    layer: usize,
    dh: usize,
    masks: &ValidityMasks<F>,
) -> Var {
    let w_qp = bound.var(&names::adv_w_qp(layer));
    let w_kp = bound.var(&names::adv_w_kp(layer));
    let qp = g.head_linear(qh, w_qp);
    let kp = g.head_linear(kh, w_kp);
    let logits = g.bmm_nt(qp, kp);
    let logits = g.scale(logits, F::from_f64(1.0 / (dh as f64).sqrt()));
    let m = g.sigmoid(logits);
    let m = g.mul_const(m, &masks.valid01);
    g.add_const(m, &masks.invalid01)
}

/// A_p = M .* A_s + (1 - M) .* mu.
pub fn perturb_attention_graph<F: Scalar>(
    g: &mut Graph<F>,
    a_s: Var,
    m: Var,
    mu: &Tensor<F>,
) -> Var {
    let kept = g.mul(m, a_s);
    let inv = g.one_minus(m);
    let mixed = g.mul_const(inv, mu);
    g.add(kept, mixed)
}

/// A_c = A_s .* e^(1 - M). The caller passes a detached mask so no gradient
/// flows from the correction into the perturbation projections.
pub fn correct_attention_graph<F: Scalar>(g: &mut Graph<F>, a_s: Var, m_detached: Var) -> Var {
    let inv = g.one_minus(m_detached);
    let boost = g.exp(inv);
    g.mul(a_s, boost)
}

/// Per-query gate g = sigmoid(Q w_g + b_g), one scalar per query position.
pub fn gate_graph<F: Scalar>(g: &mut Graph<F>, qh: Var, bound: &BoundParams, layer: usize) -> Var {
    let w = bound.var(&names::adv_w_gate(layer));
    let b = bound.var(&names::adv_b_gate(layer));
    let score = g.head_matvec(qh, w);
    let score = g.add_head_bias(score, b);
    g.sigmoid(score)
}

/// A_comb: gated convex combination, or the plain average in sum mode.
pub fn combine_graph<F: Scalar>(
    g: &mut Graph<F>,
    a_s: Var,
    a_c: Var,
    gate: Option<Var>,
    fusion: FusionMode,
) -> Var {
    match fusion {
        FusionMode::Gate => {
            let gate = gate.expect("gate fusion needs a gate");
            let part_s = g.mul_row_scale(a_s, gate);
            let inv = g.one_minus(gate);
            let part_c = g.mul_row_scale(a_c, inv);
            g.add(part_s, part_c)
        }
        FusionMode::Sum => {
            let sum = g.add(a_s, a_c);
            g.scale(sum, F::from_f64(0.5))
        }
    }
}

// Tensor-level reference forms used by tests.

pub fn perturb_attention<F: Scalar>(a_s: &Tensor<F>, m: &Tensor<F>, mu: &Tensor<F>) -> Tensor<F> {
    let kept = a_s.zip(m, |a, mm| a * mm);
    let mixed = mu.zip(m, |u, mm| u * (F::one() - mm));
    kept.zip(&mixed, |x, y| x + y)
}

pub fn correct_attention<F: Scalar>(a_s: &Tensor<F>, m: &Tensor<F>) -> Tensor<F> {
    a_s.zip(m, |a, mm| a * (F::one() - mm).exp())
}

pub fn combine<F: Scalar>(
    a_s: &Tensor<F>,
    a_c: &Tensor<F>,
    gate: F,
    fusion: FusionMode,
) -> Tensor<F> {
    match fusion {
        FusionMode::Gate => a_s.zip(a_c, |s, c| gate * s + (F::one() - gate) * c),
        FusionMode::Sum => a_s.zip(a_c, |s, c| (s + c) * F::from_f64(0.5)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_reference_rows_sum_to_one() {
        // Causal validity with the first key padded out.
        let n = 3;
        let allow: Vec<bool> = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                j <= i && j >= 1 && i >= 1
            })
            .collect();
        let mu: Tensor<f64> = uniform_reference(&allow, 1, 2, n);
        for h in 0..2 {
            for i in 0..n {
                let row = &mu.data()[(h * n + i) * n..(h * n + i + 1) * n];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            }
        }
        // Query 2 sees keys {1, 2}: weight 1/2 each.
        assert_eq!(mu.data()[2 * n + 1], 0.5);
        assert_eq!(mu.data()[2 * n + 2], 0.5);
        // Padded query row falls back to itself.
        assert_eq!(mu.data()[0], 1.0);
    }

    #[test]
    fn perturb_attention_endpoints() {
        let a_s = Tensor::new(&[1, 1, 1, 2], vec![0.7, 0.3]);
        let mu = Tensor::new(&[1, 1, 1, 2], vec![0.5, 0.5]);
        let ones = Tensor::full(&[1, 1, 1, 2], 1.0);
        let zeros = Tensor::zeros(&[1, 1, 1, 2]);
        assert_eq!(perturb_attention(&a_s, &ones, &mu).data(), a_s.data());
        assert_eq!(perturb_attention(&a_s, &zeros, &mu).data(), mu.data());
        let half = Tensor::full(&[1, 1, 1, 2], 0.5);
        let mixed = perturb_attention(&a_s, &half, &mu);
        assert!((mixed.data()[0] - 0.6).abs() < 1e-12);
        assert!((mixed.data()[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn correct_attention_endpoints() {
        let a_s = Tensor::new(&[2], vec![0.25, 1.0]);
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        assert_eq!(correct_attention(&a_s, &ones).data(), a_s.data());
        let e = std::f64::consts::E;
        let boosted = correct_attention(&a_s, &zeros);
        assert!((boosted.data()[0] - 0.25 * e).abs() < 1e-12);
        let half = Tensor::full(&[2], 0.5);
        let v = correct_attention(&a_s, &half);
        assert!((v.data()[1] - 1.6487212707001282).abs() < 1e-12);
    }

    #[test]
    fn combine_endpoints_and_midpoint() {
        let a_s = Tensor::new(&[1], vec![0.4]);
        let a_c = Tensor::new(&[1], vec![0.6]);
        assert_eq!(combine(&a_s, &a_c, 1.0, FusionMode::Gate).data(), &[0.4]);
        assert_eq!(combine(&a_s, &a_c, 0.0, FusionMode::Gate).data(), &[0.6]);
        let mid = combine(&a_s, &a_c, 0.5, FusionMode::Gate);
        assert!((mid.data()[0] - 0.5).abs() < 1e-12);
        let sum = combine(&a_s, &a_c, 0.123, FusionMode::Sum);
        assert!((sum.data()[0] - 0.5).abs() < 1e-12, "sum mode ignores the gate");
    }
}
