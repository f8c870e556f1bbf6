//! Finite-difference verification for every operation in the engine.
//!
//! Each op gets a randomized check: build a tiny graph, reduce the output to
//! a scalar through a fixed random weighting, and compare analytic leaf
//! adjoints against central differences.

use std::sync::Arc;

use acrec_autodiff::{central_diff, max_rel_err, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-7;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random tensor bounded away from zero (for kink-free relu checks).
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn check<Build>(name: &str, inputs: &[Tensor<f64>], seed: u64, build: Build)
where
    Build: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    // Weighting fixed per check so the loss touches every output entry.
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves);
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights = rand_tensor(&mut wrng, g.value(out).shape());
    let weighted = g.mul_const(out, &weights);
    let loss = g.sum_all(weighted);
    let mut grads = g.backward(loss);

    for (idx, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .take(leaves[idx])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = central_diff(
            |point| {
                let mut g2 = Graph::inference();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == idx {
                            g2.constant(Tensor::new(t.shape(), point.to_vec()))
                        } else {
                            g2.constant(t.clone())
                        }
                    })
                    .collect();
                let out = build(&mut g2, &vars);
                g2.value(out)
                    .data()
                    .iter()
                    .zip(weights.data())
                    .map(|(y, w)| y * w)
                    .sum()
            },
            input.data(),
            STEP,
        );
        let err = max_rel_err(&analytic, &numeric, 1e-7);
        assert!(
            err <= TOL,
            "{name}: input {idx} max relative error {err:.3e} exceeds {TOL:.0e}"
        );
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    check("add", &[a.clone(), b.clone()], 1, |g, v| g.add(v[0], v[1]));
    check("sub", &[a.clone(), b.clone()], 2, |g, v| g.sub(v[0], v[1]));
    check("mul", &[a.clone(), b.clone()], 3, |g, v| g.mul(v[0], v[1]));
    check("neg", &[a.clone()], 4, |g, v| g.neg(v[0]));
    check("scale", &[a.clone()], 5, |g, v| g.scale(v[0], -2.5));
    check("add_scalar", &[a.clone()], 6, |g, v| g.add_scalar(v[0], 0.7));
    check("rsub_scalar", &[a.clone()], 7, |g, v| g.rsub_scalar(1.0, v[0]));
    let c = rand_tensor(&mut rng, &[3, 4]);
    check("add_const", &[a.clone()], 8, |g, v| g.add_const(v[0], &c));
    check("mul_const", &[a.clone()], 9, |g, v| g.mul_const(v[0], &c));
    check("rsub_const", &[a.clone()], 10, |g, v| g.rsub_const(&c, v[0]));
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 5]);
    check("sigmoid", &[a.clone()], 11, |g, v| g.sigmoid(v[0]));
    check("exp", &[a.clone()], 12, |g, v| g.exp(v[0]));
    let pos = a.map(|x| x.abs() + 0.5);
    check("ln", &[pos.clone()], 13, |g, v| g.ln(v[0]));
    check("sqrt", &[pos.clone()], 14, |g, v| g.sqrt(v[0]));
    let off = rand_tensor_off_zero(&mut rng, &[2, 5]);
    check("relu", &[off.clone()], 15, |g, v| g.relu(v[0]));
    // Clamp band chosen so no sample sits on a boundary.
    check("clamp", &[off], 16, |g, v| g.clamp(v[0], -0.9, 0.9));
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[2, 3, 2, 2]);
    check("reshape", &[a.clone()], 21, |g, v| g.reshape(v[0], &[6, 4]));
    check("permute_0213", &[a.clone()], 22, |g, v| g.permute_0213(v[0]));
    let b = rand_tensor(&mut rng, &[3, 6]);
    check("slice_last", &[b.clone()], 23, |g, v| g.slice_last(v[0], 1, 4));
    let c = rand_tensor(&mut rng, &[2, 4, 3]);
    check("last_position", &[c.clone()], 24, |g, v| g.last_position(v[0]));
    check("pick", &[b], 25, |g, v| g.pick(v[0], 2, 5));
}

#[test]
fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    check("linear", &[x.clone(), w.clone()], 31, |g, v| g.linear(v[0], v[1]));
    let x2 = rand_tensor(&mut rng, &[3, 4]);
    let t = rand_tensor(&mut rng, &[6, 4]);
    check("matmul_nt", &[x2, t], 32, |g, v| g.matmul_nt(v[0], v[1]));
    let a = rand_tensor(&mut rng, &[2, 2, 3, 4]);
    let b = rand_tensor(&mut rng, &[2, 2, 4, 2]);
    check("bmm_nn", &[a.clone(), b], 33, |g, v| g.bmm_nn(v[0], v[1]));
    let bt = rand_tensor(&mut rng, &[2, 2, 5, 4]);
    check("bmm_nt", &[a.clone(), bt], 34, |g, v| g.bmm_nt(v[0], v[1]));
    let wh = rand_tensor(&mut rng, &[2, 4, 3]);
    check("head_linear", &[a.clone(), wh], 35, |g, v| g.head_linear(v[0], v[1]));
    let wh1 = rand_tensor(&mut rng, &[1, 4, 3]);
    check("head_linear_shared", &[a.clone(), wh1], 36, |g, v| {
        g.head_linear(v[0], v[1])
    });
    let wv = rand_tensor(&mut rng, &[2, 4]);
    check("head_matvec", &[a.clone(), wv], 37, |g, v| g.head_matvec(v[0], v[1]));
    let wv1 = rand_tensor(&mut rng, &[1, 4]);
    check("head_matvec_shared", &[a, wv1], 38, |g, v| g.head_matvec(v[0], v[1]));
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x3 = rand_tensor(&mut rng, &[2, 2, 3]);
    let hb = rand_tensor(&mut rng, &[2]);
    check("add_head_bias", &[x3.clone(), hb], 41, |g, v| {
        g.add_head_bias(v[0], v[1])
    });
    let hb1 = rand_tensor(&mut rng, &[1]);
    check("add_head_bias_shared", &[x3.clone(), hb1], 42, |g, v| {
        g.add_head_bias(v[0], v[1])
    });
    let s = rand_tensor(&mut rng, &[]);
    check("mul_scalar_var", &[x3.clone(), s], 43, |g, v| {
        g.mul_scalar_var(v[0], v[1])
    });
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let bias = rand_tensor(&mut rng, &[4]);
    check("add_bias", &[x.clone(), bias], 44, |g, v| g.add_bias(v[0], v[1]));
    let u = rand_tensor(&mut rng, &[2, 2, 3]);
    let v_ = rand_tensor(&mut rng, &[2, 2, 3]);
    check("outer_sum", &[u.clone(), v_], 45, |g, v| g.outer_sum(v[0], v[1]));
    let a4 = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    check("mul_row_scale", &[a4, u], 46, |g, v| g.mul_row_scale(v[0], v[1]));

    let xp = rand_tensor(&mut rng, &[2, 3, 2]);
    let p = rand_tensor(&mut rng, &[3, 2]);
    let valid = Arc::new(vec![false, true, true, true, true, true]);
    check("add_pos", &[xp, p], 47, move |g, v| {
        g.add_pos(v[0], v[1], Arc::clone(&valid))
    });
}

#[test]
fn reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    check("sum_all", &[a.clone()], 51, |g, v| g.sum_all(v[0]));
    check("mean_all", &[a.clone()], 52, |g, v| g.mean_all(v[0]));
    check("sum_last2", &[a], 53, |g, v| g.sum_last2(v[0]));
}

#[test]
fn softmax_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    // Row 0 of batch 1 deliberately empty: exercises the self-fallback.
    let mut allow = vec![true; 2 * 3 * 3];
    for (i, a) in allow.iter_mut().enumerate() {
        let (b, rest) = (i / 9, i % 9);
        let (qi, kj) = (rest / 3, rest % 3);
        *a = kj <= qi && !(b == 1 && qi == 0);
    }
    let allow = Arc::new(allow);
    check("masked_softmax", &[logits], 61, move |g, v| {
        g.masked_softmax(v[0], Arc::clone(&allow))
    });

    let scores = rand_tensor(&mut rng, &[3, 5]);
    check("softmax_rows", &[scores.clone()], 62, |g, v| g.softmax_rows(v[0]));

    let probs = Tensor::from_fn(&[3, 4], |_| rng.gen_range(0.05..0.9));
    let targets = Arc::new(vec![1usize, 3, 0]);
    check("nll_mean", &[probs], 63, move |g, v| {
        g.nll_mean(v[0], Arc::clone(&targets), 1e-12)
    });

    let full = rand_tensor(&mut rng, &[2, 6]);
    check("softmax_then_nll", &[full], 64, |g, v| {
        let p = g.softmax_rows(v[0]);
        g.nll_mean(p, Arc::new(vec![0, 4]), 1e-12)
    });
}

#[test]
fn embedding_and_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let table = rand_tensor(&mut rng, &[5, 3]);
    let ids = Arc::new(vec![1usize, 2, 4, 4, 3, 1]);
    check("gather_rows", &[table.clone()], 71, move |g, v| {
        g.gather_rows(v[0], Arc::clone(&ids), 2, 3, false)
    });

    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    check("layer_norm", &[x], 72, |g, v| g.layer_norm(v[0], 1e-8));
}

#[test]
fn gather_skips_padding_row() {
    let mut g = Graph::new();
    let table = g.leaf(Tensor::from_fn(&[3, 2], |i| i as f64));
    let ids = Arc::new(vec![0usize, 2, 2, 0]);
    let got = g.gather_rows(table, ids, 2, 2, true);
    let s = g.sum_all(got);
    let mut grads = g.backward(s);
    let dt = grads.take(table).unwrap();
    assert_eq!(dt.data(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn detach_stops_gradient() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
    let d = g.detach(a);
    let b = g.mul(d, d);
    let loss = g.sum_all(b);
    let mut grads = g.backward(loss);
    assert!(grads.take(a).is_none(), "detached path must not reach the leaf");
}

#[test]
fn grad_accumulates_across_uses() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::new(&[2], vec![3.0, -1.0]));
    let b = g.mul(a, a); // a^2: da = 2a
    let c = g.add(b, a); // + a: da += 1
    let loss = g.sum_all(c);
    let mut grads = g.backward(loss);
    let da = grads.take(a).unwrap();
    assert_eq!(da.data(), &[7.0, -1.0]);
}

#[test]
fn inference_graph_records_nothing() {
    let mut g = Graph::<f64>::inference();
    let a = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]));
    let b = g.mul(a, a);
    assert!(!g.grad_enabled());
    assert_eq!(g.value(b).data(), &[1.0, 4.0]);
}

/// Row results of the gemm kernel must not depend on how many other rows the
/// operand carries; translation invariance of left-padded batches relies on
/// this.
#[test]
fn gemm_rows_independent_of_row_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = rand_tensor(&mut rng, &[8, 8]);
    let rows = rand_tensor(&mut rng, &[5, 8]);
    let mut padded_data = vec![0.0; 3 * 8];
    padded_data.extend_from_slice(rows.data());
    let padded = Tensor::new(&[8, 8], padded_data);

    let mut g = Graph::<f64>::inference();
    let (a, b, wv) = (g.constant(rows), g.constant(padded), g.constant(w));
    let y_small = g.linear(a, wv);
    let y_big = g.linear(b, wv);
    let small = g.value(y_small).data().to_vec();
    let big = &g.value(y_big).data()[3 * 8..];
    assert_eq!(small.as_slice(), big, "row results changed with row count");
}

#[test]
fn masked_softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..50 {
        let n = rng.gen_range(1..6);
        let b = rng.gen_range(1..3);
        let h = rng.gen_range(1..3);
        let logits = rand_tensor(&mut rng, &[b, h, n, n]);
        let mut allow = vec![false; b * n * n];
        for bi in 0..b {
            let pad = rng.gen_range(0..n);
            for i in 0..n {
                for j in 0..n {
                    allow[(bi * n + i) * n + j] = j <= i && j >= pad && i >= pad;
                }
            }
        }
        let mut g = Graph::<f64>::inference();
        let lv = g.constant(logits);
        let sm = g.masked_softmax(lv, Arc::new(allow.clone()));
        let y = g.value(sm);
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..n {
                    let row = &y.data()[((bi * h + hi) * n + i) * n..((bi * h + hi) * n + i + 1) * n];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "trial {trial}: row sums to {sum}");
                    for j in 0..n {
                        if !allow[(bi * n + i) * n + j] && !(row[j] == 1.0 && j == i) {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                }
            }
        }
    }
}

/// Naive triple loop as the matmul oracle.
#[test]
fn linear_matches_naive_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[7, 5]);
    let w = rand_tensor(&mut rng, &[5, 6]);
    let mut expect = vec![0.0; 7 * 6];
    for i in 0..7 {
        for k in 0..5 {
            for j in 0..6 {
                expect[i * 6 + j] += x.data()[i * 5 + k] * w.data()[k * 6 + j];
            }
        }
    }
    let mut g = Graph::<f64>::inference();
    let (xv, wv) = (g.constant(x), g.constant(w));
    let y = g.linear(xv, wv);
    for (got, want) in g.value(y).data().iter().zip(&expect) {
        assert!((got - want).abs() < 1e-12);
    }
}
