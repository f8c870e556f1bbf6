//! Operation set for [`Graph`]. Each method evaluates eagerly and records a
//! backward closure routing the adjoint to its parents.
//!
//! Shapes follow the conventions of the attention stack that this engine
//! serves: `[B, H, n, d]` activations with row-major storage, weights as
//! plain 2-D matrices or `[H, ..]` per-head stacks.

use std::sync::Arc;

use crate::graph::{Graph, Var};
use crate::scalar::{mm_nn, mm_nt, mm_tn, Scalar};
use crate::tensor::Tensor;

impl<F: Scalar> Graph<F> {
    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(out, &[a, b], move |g, sink| {
            if wa {
                sink.add(a, g.clone());
            }
            if wb {
                sink.add(b, g.clone());
            }
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(out, &[a, b], move |g, sink| {
            if wa {
                sink.add(a, g.clone());
            }
            if wb {
                sink.add(b, g.map(|x| -x));
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a).clone();
        let tb = self.value(b).clone();
        let out = ta.zip(&tb, |x, y| x * y);
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(out, &[a, b], move |g, sink| {
            if wa {
                sink.add(a, g.zip(&tb, |gi, y| gi * y));
            }
            if wb {
                sink.add(b, g.zip(&ta, |gi, x| gi * x));
            }
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -F::one())
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push_op(out, &[a], move |g, sink| sink.add(a, g.map(|x| x * c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push_op(out, &[a], move |g, sink| sink.add(a, g.clone()))
    }

    /// c - a (elementwise).
    pub fn rsub_scalar(&mut self, c: F, a: Var) -> Var {
        let out = self.value(a).map(|x| c - x);
        self.push_op(out, &[a], move |g, sink| sink.add(a, g.map(|x| -x)))
    }

    /// 1 - a.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.rsub_scalar(F::one(), a)
    }

    pub fn add_const(&mut self, a: Var, t: &Tensor<F>) -> Var {
        let out = self.value(a).zip(t, |x, y| x + y);
        self.push_op(out, &[a], move |g, sink| sink.add(a, g.clone()))
    }

    pub fn mul_const(&mut self, a: Var, t: &Tensor<F>) -> Var {
        let t = t.clone();
        let out = self.value(a).zip(&t, |x, y| x * y);
        self.push_op(out, &[a], move |g, sink| {
            sink.add(a, g.zip(&t, |gi, y| gi * y))
        })
    }

    /// t - a with a constant t.
    pub fn rsub_const(&mut self, t: &Tensor<F>, a: Var) -> Var {
        let out = t.zip(self.value(a), |y, x| y - x);
        self.push_op(out, &[a], move |g, sink| sink.add(a, g.map(|x| -x)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| F::one() / (F::one() + (-x).exp()));
        let y = out.clone();
        self.push_op(out, &[a], move |g, sink| {
            sink.add(a, g.zip(&y, |gi, yi| gi * yi * (F::one() - yi)))
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let y = out.clone();
        self.push_op(out, &[a], move |g, sink| {
            sink.add(a, g.zip(&y, |gi, yi| gi * yi))
        })
    }

    /// Natural log; caller guarantees positive inputs (clamp upstream).
    pub fn ln(&mut self, a: Var) -> Var {
        let ta = self.value(a).clone();
        let out = ta.map(|x| x.ln());
        self.push_op(out, &[a], move |g, sink| {
            sink.add(a, g.zip(&ta, |gi, x| gi / x))
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a).clone();
        let out = ta.map(|x| if x > F::zero() { x } else { F::zero() });
        self.push_op(out, &[a], move |g, sink| {
            sink.add(
                a,
                g.zip(&ta, |gi, x| if x > F::zero() { gi } else { F::zero() }),
            )
        })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sqrt());
        let y = out.clone();
        let half = F::from_f64(0.5);
        self.push_op(out, &[a], move |g, sink| {
            sink.add(
                a,
                g.zip(&y, |gi, yi| {
                    if yi > F::zero() {
                        gi * half / yi
                    } else {
                        F::zero()
                    }
                }),
            )
        })
    }

    /// Clamp to [lo, hi]; the adjoint passes only strictly inside the band.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let ta = self.value(a).clone();
        let out = ta.map(|x| x.max(lo).min(hi));
        self.push_op(out, &[a], move |g, sink| {
            sink.add(
                a,
                g.zip(&ta, |gi, x| if x > lo && x < hi { gi } else { F::zero() }),
            )
        })
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape = self.value(a).shape().to_vec();
        let out = self.value(a).reshaped(shape);
        self.push_op(out, &[a], move |g, sink| {
            sink.add(a, g.reshaped(&old_shape))
        })
    }

    /// [d0, d1, d2, d3] -> [d0, d2, d1, d3]; used to split/merge heads.
    pub fn permute_0213(&mut self, a: Var) -> Var {
        let out = permute_0213_tensor(self.value(a));
        self.push_op(out, &[a], move |g, sink| {
            sink.add(a, permute_0213_tensor(g))
        })
    }

    /// Slice [lo, hi) of the last dimension.
    pub fn slice_last(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        let c = *shape.last().expect("slice_last needs rank >= 1");
        assert!(lo < hi && hi <= c);
        let rows = self.value(a).numel() / c;
        let width = hi - lo;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = width;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&src[r * c + lo..r * c + hi]);
        }
        let out = Tensor::new(&out_shape, data);
        self.push_op(out, &[a], move |g, sink| {
            let mut full = Tensor::zeros(&shape);
            {
                let dst = full.data_mut();
                let gs = g.data();
                for r in 0..rows {
                    dst[r * c + lo..r * c + hi].copy_from_slice(&gs[r * width..(r + 1) * width]);
                }
            }
            sink.add(a, full);
        })
    }

    /// Final sequence position of a [B, n, d] tensor -> [B, d].
    pub fn last_position(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 3, "last_position expects [B, n, d]");
        let (b_dim, n, d) = (shape[0], shape[1], shape[2]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(b_dim * d);
        for b in 0..b_dim {
            let base = (b * n + (n - 1)) * d;
            data.extend_from_slice(&src[base..base + d]);
        }
        let out = Tensor::new(&[b_dim, d], data);
        self.push_op(out, &[a], move |g, sink| {
            let mut full = Tensor::zeros(&shape);
            {
                let dst = full.data_mut();
                let gs = g.data();
                for b in 0..b_dim {
                    let base = (b * n + (n - 1)) * d;
                    dst[base..base + d].copy_from_slice(&gs[b * d..(b + 1) * d]);
                }
            }
            sink.add(a, full);
        })
    }

    /// Single entry of a rank-2 tensor as a rank-0 scalar.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let shape = self.value(a).shape().to_vec();
        assert_eq!(shape.len(), 2);
        let cols = shape[1];
        let out = Tensor::scalar(self.value(a).data()[row * cols + col]);
        self.push_op(out, &[a], move |g, sink| {
            let mut full = Tensor::zeros(&shape);
            full.data_mut()[row * cols + col] = g.item();
            sink.add(a, full);
        })
    }

    // ---- linear algebra ----

    /// x @ w where x is [..., k] (leading dims flattened) and w is [k, p].
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        let k = *tx.shape().last().expect("linear: x rank >= 1");
        assert_eq!(tw.rank(), 2);
        assert_eq!(tw.shape()[0], k, "linear: inner dims disagree");
        let p = tw.shape()[1];
        let rows = tx.numel() / k;
        let mut out_shape = tx.shape().to_vec();
        *out_shape.last_mut().unwrap() = p;
        let mut y = vec![F::zero(); rows * p];
        mm_nn(rows, k, p, F::one(), tx.data(), tw.data(), F::zero(), &mut y);
        let out = Tensor::new(&out_shape, y);
        let (wx, ww) = (self.wants(x), self.wants(w));
        self.push_op(out, &[x, w], move |g, sink| {
            let gd = g.data();
            if wx {
                let mut dx = vec![F::zero(); rows * k];
                mm_nt(rows, p, k, F::one(), gd, tw.data(), F::zero(), &mut dx);
                sink.add(x, Tensor::new(tx.shape(), dx));
            }
            if ww {
                let mut dw = vec![F::zero(); k * p];
                mm_tn(k, rows, p, F::one(), tx.data(), gd, F::zero(), &mut dw);
                sink.add(w, Tensor::new(&[k, p], dw));
            }
        })
    }

    /// x @ w^T where x is [r, k] and w is [v, k]; yields [r, v].
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Var {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        assert_eq!(tx.rank(), 2);
        assert_eq!(tw.rank(), 2);
        let (r, k) = (tx.shape()[0], tx.shape()[1]);
        let v = tw.shape()[0];
        assert_eq!(tw.shape()[1], k);
        let mut y = vec![F::zero(); r * v];
        mm_nt(r, k, v, F::one(), tx.data(), tw.data(), F::zero(), &mut y);
        let out = Tensor::new(&[r, v], y);
        let (wx, ww) = (self.wants(x), self.wants(w));
        self.push_op(out, &[x, w], move |g, sink| {
            let gd = g.data();
            if wx {
                let mut dx = vec![F::zero(); r * k];
                mm_nn(r, v, k, F::one(), gd, tw.data(), F::zero(), &mut dx);
                sink.add(x, Tensor::new(&[r, k], dx));
            }
            if ww {
                let mut dw = vec![F::zero(); v * k];
                mm_tn(v, r, k, F::one(), gd, tx.data(), F::zero(), &mut dw);
                sink.add(w, Tensor::new(&[v, k], dw));
            }
        })
    }

    /// Batched a @ b: [g, m, k] x [g, k, p] -> [g, m, p].
    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a).clone();
        let tb = self.value(b).clone();
        let (gn, m, k) = batch_dims(&ta);
        let (gb, kb, p) = batch_dims(&tb);
        assert_eq!(gn, gb);
        assert_eq!(k, kb);
        let mut y = vec![F::zero(); gn * m * p];
        for gi in 0..gn {
            mm_nn(
                m,
                k,
                p,
                F::one(),
                &ta.data()[gi * m * k..(gi + 1) * m * k],
                &tb.data()[gi * k * p..(gi + 1) * k * p],
                F::zero(),
                &mut y[gi * m * p..(gi + 1) * m * p],
            );
        }
        let mut out_shape = ta.shape()[..ta.rank() - 2].to_vec();
        out_shape.extend([m, p]);
        let out = Tensor::new(&out_shape, y);
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(out, &[a, b], move |g, sink| {
            let gd = g.data();
            if wa {
                let mut da = vec![F::zero(); gn * m * k];
                for gi in 0..gn {
                    mm_nt(
                        m,
                        p,
                        k,
                        F::one(),
                        &gd[gi * m * p..(gi + 1) * m * p],
                        &tb.data()[gi * k * p..(gi + 1) * k * p],
                        F::zero(),
                        &mut da[gi * m * k..(gi + 1) * m * k],
                    );
                }
                sink.add(a, Tensor::new(ta.shape(), da));
            }
            if wb {
                let mut db = vec![F::zero(); gn * k * p];
                for gi in 0..gn {
                    mm_tn(
                        k,
                        m,
                        p,
                        F::one(),
                        &ta.data()[gi * m * k..(gi + 1) * m * k],
                        &gd[gi * m * p..(gi + 1) * m * p],
                        F::zero(),
                        &mut db[gi * k * p..(gi + 1) * k * p],
                    );
                }
                sink.add(b, Tensor::new(tb.shape(), db));
            }
        })
    }

    /// Batched a @ b^T: [g, m, k] x [g, p, k] -> [g, m, p].
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a).clone();
        let tb = self.value(b).clone();
        let (gn, m, k) = batch_dims(&ta);
        let (gb, p, kb) = batch_dims(&tb);
        assert_eq!(gn, gb);
        assert_eq!(k, kb);
        let mut y = vec![F::zero(); gn * m * p];
        for gi in 0..gn {
            mm_nt(
                m,
                k,
                p,
                F::one(),
                &ta.data()[gi * m * k..(gi + 1) * m * k],
                &tb.data()[gi * p * k..(gi + 1) * p * k],
                F::zero(),
                &mut y[gi * m * p..(gi + 1) * m * p],
            );
        }
        let mut out_shape = ta.shape()[..ta.rank() - 2].to_vec();
        out_shape.extend([m, p]);
        let out = Tensor::new(&out_shape, y);
        let (wa, wb) = (self.wants(a), self.wants(b));
        self.push_op(out, &[a, b], move |g, sink| {
            let gd = g.data();
            if wa {
                let mut da = vec![F::zero(); gn * m * k];
                for gi in 0..gn {
                    mm_nn(
                        m,
                        p,
                        k,
                        F::one(),
                        &gd[gi * m * p..(gi + 1) * m * p],
                        &tb.data()[gi * p * k..(gi + 1) * p * k],
                        F::zero(),
                        &mut da[gi * m * k..(gi + 1) * m * k],
                    );
                }
                sink.add(a, Tensor::new(ta.shape(), da));
            }
            if wb {
                let mut db = vec![F::zero(); gn * p * k];
                for gi in 0..gn {
                    mm_tn(
                        p,
                        m,
                        k,
                        F::one(),
                        &gd[gi * m * p..(gi + 1) * m * p],
                        &ta.data()[gi * m * k..(gi + 1) * m * k],
                        F::zero(),
                        &mut db[gi * p * k..(gi + 1) * p * k],
                    );
                }
                sink.add(b, Tensor::new(tb.shape(), db));
            }
        })
    }

    /// Per-head linear: x [B, H, n, k] @ w [Hw, k, p] -> [B, H, n, p].
    /// `Hw` is either H (independent heads) or 1 (weights shared by heads).
    pub fn head_linear(&mut self, x: Var, w: Var) -> Var {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        assert_eq!(tx.rank(), 4);
        assert_eq!(tw.rank(), 3);
        let (b_dim, h, n, k) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (hw, kw, p) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        assert_eq!(k, kw);
        assert!(hw == h || hw == 1, "head_linear: weight heads must be H or 1");
        let mut y = vec![F::zero(); b_dim * h * n * p];
        for b in 0..b_dim {
            for hi in 0..h {
                let ws = if hw == 1 { 0 } else { hi };
                mm_nn(
                    n,
                    k,
                    p,
                    F::one(),
                    &tx.data()[((b * h + hi) * n) * k..((b * h + hi) * n + n) * k],
                    &tw.data()[ws * k * p..(ws + 1) * k * p],
                    F::zero(),
                    &mut y[((b * h + hi) * n) * p..((b * h + hi) * n + n) * p],
                );
            }
        }
        let out = Tensor::new(&[b_dim, h, n, p], y);
        let (wx, ww) = (self.wants(x), self.wants(w));
        self.push_op(out, &[x, w], move |g, sink| {
            let gd = g.data();
            if wx {
                let mut dx = vec![F::zero(); b_dim * h * n * k];
                for b in 0..b_dim {
                    for hi in 0..h {
                        let ws = if hw == 1 { 0 } else { hi };
                        mm_nt(
                            n,
                            p,
                            k,
                            F::one(),
                            &gd[((b * h + hi) * n) * p..((b * h + hi) * n + n) * p],
                            &tw.data()[ws * k * p..(ws + 1) * k * p],
                            F::zero(),
                            &mut dx[((b * h + hi) * n) * k..((b * h + hi) * n + n) * k],
                        );
                    }
                }
                sink.add(x, Tensor::new(tx.shape(), dx));
            }
            if ww {
                let mut dw = vec![F::zero(); hw * k * p];
                for b in 0..b_dim {
                    for hi in 0..h {
                        let ws = if hw == 1 { 0 } else { hi };
                        mm_tn(
                            k,
                            n,
                            p,
                            F::one(),
                            &tx.data()[((b * h + hi) * n) * k..((b * h + hi) * n + n) * k],
                            &gd[((b * h + hi) * n) * p..((b * h + hi) * n + n) * p],
                            F::one(),
                            &mut dw[ws * k * p..(ws + 1) * k * p],
                        );
                    }
                }
                sink.add(w, Tensor::new(tw.shape(), dw));
            }
        })
    }

    /// Per-head dot with a weight vector: x [B, H, n, k] . w [Hw, k] -> [B, H, n].
    pub fn head_matvec(&mut self, x: Var, w: Var) -> Var {
        let tx = self.value(x).clone();
        let tw = self.value(w).clone();
        assert_eq!(tx.rank(), 4);
        assert_eq!(tw.rank(), 2);
        let (b_dim, h, n, k) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (hw, kw) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(k, kw);
        assert!(hw == h || hw == 1);
        let xd = tx.data();
        let wd = tw.data();
        let mut y = vec![F::zero(); b_dim * h * n];
        for b in 0..b_dim {
            for hi in 0..h {
                let ws = if hw == 1 { 0 } else { hi };
                for i in 0..n {
                    let row = &xd[((b * h + hi) * n + i) * k..((b * h + hi) * n + i + 1) * k];
                    let mut acc = F::zero();
                    for f in 0..k {
                        acc += row[f] * wd[ws * k + f];
                    }
                    y[(b * h + hi) * n + i] = acc;
                }
            }
        }
        let out = Tensor::new(&[b_dim, h, n], y);
        let (wx, ww) = (self.wants(x), self.wants(w));
        self.push_op(out, &[x, w], move |g, sink| {
            let gd = g.data();
            if wx {
                let mut dx = vec![F::zero(); b_dim * h * n * k];
                for b in 0..b_dim {
                    for hi in 0..h {
                        let ws = if hw == 1 { 0 } else { hi };
                        for i in 0..n {
                            let gi = gd[(b * h + hi) * n + i];
                            let dst = &mut dx
                                [((b * h + hi) * n + i) * k..((b * h + hi) * n + i + 1) * k];
                            for f in 0..k {
                                dst[f] = gi * tw.data()[ws * k + f];
                            }
                        }
                    }
                }
                sink.add(x, Tensor::new(tx.shape(), dx));
            }
            if ww {
                let mut dw = vec![F::zero(); hw * k];
                for b in 0..b_dim {
                    for hi in 0..h {
                        let ws = if hw == 1 { 0 } else { hi };
                        for i in 0..n {
                            let gi = gd[(b * h + hi) * n + i];
                            let row = &tx.data()
                                [((b * h + hi) * n + i) * k..((b * h + hi) * n + i + 1) * k];
                            for f in 0..k {
                                dw[ws * k + f] += gi * row[f];
                            }
                        }
                    }
                }
                sink.add(w, Tensor::new(tw.shape(), dw));
            }
        })
    }

    /// x [B, H, n] + b [Hw] broadcast over batch and positions.
    pub fn add_head_bias(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x).clone();
        let tb = self.value(b).clone();
        assert_eq!(tx.rank(), 3);
        assert_eq!(tb.rank(), 1);
        let (b_dim, h, n) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let hw = tb.shape()[0];
        assert!(hw == h || hw == 1);
        let mut y = tx.data().to_vec();
        for bi in 0..b_dim {
            for hi in 0..h {
                let ws = if hw == 1 { 0 } else { hi };
                for i in 0..n {
                    y[(bi * h + hi) * n + i] += tb.data()[ws];
                }
            }
        }
        let out = Tensor::new(tx.shape(), y);
        let (wx, wb) = (self.wants(x), self.wants(b));
        self.push_op(out, &[x, b], move |g, sink| {
            if wx {
                sink.add(x, g.clone());
            }
            if wb {
                let gd = g.data();
                let mut db = vec![F::zero(); hw];
                for bi in 0..b_dim {
                    for hi in 0..h {
                        let ws = if hw == 1 { 0 } else { hi };
                        for i in 0..n {
                            db[ws] += gd[(bi * h + hi) * n + i];
                        }
                    }
                }
                sink.add(b, Tensor::new(&[hw], db));
            }
        })
    }

    /// Multiply by a rank-0 scalar variable.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let tx = self.value(x).clone();
        let ts = self.value(s).clone();
        assert_eq!(ts.numel(), 1);
        let sv = ts.item();
        let out = tx.map(|v| v * sv);
        let (wx, ws) = (self.wants(x), self.wants(s));
        self.push_op(out, &[x, s], move |g, sink| {
            if wx {
                sink.add(x, g.map(|v| v * sv));
            }
            if ws {
                let mut acc = F::zero();
                for (gi, xi) in g.data().iter().zip(tx.data()) {
                    acc += *gi * *xi;
                }
                sink.add(s, Tensor::new(ts.shape(), vec![acc]));
            }
        })
    }

    // ---- broadcasting ----

    /// x [..., p] + b [p].
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x).clone();
        let tb = self.value(b).clone();
        let p = *tx.shape().last().unwrap();
        assert_eq!(tb.shape(), [p]);
        let rows = tx.numel() / p;
        let mut y = tx.data().to_vec();
        for r in 0..rows {
            for j in 0..p {
                y[r * p + j] += tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape(), y);
        let (wx, wb) = (self.wants(x), self.wants(b));
        self.push_op(out, &[x, b], move |g, sink| {
            if wx {
                sink.add(x, g.clone());
            }
            if wb {
                let gd = g.data();
                let mut db = vec![F::zero(); p];
                for r in 0..rows {
                    for j in 0..p {
                        db[j] += gd[r * p + j];
                    }
                }
                sink.add(b, Tensor::new(&[p], db));
            }
        })
    }

    /// y[..., i, j] = u[..., i] + v[..., j] for u, v of shape [..., n].
    pub fn outer_sum(&mut self, u: Var, v: Var) -> Var {
        let tu = self.value(u).clone();
        let tv = self.value(v).clone();
        assert_eq!(tu.shape(), tv.shape());
        let n = *tu.shape().last().unwrap();
        let lead = tu.numel() / n;
        let mut y = vec![F::zero(); lead * n * n];
        for l in 0..lead {
            for i in 0..n {
                let ui = tu.data()[l * n + i];
                for j in 0..n {
                    y[(l * n + i) * n + j] = ui + tv.data()[l * n + j];
                }
            }
        }
        let mut out_shape = tu.shape().to_vec();
        out_shape.push(n);
        let out = Tensor::new(&out_shape, y);
        let (wu, wv) = (self.wants(u), self.wants(v));
        self.push_op(out, &[u, v], move |g, sink| {
            let gd = g.data();
            if wu {
                let mut du = vec![F::zero(); lead * n];
                for l in 0..lead {
                    for i in 0..n {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc += gd[(l * n + i) * n + j];
                        }
                        du[l * n + i] = acc;
                    }
                }
                sink.add(u, Tensor::new(tu.shape(), du));
            }
            if wv {
                let mut dv = vec![F::zero(); lead * n];
                for l in 0..lead {
                    for i in 0..n {
                        for j in 0..n {
                            dv[l * n + j] += gd[(l * n + i) * n + j];
                        }
                    }
                }
                sink.add(v, Tensor::new(tv.shape(), dv));
            }
        })
    }

    /// a [..., n, m] scaled per row by s [..., n].
    pub fn mul_row_scale(&mut self, a: Var, s: Var) -> Var {
        let ta = self.value(a).clone();
        let ts = self.value(s).clone();
        let ar = ta.rank();
        let (n, m) = (ta.shape()[ar - 2], ta.shape()[ar - 1]);
        assert_eq!(&ta.shape()[..ar - 1], ts.shape());
        let lead = ta.numel() / (n * m);
        let mut y = ta.data().to_vec();
        for l in 0..lead {
            for i in 0..n {
                let sv = ts.data()[l * n + i];
                for j in 0..m {
                    y[(l * n + i) * m + j] *= sv;
                }
            }
        }
        let out = Tensor::new(ta.shape(), y);
        let (wa, ws) = (self.wants(a), self.wants(s));
        self.push_op(out, &[a, s], move |g, sink| {
            let gd = g.data();
            if wa {
                let mut da = gd.to_vec();
                for l in 0..lead {
                    for i in 0..n {
                        let sv = ts.data()[l * n + i];
                        for j in 0..m {
                            da[(l * n + i) * m + j] *= sv;
                        }
                    }
                }
                sink.add(a, Tensor::new(ta.shape(), da));
            }
            if ws {
                let mut ds = vec![F::zero(); lead * n];
                for l in 0..lead {
                    for i in 0..n {
                        let mut acc = F::zero();
                        for j in 0..m {
                            acc += gd[(l * n + i) * m + j] * ta.data()[(l * n + i) * m + j];
                        }
                        ds[l * n + i] = acc;
                    }
                }
                sink.add(s, Tensor::new(ts.shape(), ds));
            }
        })
    }

    /// x [B, n, d] + p [n, d] masked per position: pads contribute nothing.
    pub fn add_pos(&mut self, x: Var, p: Var, valid: Arc<Vec<bool>>) -> Var {
        let tx = self.value(x).clone();
        let tp = self.value(p).clone();
        assert_eq!(tx.rank(), 3);
        let (b_dim, n, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        assert_eq!(tp.shape(), [n, d]);
        assert_eq!(valid.len(), b_dim * n);
        let mut y = tx.data().to_vec();
        for b in 0..b_dim {
            for i in 0..n {
                if valid[b * n + i] {
                    for f in 0..d {
                        y[(b * n + i) * d + f] += tp.data()[i * d + f];
                    }
                }
            }
        }
        let out = Tensor::new(tx.shape(), y);
        let (wx, wp) = (self.wants(x), self.wants(p));
        self.push_op(out, &[x, p], move |g, sink| {
            if wx {
                sink.add(x, g.clone());
            }
            if wp {
                let gd = g.data();
                let mut dp = vec![F::zero(); n * d];
                for b in 0..b_dim {
                    for i in 0..n {
                        if valid[b * n + i] {
                            for f in 0..d {
                                dp[i * d + f] += gd[(b * n + i) * d + f];
                            }
                        }
                    }
                }
                sink.add(p, Tensor::new(&[n, d], dp));
            }
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        let total: F = self.value(a).data().iter().copied().sum();
        let out = Tensor::scalar(total);
        self.push_op(out, &[a], move |g, sink| {
            sink.add(a, Tensor::full(&shape, g.item()));
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_f64(n as f64))
    }

    /// Sum over the last two dims: [..., n, m] -> [...].
    pub fn sum_last2(&mut self, a: Var) -> Var {
        let ta = self.value(a).clone();
        let ar = ta.rank();
        assert!(ar >= 2);
        let (n, m) = (ta.shape()[ar - 2], ta.shape()[ar - 1]);
        let lead_shape = ta.shape()[..ar - 2].to_vec();
        let lead = ta.numel() / (n * m);
        let mut y = vec![F::zero(); lead];
        for l in 0..lead {
            let mut acc = F::zero();
            for e in &ta.data()[l * n * m..(l + 1) * n * m] {
                acc += *e;
            }
            y[l] = acc;
        }
        let out = Tensor::new(&lead_shape, y);
        let full_shape = ta.shape().to_vec();
        self.push_op(out, &[a], move |g, sink| {
            let gd = g.data();
            let mut da = vec![F::zero(); lead * n * m];
            for l in 0..lead {
                let gv = gd[l];
                for e in &mut da[l * n * m..(l + 1) * n * m] {
                    *e = gv;
                }
            }
            sink.add(a, Tensor::new(&full_shape, da));
        })
    }

    // ---- softmax and losses ----

    /// Row softmax over allowed entries of a [B, H, n, n] logit tensor.
    ///
    /// `allow` has shape [B, n, n] (shared by heads); disallowed entries get
    /// exactly 0. A row with no allowed key puts weight 1 on its own
    /// position and is treated as constant (zero adjoint), which keeps
    /// all-padding query rows inert.
    pub fn masked_softmax(&mut self, a: Var, allow: Arc<Vec<bool>>) -> Var {
        let ta = self.value(a).clone();
        assert_eq!(ta.rank(), 4);
        let (b_dim, h, n, n2) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], ta.shape()[3]);
        assert_eq!(n, n2);
        assert_eq!(allow.len(), b_dim * n * n);
        let mut y = vec![F::zero(); ta.numel()];
        for b in 0..b_dim {
            for hi in 0..h {
                for i in 0..n {
                    let mrow = &allow[(b * n + i) * n..(b * n + i + 1) * n];
                    let xrow = &ta.data()[((b * h + hi) * n + i) * n..((b * h + hi) * n + i + 1) * n];
                    let yrow = &mut y[((b * h + hi) * n + i) * n..((b * h + hi) * n + i + 1) * n];
                    softmax_row(xrow, mrow, i, yrow);
                }
            }
        }
        let out = Tensor::new(ta.shape(), y);
        let yk = out.clone();
        self.push_op(out, &[a], move |g, sink| {
            let gd = g.data();
            let yd = yk.data();
            let mut da = vec![F::zero(); yd.len()];
            for b in 0..b_dim {
                for hi in 0..h {
                    for i in 0..n {
                        let mrow = &allow[(b * n + i) * n..(b * n + i + 1) * n];
                        if !mrow.iter().any(|&m| m) {
                            continue; // fallback rows are constants
                        }
                        let base = ((b * h + hi) * n + i) * n;
                        let mut dot = F::zero();
                        for j in 0..n {
                            dot += gd[base + j] * yd[base + j];
                        }
                        for j in 0..n {
                            if mrow[j] {
                                da[base + j] = yd[base + j] * (gd[base + j] - dot);
                            }
                        }
                    }
                }
            }
            sink.add(a, Tensor::new(yk.shape(), da));
        })
    }

    /// Plain row softmax of a [r, c] tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a).clone();
        assert_eq!(ta.rank(), 2);
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let mut y = vec![F::zero(); r * c];
        let all = vec![true; c];
        for row in 0..r {
            softmax_row(
                &ta.data()[row * c..(row + 1) * c],
                &all,
                0,
                &mut y[row * c..(row + 1) * c],
            );
        }
        let out = Tensor::new(&[r, c], y);
        let yk = out.clone();
        self.push_op(out, &[a], move |g, sink| {
            let gd = g.data();
            let yd = yk.data();
            let mut da = vec![F::zero(); r * c];
            for row in 0..r {
                let base = row * c;
                let mut dot = F::zero();
                for j in 0..c {
                    dot += gd[base + j] * yd[base + j];
                }
                for j in 0..c {
                    da[base + j] = yd[base + j] * (gd[base + j] - dot);
                }
            }
            sink.add(a, Tensor::new(&[r, c], da));
        })
    }

    /// Mean negative log likelihood over rows of a probability matrix.
    ///
    /// `floor` guards the log: probabilities below it contribute -ln(floor)
    /// with zero adjoint.
    pub fn nll_mean(&mut self, probs: Var, targets: Arc<Vec<usize>>, floor: F) -> Var {
        let tp = self.value(probs).clone();
        assert_eq!(tp.rank(), 2);
        let (r, c) = (tp.shape()[0], tp.shape()[1]);
        assert_eq!(targets.len(), r);
        let mut acc = F::zero();
        for (row, &t) in targets.iter().enumerate() {
            assert!(t < c, "target column {} out of range {}", t, c);
            acc += -(tp.data()[row * c + t].max(floor)).ln();
        }
        let inv_r = F::one() / F::from_f64(r as f64);
        let out = Tensor::scalar(acc * inv_r);
        self.push_op(out, &[probs], move |g, sink| {
            let gv = g.item();
            let mut dp = vec![F::zero(); r * c];
            for (row, &t) in targets.iter().enumerate() {
                let p = tp.data()[row * c + t];
                if p > floor {
                    dp[row * c + t] = -gv * inv_r / p;
                }
            }
            sink.add(probs, Tensor::new(&[r, c], dp));
        })
    }

    // ---- embedding / normalization ----

    /// Row gather: table [v, d], ids laid out as [rows, cols] -> [rows, cols, d].
    ///
    /// With `skip_row0_grad`, scatter in the backward pass ignores id 0 so a
    /// padding row stays untouched.
    pub fn gather_rows(
        &mut self,
        table: Var,
        ids: Arc<Vec<usize>>,
        rows: usize,
        cols: usize,
        skip_row0_grad: bool,
    ) -> Var {
        let tt = self.value(table).clone();
        assert_eq!(tt.rank(), 2);
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        assert_eq!(ids.len(), rows * cols);
        let mut y = Vec::with_capacity(rows * cols * d);
        for &id in ids.iter() {
            assert!(id < v, "embedding id {} out of range {}", id, v);
            y.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(&[rows, cols, d], y);
        self.push_op(out, &[table], move |g, sink| {
            let gd = g.data();
            let mut dt = vec![F::zero(); v * d];
            for (k, &id) in ids.iter().enumerate() {
                if skip_row0_grad && id == 0 {
                    continue;
                }
                for f in 0..d {
                    dt[id * d + f] += gd[k * d + f];
                }
            }
            sink.add(table, Tensor::new(&[v, d], dt));
        })
    }

    /// Parameter-free layer normalization over the last dimension.
    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let ta = self.value(a).clone();
        let d = *ta.shape().last().unwrap();
        let rows = ta.numel() / d;
        let inv_d = F::one() / F::from_f64(d as f64);
        let mut y = vec![F::zero(); ta.numel()];
        let mut inv_std = vec![F::zero(); rows];
        for r in 0..rows {
            let xrow = &ta.data()[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &x in xrow {
                mean += x;
            }
            mean *= inv_d;
            let mut var = F::zero();
            for &x in xrow {
                let c = x - mean;
                var += c * c;
            }
            var *= inv_d;
            let is = F::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                y[r * d + j] = (xrow[j] - mean) * is;
            }
        }
        let out = Tensor::new(ta.shape(), y);
        let yk = out.clone();
        let shape = ta.shape().to_vec();
        self.push_op(out, &[a], move |g, sink| {
            let gd = g.data();
            let yd = yk.data();
            let mut da = vec![F::zero(); yd.len()];
            for r in 0..rows {
                let base = r * d;
                let mut g_mean = F::zero();
                let mut gy_mean = F::zero();
                for j in 0..d {
                    g_mean += gd[base + j];
                    gy_mean += gd[base + j] * yd[base + j];
                }
                g_mean *= inv_d;
                gy_mean *= inv_d;
                for j in 0..d {
                    da[base + j] =
                        inv_std[r] * (gd[base + j] - g_mean - yd[base + j] * gy_mean);
                }
            }
            sink.add(a, Tensor::new(&shape, da));
        })
    }
}

/// Numerically stabilized softmax of one row restricted to `allow`; an empty
/// allow set degenerates to weight 1 at `self_pos`.
fn softmax_row<F: Scalar>(x: &[F], allow: &[bool], self_pos: usize, out: &mut [F]) {
    let mut max = F::neg_infinity();
    for (j, &a) in allow.iter().enumerate() {
        if a && x[j] > max {
            max = x[j];
        }
    }
    if max == F::neg_infinity() {
        out[self_pos] = F::one();
        return;
    }
    let mut sum = F::zero();
    for j in 0..x.len() {
        if allow[j] {
            let e = (x[j] - max).exp();
            out[j] = e;
            sum += e;
        }
    }
    let inv = F::one() / sum;
    for (j, &a) in allow.iter().enumerate() {
        if a {
            out[j] *= inv;
        }
    }
}

fn batch_dims<F: Scalar>(t: &Tensor<F>) -> (usize, usize, usize) {
    let r = t.rank();
    assert!(r >= 2, "batched matmul needs rank >= 2");
    let m = t.shape()[r - 2];
    let k = t.shape()[r - 1];
    (t.numel() / (m * k), m, k)
}

fn permute_0213_tensor<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    assert_eq!(t.rank(), 4, "permute_0213 expects rank 4");
    let (d0, d1, d2, d3) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let src = t.data();
    let mut out = vec![F::zero(); t.numel()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let src_base = ((a * d1 + b) * d2 + c) * d3;
                let dst_base = ((a * d2 + c) * d1 + b) * d3;
                out[dst_base..dst_base + d3].copy_from_slice(&src[src_base..src_base + d3]);
            }
        }
    }
    Tensor::new(&[d0, d2, d1, d3], out)
}
