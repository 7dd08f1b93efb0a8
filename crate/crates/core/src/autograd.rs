//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Token-level activations are rank-2 `[rows, channels]` tensors whose rows
//! enumerate a 3D grid in (z, y, x) order ("channels-last"). Spatial ops take
//! the grid extent explicitly.

use std::sync::Arc;

use rayon::prelude::*;

use crate::grid::{numel, Dims};
use crate::kernels::{self, View};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Where a linear layer's weight keeps its output axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightLayout {
    /// `[out, in]`, as stored by most checkpoints.
    OutIn,
    /// `[in, out]`, i.e. `y = x·W`.
    InOut,
}

pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(true)
    }
}

impl Graph {
    pub fn new(grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Records a constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(Arc::new(t), false)
    }

    /// Records a leaf sharing storage with the caller (e.g. a model parameter).
    pub fn leaf(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            requires_grad: requires_grad && self.grad_enabled,
            parents: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn record<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `root`, returning gradients of every leaf
    /// that requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let pgrads = bw(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.numel(), vb.numel(), "add: size mismatch");
        let data: Vec<f32> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.record(Tensor::from_parts(shape, data), &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| Tensor::from_parts(sa.clone(), g.data().to_vec())),
                needs[1].then(|| Tensor::from_parts(sb.clone(), g.data().to_vec())),
            ]
        })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let data: Vec<f32> = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = xv.shape().to_vec();
        self.record(Tensor::from_parts(shape.clone(), data), &[x], move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(gy, &v)| gy * kernels::gelu_grad(v))
                .collect();
            vec![Some(Tensor::from_parts(shape.clone(), d))]
        })
    }

    // ------------------------------------------------------------------
    // Dense layers
    // ------------------------------------------------------------------

    /// `y = x·Wᵀ + b` (`OutIn`) or `y = x·W + b` (`InOut`) for `x: [n, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, layout: WeightLayout) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let n = xv.rows();
        let k = xv.cols();
        let (out, w_in) = match layout {
            WeightLayout::OutIn => (wv.shape()[0], wv.cols()),
            WeightLayout::InOut => (wv.cols(), wv.shape()[0]),
        };
        assert_eq!(k, w_in, "linear: input width {k} vs weight {:?}", wv.shape());
        let trans_w = layout == WeightLayout::OutIn;
        let mut y = vec![0.0f32; n * out];
        kernels::matmul(n, k, out, xv.data(), false, wv.data(), trans_w, &mut y, false);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.numel(), out, "linear: bias size");
            for row in y.chunks_mut(out) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += *bb;
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        let (x_shape, w_shape) = (xv.shape().to_vec(), wv.shape().to_vec());
        self.record(Tensor::from_parts(vec![n, out], y), &parents, move |g, needs| {
            let gy = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; n * k];
                // dX = dY·W (OutIn) or dY·Wᵀ (InOut)
                kernels::matmul(n, out, k, gy, false, wv.data(), !trans_w, &mut dx, false);
                Tensor::from_parts(x_shape.clone(), dx)
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; out * k];
                match layout {
                    WeightLayout::OutIn => kernels::matmul_tn_acc(n, out, k, gy, xv.data(), &mut dw),
                    WeightLayout::InOut => kernels::matmul_tn_acc(n, k, out, xv.data(), gy, &mut dw),
                }
                Tensor::from_parts(w_shape.clone(), dw)
            });
            let mut res = vec![dx, dw];
            if has_bias {
                res.push(needs[2].then(|| {
                    let mut db = vec![0.0; out];
                    kernels::col_sums_acc(n, out, gy, &mut db);
                    Tensor::from_parts(vec![out], db)
                }));
            }
            res
        })
    }

    /// Row-wise layer normalisation of `x: [n, c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let xv = self.value_arc(x);
        let gv = self.value_arc(gamma);
        let bv = self.value(beta).clone();
        let n = xv.rows();
        let c = xv.cols();
        assert_eq!(gv.numel(), c);
        let mut xhat = vec![0.0f32; n * c];
        let mut rstd = vec![0.0f32; n];
        let mut y = vec![0.0f32; n * c];
        for r in 0..n {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.record(
            Tensor::from_parts(shape.clone(), y),
            &[x, gamma, beta],
            move |g, needs| {
                let gy = g.data();
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0f32; n * c];
                    for r in 0..n {
                        let mut mean_d = 0.0f32;
                        let mut mean_dh = 0.0f32;
                        for j in 0..c {
                            let d = gy[r * c + j] * gv.data()[j];
                            mean_d += d;
                            mean_dh += d * xhat[r * c + j];
                        }
                        mean_d /= c as f32;
                        mean_dh /= c as f32;
                        for j in 0..c {
                            let d = gy[r * c + j] * gv.data()[j];
                            dx[r * c + j] = rstd[r] * (d - mean_d - xhat[r * c + j] * mean_dh);
                        }
                    }
                    Tensor::from_parts(shape.clone(), dx)
                });
                let dgamma = needs[1].then(|| {
                    let mut d = vec![0.0f32; c];
                    for r in 0..n {
                        for j in 0..c {
                            d[j] += gy[r * c + j] * xhat[r * c + j];
                        }
                    }
                    Tensor::from_parts(vec![c], d)
                });
                let dbeta = needs[2].then(|| {
                    let mut d = vec![0.0f32; c];
                    kernels::col_sums_acc(n, c, gy, &mut d);
                    Tensor::from_parts(vec![c], d)
                });
                vec![dx, dgamma, dbeta]
            },
        )
    }

    // ------------------------------------------------------------------
    // Row / column plumbing
    // ------------------------------------------------------------------

    /// `out[i] = x[idx[i]]`, or a zero row where `idx[i]` is `None`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<Option<u32>>>) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0f32; idx.len() * c];
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = src {
                let s = *s as usize;
                out[i * c..(i + 1) * c].copy_from_slice(&xv.data()[s * c..(s + 1) * c]);
            }
        }
        let rows = idx.len();
        self.record(Tensor::from_parts(vec![rows, c], out), &[x], move |g, _| {
            let mut dx = vec![0.0f32; n * c];
            for (i, src) in idx.iter().enumerate() {
                if let Some(s) = src {
                    let s = *s as usize;
                    for j in 0..c {
                        dx[s * c + j] += g.data()[i * c + j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c], dx))]
        })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let idx: Vec<Option<u32>> = (start..start + len).map(|i| Some(i as u32)).collect();
        self.gather_rows(x, Arc::new(idx))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        assert!(start + len <= c);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        self.record(Tensor::from_parts(vec![n, len], out), &[x], move |g, _| {
            let mut dx = vec![0.0f32; n * c];
            for r in 0..n {
                dx[r * c + start..r * c + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::from_parts(vec![n, c], dx))]
        })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let n = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).cols()).collect();
        for &v in xs {
            assert_eq!(self.value(v).rows(), n, "concat_cols: row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; n * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let d = self.value(v).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.record(Tensor::from_parts(vec![n, total], out), xs, move |g, needs| {
            let mut res = Vec::with_capacity(widths.len());
            let mut off = 0;
            for (i, &w) in widths.iter().enumerate() {
                if needs[i] {
                    let mut d = Vec::with_capacity(n * w);
                    for r in 0..n {
                        d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                    }
                    res.push(Some(Tensor::from_parts(vec![n, w], d)));
                } else {
                    res.push(None);
                }
                off += w;
            }
            res
        })
    }

    /// Stacks `xs` vertically; all inputs share the column count.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let c = self.value(xs[0]).cols();
        let rows: Vec<usize> = xs.iter().map(|&v| self.value(v).rows()).collect();
        let mut out = Vec::with_capacity(rows.iter().sum::<usize>() * c);
        for &v in xs {
            assert_eq!(self.value(v).cols(), c, "concat_rows: column mismatch");
            out.extend_from_slice(self.value(v).data());
        }
        let total = rows.iter().sum();
        self.record(Tensor::from_parts(vec![total, c], out), xs, move |g, needs| {
            let mut off = 0;
            rows.iter()
                .zip(needs)
                .map(|(&r, &need)| {
                    let part = need.then(|| Tensor::from_parts(vec![r, c], g.data()[off * c..(off + r) * c].to_vec()));
                    off += r;
                    part
                })
                .collect()
        })
    }

    // ------------------------------------------------------------------
    // Attention
    // ------------------------------------------------------------------

    /// Grouped multi-head scaled dot-product attention. `q` has `G·lq` rows
    /// and `k`, `v` have `G·lk` rows; group `g` of queries attends only to
    /// group `g` of keys. All three share the channel width `c = heads·dh`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lq: usize, lk: usize, heads: usize) -> Var {
        let qv = self.value_arc(q);
        let kv = self.value_arc(k);
        let vv = self.value_arc(v);
        let c = qv.cols();
        assert_eq!(kv.cols(), c);
        assert_eq!(vv.cols(), c);
        assert_eq!(c % heads, 0, "attention: width {c} not divisible by {heads} heads");
        assert_eq!(qv.rows() % lq, 0);
        let groups = qv.rows() / lq;
        assert_eq!(kv.rows(), groups * lk, "attention: key rows");
        assert_eq!(vv.rows(), groups * lk, "attention: value rows");
        let dh = c / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let mut out = vec![0.0f32; groups * lq * c];
        let mut probs = vec![0.0f32; groups * heads * lq * lk];
        out.par_chunks_mut(lq * c)
            .zip(probs.par_chunks_mut(heads * lq * lk))
            .enumerate()
            .for_each(|(gi, (o, p))| {
                for h in 0..heads {
                    let ph = &mut p[h * lq * lk..(h + 1) * lq * lk];
                    let qview = View {
                        offset: gi * lq * c + h * dh,
                        rs: c,
                        cs: 1,
                    };
                    // Kᵀ viewed as [dh, lk]
                    let ktview = View {
                        offset: gi * lk * c + h * dh,
                        rs: 1,
                        cs: c,
                    };
                    kernels::sgemm(lq, dh, lk, scale, qv.data(), qview, kv.data(), ktview, 0.0, ph, View::dense(lk));
                    for row in ph.chunks_mut(lk) {
                        softmax_in_place(row);
                    }
                    let vview = View {
                        offset: gi * lk * c + h * dh,
                        rs: c,
                        cs: 1,
                    };
                    kernels::sgemm(lq, lk, dh, 1.0, ph, View::dense(lk), vv.data(), vview, 0.0, o, View { offset: h * dh, rs: c, cs: 1 });
                }
            });
        let (q_shape, k_shape, v_shape) = (qv.shape().to_vec(), kv.shape().to_vec(), vv.shape().to_vec());
        let n_q = groups * lq;
        self.record(Tensor::from_parts(vec![n_q, c], out), &[q, k, v], move |g, _| {
            let gy = g.data();
            let mut dq = vec![0.0f32; groups * lq * c];
            let mut dk = vec![0.0f32; groups * lk * c];
            let mut dv = vec![0.0f32; groups * lk * c];
            dq.par_chunks_mut(lq * c)
                .zip(dk.par_chunks_mut(lk * c))
                .zip(dv.par_chunks_mut(lk * c))
                .enumerate()
                .for_each(|(gi, ((dqg, dkg), dvg))| {
                    let mut dp = vec![0.0f32; lq * lk];
                    for h in 0..heads {
                        let ph = &probs[(gi * heads + h) * lq * lk..(gi * heads + h + 1) * lq * lk];
                        let gview = View {
                            offset: gi * lq * c + h * dh,
                            rs: c,
                            cs: 1,
                        };
                        let head_local = View {
                            offset: h * dh,
                            rs: c,
                            cs: 1,
                        };
                        // dV = Pᵀ·dO
                        kernels::sgemm(lk, lq, dh, 1.0, ph, View::dense_t(lk), gy, gview, 0.0, dvg, head_local);
                        // dP = dO·Vᵀ
                        let vtview = View {
                            offset: gi * lk * c + h * dh,
                            rs: 1,
                            cs: c,
                        };
                        kernels::sgemm(lq, dh, lk, 1.0, gy, gview, vv.data(), vtview, 0.0, &mut dp, View::dense(lk));
                        // dS = P ∘ (dP − rowsum(dP ∘ P))
                        for (prow, drow) in ph.chunks(lk).zip(dp.chunks_mut(lk)) {
                            let dot: f32 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (d, &pp) in drow.iter_mut().zip(prow) {
                                *d = pp * (*d - dot);
                            }
                        }
                        // dQ = scale·dS·K
                        let kview = View {
                            offset: gi * lk * c + h * dh,
                            rs: c,
                            cs: 1,
                        };
                        kernels::sgemm(lq, lk, dh, scale, &dp, View::dense(lk), kv.data(), kview, 0.0, dqg, head_local);
                        // dK = scale·dSᵀ·Q
                        let qview = View {
                            offset: gi * lq * c + h * dh,
                            rs: c,
                            cs: 1,
                        };
                        kernels::sgemm(lk, lq, dh, scale, &dp, View::dense_t(lk), qv.data(), qview, 0.0, dkg, head_local);
                    }
                });
            vec![
                Some(Tensor::from_parts(q_shape.clone(), dq)),
                Some(Tensor::from_parts(k_shape.clone(), dk)),
                Some(Tensor::from_parts(v_shape.clone(), dv)),
            ]
        })
    }

    // ------------------------------------------------------------------
    // Volumetric ops (channels-last)
    // ------------------------------------------------------------------

    /// Dense 3D convolution with cubic kernel `k ∈ {1, 3}`, stride 1 and
    /// zero "same" padding. `w` is `[cout, cin, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, grid: Dims, w: Var, b: Option<Var>) -> Var {
        let wshape = self.value(w).shape().to_vec();
        let ksz = wshape[2];
        if ksz == 1 {
            return self.linear(x, w, b, WeightLayout::OutIn);
        }
        assert_eq!(ksz, 3, "conv3d supports kernels 1 and 3");
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let n = numel(grid);
        assert_eq!(xv.rows(), n, "conv3d: rows vs grid");
        let cin = xv.cols();
        let cout = wshape[0];
        assert_eq!(wshape[1], cin, "conv3d: input channels");
        let kcols = cin * 27;
        let col = im2col3(xv.data(), grid, cin);
        let mut y = vec![0.0f32; n * cout];
        kernels::matmul(n, kcols, cout, &col, false, wv.data(), true, &mut y, false);
        drop(col);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_mut(cout) {
                for (o, bb) in row.iter_mut().zip(bv.data()) {
                    *o += *bb;
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        let x_shape = xv.shape().to_vec();
        self.record(Tensor::from_parts(vec![n, cout], y), &parents, move |g, needs| {
            let gy = g.data();
            let dw = needs[1].then(|| {
                let col = im2col3(xv.data(), grid, cin);
                let mut dw = vec![0.0f32; cout * kcols];
                kernels::matmul_tn_acc(n, cout, kcols, gy, &col, &mut dw);
                Tensor::from_parts(wshape.clone(), dw)
            });
            let dx = needs[0].then(|| {
                let mut dcol = vec![0.0f32; n * kcols];
                kernels::matmul(n, cout, kcols, gy, false, wv.data(), false, &mut dcol, false);
                Tensor::from_parts(x_shape.clone(), col2im3(&dcol, grid, cin))
            });
            let mut res = vec![dx, dw];
            if has_bias {
                res.push(needs[2].then(|| {
                    let mut db = vec![0.0f32; cout];
                    kernels::col_sums_acc(n, cout, gy, &mut db);
                    Tensor::from_parts(vec![cout], db)
                }));
            }
            res
        })
    }

    /// Depthwise 3×3×3 convolution, zero "same" padding. `w` is `[ch, 1, 3, 3, 3]`.
    pub fn dwconv3d(&mut self, x: Var, grid: Dims, w: Var, b: Option<Var>) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let n = numel(grid);
        let ch = xv.cols();
        assert_eq!(xv.rows(), n);
        assert_eq!(wv.numel(), ch * 27, "dwconv3d: weight size");
        // weights regrouped as [27, ch] for contiguous channel loops
        let mut wt = vec![0.0f32; 27 * ch];
        for c in 0..ch {
            for o in 0..27 {
                wt[o * ch + c] = wv.data()[c * 27 + o];
            }
        }
        let mut y = vec![0.0f32; n * ch];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in y.chunks_mut(ch) {
                row.copy_from_slice(bv.data());
            }
        }
        for_each_neighbor(grid, |out_i, off, in_i| {
            let src = &xv.data()[in_i * ch..(in_i + 1) * ch];
            let ws = &wt[off * ch..(off + 1) * ch];
            let dst = &mut y[out_i * ch..(out_i + 1) * ch];
            for j in 0..ch {
                dst[j] += ws[j] * src[j];
            }
        });
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        let (x_shape, w_shape) = (xv.shape().to_vec(), wv.shape().to_vec());
        self.record(Tensor::from_parts(vec![n, ch], y), &parents, move |g, needs| {
            let gy = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0f32; n * ch];
                for_each_neighbor(grid, |out_i, off, in_i| {
                    let ws = &wt[off * ch..(off + 1) * ch];
                    for j in 0..ch {
                        dx[in_i * ch + j] += ws[j] * gy[out_i * ch + j];
                    }
                });
                Tensor::from_parts(x_shape.clone(), dx)
            });
            let dw = needs[1].then(|| {
                let mut dwt = vec![0.0f32; 27 * ch];
                for_each_neighbor(grid, |out_i, off, in_i| {
                    for j in 0..ch {
                        dwt[off * ch + j] += gy[out_i * ch + j] * xv.data()[in_i * ch + j];
                    }
                });
                let mut dw = vec![0.0f32; ch * 27];
                for c in 0..ch {
                    for o in 0..27 {
                        dw[c * 27 + o] = dwt[o * ch + c];
                    }
                }
                Tensor::from_parts(w_shape.clone(), dw)
            });
            let mut res = vec![dx, dw];
            if has_bias {
                res.push(needs[2].then(|| {
                    let mut db = vec![0.0f32; ch];
                    kernels::col_sums_acc(n, ch, gy, &mut db);
                    Tensor::from_parts(vec![ch], db)
                }));
            }
            res
        })
    }

    /// Trilinear resize (half-pixel centres, edge clamped) from `from` to `to`.
    pub fn resize_trilinear(&mut self, x: Var, from: Dims, to: Dims) -> Var {
        let xv = self.value(x);
        let ch = xv.cols();
        assert_eq!(xv.rows(), numel(from));
        let taps = Arc::new(trilinear_taps(from, to));
        let mut y = vec![0.0f32; numel(to) * ch];
        for (o, t) in taps.iter().enumerate() {
            let dst = &mut y[o * ch..(o + 1) * ch];
            for &(src, wgt) in t.iter() {
                let s = &xv.data()[src as usize * ch..(src as usize + 1) * ch];
                for j in 0..ch {
                    dst[j] += wgt * s[j];
                }
            }
        }
        let n_in = numel(from);
        self.record(Tensor::from_parts(vec![numel(to), ch], y), &[x], move |g, _| {
            let mut dx = vec![0.0f32; n_in * ch];
            for (o, t) in taps.iter().enumerate() {
                let gs = &g.data()[o * ch..(o + 1) * ch];
                for &(src, wgt) in t.iter() {
                    let d = &mut dx[src as usize * ch..(src as usize + 1) * ch];
                    for j in 0..ch {
                        d[j] += wgt * gs[j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n_in, ch], dx))]
        })
    }

    /// Adds the factorised positional encoding: `pos2d: [c, H, W]` indexed
    /// by (h, w) plus `depth: [c, D]` indexed by d.
    pub fn add_pos(&mut self, x: Var, grid: Dims, pos2d: Var, depth: Option<Var>) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let [dd, hh, ww] = grid;
        assert_eq!(xv.rows(), numel(grid));
        let pv = self.value(pos2d);
        assert_eq!(pv.shape(), [c, hh, ww], "pos2d shape");
        let mut y = xv.data().to_vec();
        for d in 0..dd {
            for h in 0..hh {
                for w in 0..ww {
                    let r = (d * hh + h) * ww + w;
                    for j in 0..c {
                        y[r * c + j] += pv.data()[(j * hh + h) * ww + w];
                    }
                }
            }
        }
        if let Some(dep) = depth {
            let dv = self.value(dep);
            assert_eq!(dv.shape(), [c, dd], "depth table shape");
            for d in 0..dd {
                for r in d * hh * ww..(d + 1) * hh * ww {
                    for j in 0..c {
                        y[r * c + j] += dv.data()[j * dd + d];
                    }
                }
            }
        }
        let mut parents = vec![x, pos2d];
        if let Some(dep) = depth {
            parents.push(dep);
        }
        let x_shape = xv.shape().to_vec();
        self.record(Tensor::from_parts(x_shape.clone(), y), &parents, move |g, needs| {
            let gy = g.data();
            let dx = needs[0].then(|| Tensor::from_parts(x_shape.clone(), gy.to_vec()));
            let dpos = needs[1].then(|| {
                let mut dp = vec![0.0f32; c * hh * ww];
                for d in 0..dd {
                    for h in 0..hh {
                        for w in 0..ww {
                            let r = (d * hh + h) * ww + w;
                            for j in 0..c {
                                dp[(j * hh + h) * ww + w] += gy[r * c + j];
                            }
                        }
                    }
                }
                Tensor::from_parts(vec![c, hh, ww], dp)
            });
            let mut res = vec![dx, dpos];
            if needs.len() > 2 {
                res.push(needs[2].then(|| {
                    let mut dd_ = vec![0.0f32; c * dd];
                    for d in 0..dd {
                        for r in d * hh * ww..(d + 1) * hh * ww {
                            for j in 0..c {
                                dd_[j * dd + d] += gy[r * c + j];
                            }
                        }
                    }
                    Tensor::from_parts(vec![c, dd], dd_)
                }));
            }
            res
        })
    }

    /// Depthwise strided convolution along depth: kernel `p`, stride `p`.
    /// `x` enumerates the grid `[D, H, W]`; the output enumerates `[D/p, H, W]`.
    /// `w` holds `c·p` weights laid out `[c, 1, p, 1, 1]`.
    pub fn depth_patch_conv(&mut self, x: Var, grid: Dims, w: Var, p: usize) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let c = xv.cols();
        let [dd, hh, ww] = grid;
        assert_eq!(dd % p, 0);
        assert_eq!(wv.numel(), c * p);
        let dt = dd / p;
        let plane = hh * ww;
        let mut y = vec![0.0f32; dt * plane * c];
        for t in 0..dt {
            for k in 0..p {
                let src_plane = (t * p + k) * plane;
                for i in 0..plane {
                    let src = &xv.data()[(src_plane + i) * c..(src_plane + i + 1) * c];
                    let dst = &mut y[(t * plane + i) * c..(t * plane + i + 1) * c];
                    for j in 0..c {
                        dst[j] += wv.data()[j * p + k] * src[j];
                    }
                }
            }
        }
        let (x_shape, w_shape) = (xv.shape().to_vec(), wv.shape().to_vec());
        self.record(Tensor::from_parts(vec![dt * plane, c], y), &[x, w], move |g, needs| {
            let gy = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0f32; dd * plane * c];
                for t in 0..dt {
                    for k in 0..p {
                        for i in 0..plane {
                            let r_in = (t * p + k) * plane + i;
                            let r_out = t * plane + i;
                            for j in 0..c {
                                dx[r_in * c + j] = wv.data()[j * p + k] * gy[r_out * c + j];
                            }
                        }
                    }
                }
                Tensor::from_parts(x_shape.clone(), dx)
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0f32; c * p];
                for t in 0..dt {
                    for k in 0..p {
                        for i in 0..plane {
                            let r_in = (t * p + k) * plane + i;
                            let r_out = t * plane + i;
                            for j in 0..c {
                                dw[j * p + k] += gy[r_out * c + j] * xv.data()[r_in * c + j];
                            }
                        }
                    }
                }
                Tensor::from_parts(w_shape.clone(), dw)
            });
            vec![dx, dw]
        })
    }

    /// Trilinear interpolation of the grid features at continuous grid
    /// coordinates (z, y, x); coordinates must lie in `[0, dim-1]`.
    pub fn sample_points(&mut self, feat: Var, grid: Dims, points: &[[f64; 3]]) -> Var {
        let fv = self.value(feat);
        let c = fv.cols();
        assert_eq!(fv.rows(), numel(grid));
        let taps: Arc<Vec<[(u32, f32); 8]>> = Arc::new(points.iter().map(|p| point_taps(grid, *p)).collect());
        let k = points.len();
        let mut y = vec![0.0f32; k * c];
        for (i, t) in taps.iter().enumerate() {
            let dst = &mut y[i * c..(i + 1) * c];
            for &(src, wgt) in t.iter() {
                let s = &fv.data()[src as usize * c..(src as usize + 1) * c];
                for j in 0..c {
                    dst[j] += wgt * s[j];
                }
            }
        }
        let n = numel(grid);
        self.record(Tensor::from_parts(vec![k, c], y), &[feat], move |g, _| {
            let mut df = vec![0.0f32; n * c];
            for (i, t) in taps.iter().enumerate() {
                for &(src, wgt) in t.iter() {
                    for j in 0..c {
                        df[src as usize * c + j] += wgt * g.data()[i * c + j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c], df))]
        })
    }

    /// Scalar node with a precomputed value and input-gradient: used for
    /// losses whose derivative is evaluated analytically alongside the value.
    pub fn scalar_with_grad(&mut self, input: Var, value: f32, grad: Vec<f32>) -> Var {
        let shape = self.value(input).shape().to_vec();
        assert_eq!(grad.len(), shape.iter().product::<usize>());
        self.record(Tensor::scalar(value), &[input], move |g, _| {
            let s = g.data()[0];
            vec![Some(Tensor::from_parts(shape.clone(), grad.iter().map(|v| v * s).collect()))]
        })
    }
}

/// Softmax attention weights `[groups·heads·lq, lk]` of a grouped attention,
/// ordered (group, head, query).
pub fn attention_weights(q: &Tensor, k: &Tensor, lq: usize, lk: usize, heads: usize) -> Tensor {
    let c = q.cols();
    let dh = c / heads;
    let groups = q.rows() / lq;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0f32; groups * heads * lq * lk];
    for gi in 0..groups {
        for h in 0..heads {
            let ph = &mut probs[(gi * heads + h) * lq * lk..][..lq * lk];
            let qv = View { offset: gi * lq * c + h * dh, rs: c, cs: 1 };
            let kt = View { offset: gi * lk * c + h * dh, rs: 1, cs: c };
            kernels::sgemm(lq, dh, lk, scale, q.data(), qv, k.data(), kt, 0.0, ph, View::dense(lk));
            for row in ph.chunks_mut(lk) {
                softmax_in_place(row);
            }
        }
    }
    Tensor::from_parts(vec![groups * heads * lq, lk], probs)
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Visits every (output voxel, kernel offset, input voxel) triple of a
/// 3×3×3 "same" stencil, skipping taps that fall outside the grid.
fn for_each_neighbor(grid: Dims, mut f: impl FnMut(usize, usize, usize)) {
    let [dd, hh, ww] = grid;
    for z in 0..dd {
        for y in 0..hh {
            for x in 0..ww {
                let out_i = (z * hh + y) * ww + x;
                for kz in 0..3 {
                    let iz = z as isize + kz as isize - 1;
                    if iz < 0 || iz >= dd as isize {
                        continue;
                    }
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= hh as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= ww as isize {
                                continue;
                            }
                            let in_i = ((iz as usize) * hh + iy as usize) * ww + ix as usize;
                            f(out_i, (kz * 3 + ky) * 3 + kx, in_i);
                        }
                    }
                }
            }
        }
    }
}

/// Column matrix `[N, cin·27]` with column index `ci·27 + offset`.
fn im2col3(x: &[f32], grid: Dims, cin: usize) -> Vec<f32> {
    let [dd, hh, ww] = grid;
    let kcols = cin * 27;
    let plane = hh * ww;
    let mut col = vec![0.0f32; numel(grid) * kcols];
    col.par_chunks_mut(plane * kcols).enumerate().for_each(|(z, chunk)| {
        for y in 0..hh {
            for xx in 0..ww {
                let row = &mut chunk[(y * ww + xx) * kcols..(y * ww + xx + 1) * kcols];
                for kz in 0..3 {
                    let iz = z as isize + kz as isize - 1;
                    if iz < 0 || iz >= dd as isize {
                        continue;
                    }
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= hh as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix < 0 || ix >= ww as isize {
                                continue;
                            }
                            let in_i = ((iz as usize) * hh + iy as usize) * ww + ix as usize;
                            let off = (kz * 3 + ky) * 3 + kx;
                            let src = &x[in_i * cin..(in_i + 1) * cin];
                            for (ci, &v) in src.iter().enumerate() {
                                row[ci * 27 + off] = v;
                            }
                        }
                    }
                }
            }
        }
    });
    col
}

/// Adjoint of [`im2col3`], written as a gather so each input row is owned
/// by exactly one worker.
fn col2im3(dcol: &[f32], grid: Dims, cin: usize) -> Vec<f32> {
    let [dd, hh, ww] = grid;
    let kcols = cin * 27;
    let plane = hh * ww;
    let mut dx = vec![0.0f32; numel(grid) * cin];
    dx.par_chunks_mut(plane * cin).enumerate().for_each(|(z, chunk)| {
        for y in 0..hh {
            for xx in 0..ww {
                let dst = &mut chunk[(y * ww + xx) * cin..(y * ww + xx + 1) * cin];
                // output voxel o uses input (o + k - 1); so input m is used by o = m - k + 1
                for kz in 0..3 {
                    let oz = z as isize - kz as isize + 1;
                    if oz < 0 || oz >= dd as isize {
                        continue;
                    }
                    for ky in 0..3 {
                        let oy = y as isize - ky as isize + 1;
                        if oy < 0 || oy >= hh as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ox = xx as isize - kx as isize + 1;
                            if ox < 0 || ox >= ww as isize {
                                continue;
                            }
                            let o = ((oz as usize) * hh + oy as usize) * ww + ox as usize;
                            let off = (kz * 3 + ky) * 3 + kx;
                            let row = &dcol[o * kcols..(o + 1) * kcols];
                            for (ci, d) in dst.iter_mut().enumerate() {
                                *d += row[ci * 27 + off];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Per-axis source taps for a half-pixel-centre linear resize.
pub(crate) fn linear_axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lambda = (src - i0 as f64) as f32;
            let lambda = if i1 == i0 { 0.0 } else { lambda };
            (i0, i1, lambda)
        })
        .collect()
}

fn trilinear_taps(from: Dims, to: Dims) -> Vec<[(u32, f32); 8]> {
    let az = linear_axis_taps(from[0], to[0]);
    let ay = linear_axis_taps(from[1], to[1]);
    let ax = linear_axis_taps(from[2], to[2]);
    let mut out = Vec::with_capacity(numel(to));
    for &(z0, z1, lz) in &az {
        for &(y0, y1, ly) in &ay {
            for &(x0, x1, lx) in &ax {
                out.push(corner_taps(from, [z0, z1], [y0, y1], [x0, x1], [lz, ly, lx]));
            }
        }
    }
    out
}

fn corner_taps(dims: Dims, z: [usize; 2], y: [usize; 2], x: [usize; 2], l: [f32; 3]) -> [(u32, f32); 8] {
    let wz = [1.0 - l[0], l[0]];
    let wy = [1.0 - l[1], l[1]];
    let wx = [1.0 - l[2], l[2]];
    let mut t = [(0u32, 0.0f32); 8];
    let mut i = 0;
    for a in 0..2 {
        for b in 0..2 {
            for cc in 0..2 {
                let idx = (z[a] * dims[1] + y[b]) * dims[2] + x[cc];
                t[i] = (idx as u32, wz[a] * wy[b] * wx[cc]);
                i += 1;
            }
        }
    }
    t
}

/// The eight weighted corners surrounding a continuous grid coordinate.
pub(crate) fn point_taps(grid: Dims, p: [f64; 3]) -> [(u32, f32); 8] {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut fr = [0f32; 3];
    for a in 0..3 {
        let n = grid[a];
        let v = p[a].clamp(0.0, (n - 1) as f64);
        let i0 = (v.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        lo[a] = i0;
        hi[a] = i1;
        fr[a] = if i1 == i0 { 0.0 } else { (v - i0 as f64) as f32 };
    }
    corner_taps(grid, [lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]], fr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
    }

    /// Checks d(sum(out ∘ probe))/d(leaf) against central differences.
    fn grad_check(shapes: &[Vec<usize>], build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let eval = |inputs: &[Tensor], want_grad: bool| {
            let mut g = Graph::new(want_grad);
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(Arc::new(t.clone()), true)).collect();
            let out = build(&mut g, &vars);
            let ov = g.value(out).clone();
            let mut prng = ChaCha8Rng::seed_from_u64(99);
            let probe: Vec<f32> = (0..ov.numel()).map(|_| prng.gen_range(-1.0f32..1.0)).collect();
            let loss: f32 = ov.data().iter().zip(&probe).map(|(a, b)| a * b).sum();
            let grads = if want_grad {
                let root = g.scalar_with_grad(out, loss, probe);
                let gr = g.backward(root);
                vars.iter().map(|v| gr.get(*v).cloned()).collect()
            } else {
                Vec::new()
            };
            (loss, grads)
        };
        let (_, analytic) = eval(&inputs, true);
        let h = 1e-2f32;
        for (ti, t) in inputs.iter().enumerate() {
            let ga = analytic[ti].as_ref().expect("gradient present");
            for idx in (0..t.numel()).step_by((t.numel() / 17).max(1)) {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[idx] += h;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[idx] -= h;
                let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
                let an = ga.data()[idx];
                assert!(
                    (fd - an).abs() <= tol * (1.0 + fd.abs()),
                    "input {ti} idx {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn linear_gradients() {
        grad_check(&[vec![5, 4], vec![3, 4], vec![3]], |g, v| g.linear(v[0], v[1], Some(v[2]), WeightLayout::OutIn), 1e-2);
        grad_check(&[vec![5, 4], vec![4, 3]], |g, v| g.linear(v[0], v[1], None, WeightLayout::InOut), 1e-2);
    }

    #[test]
    fn layer_norm_gradients() {
        grad_check(&[vec![4, 6], vec![6], vec![6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6), 2e-2);
    }

    #[test]
    fn attention_gradients() {
        grad_check(
            &[vec![6, 4], vec![4, 4], vec![4, 4]],
            |g, v| g.attention(v[0], v[1], v[2], 3, 2, 2),
            2e-2,
        );
    }

    #[test]
    fn conv_gradients() {
        let grid = [2, 3, 3];
        grad_check(&[vec![18, 2], vec![3, 2, 3, 3, 3], vec![3]], move |g, v| g.conv3d(v[0], grid, v[1], Some(v[2])), 2e-2);
        grad_check(&[vec![18, 2], vec![2, 1, 3, 3, 3], vec![2]], move |g, v| g.dwconv3d(v[0], grid, v[1], Some(v[2])), 2e-2);
    }

    #[test]
    fn resampling_gradients() {
        grad_check(&[vec![8, 2]], |g, v| g.resize_trilinear(v[0], [2, 2, 2], [3, 4, 5]), 2e-2);
        grad_check(&[vec![12, 2]], |g, v| g.sample_points(v[0], [2, 2, 3], &[[0.3, 0.9, 1.5], [1.0, 0.0, 2.0]]), 2e-2);
        grad_check(&[vec![8, 3], vec![3, 2, 2], vec![3, 2]], |g, v| g.add_pos(v[0], [2, 2, 2], v[1], Some(v[2])), 2e-2);
        grad_check(&[vec![16, 3], vec![3, 1, 2, 1, 1]], |g, v| g.depth_patch_conv(v[0], [4, 2, 2], v[1], 2), 2e-2);
    }

    #[test]
    fn plumbing_gradients() {
        grad_check(&[vec![3, 4], vec![3, 2]], |g, v| g.concat_cols(&[v[0], v[1]]), 1e-2);
        grad_check(&[vec![3, 4], vec![2, 4]], |g, v| g.concat_rows(&[v[0], v[1]]), 1e-2);
        grad_check(&[vec![3, 4]], |g, v| g.slice_cols(v[0], 1, 2), 1e-2);
        grad_check(&[vec![3, 4]], |g, v| g.gather_rows(v[0], Arc::new(vec![Some(2), None, Some(0), Some(2)])), 1e-2);
        grad_check(&[vec![3, 4]], |g, v| g.gelu(v[0]), 1e-2);
        grad_check(&[vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1]), 1e-2);
    }

    #[test]
    fn conv3d_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = [3, 4, 2];
        let (cin, cout) = (2, 3);
        let x = rand_tensor(&mut rng, &[24, cin]);
        let w = rand_tensor(&mut rng, &[cout, cin, 3, 3, 3]);
        let mut g = Graph::new(false);
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let y = g.conv3d(xv, grid, wv, None);
        let got = g.value(y);
        for z in 0..3i32 {
            for yy in 0..4i32 {
                for xx in 0..2i32 {
                    for co in 0..cout {
                        let mut acc = 0.0f32;
                        for ci in 0..cin {
                            for kz in 0..3i32 {
                                for ky in 0..3i32 {
                                    for kx in 0..3i32 {
                                        let (iz, iy, ix) = (z + kz - 1, yy + ky - 1, xx + kx - 1);
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= 3 || iy >= 4 || ix >= 2 {
                                            continue;
                                        }
                                        let r = ((iz * 4 + iy) * 2 + ix) as usize;
                                        let wi = ((co * cin + ci) * 27) + ((kz * 3 + ky) * 3 + kx) as usize;
                                        acc += x.data()[r * cin + ci] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        let r = ((z * 4 + yy) * 2 + xx) as usize;
                        assert!((got.data()[r * cout + co] - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn no_grad_graph_keeps_no_closures() {
        let mut g = Graph::new(false);
        let a = g.leaf(Arc::new(Tensor::zeros(&[2, 2])), true);
        assert!(!g.requires_grad(a));
        let b = g.gelu(a);
        assert!(!g.requires_grad(b));
    }
}
