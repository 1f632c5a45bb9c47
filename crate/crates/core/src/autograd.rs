//! A small tape-based reverse-mode differentiation engine.
//!
//! A [`Graph`] records every operation applied to [`Var`]s together with the
//! forward value. [`Graph::backward`] walks the tape in reverse and returns
//! gradients for the parameters that were pulled in with [`Graph::param`].
//! One graph binds to one [`ParamStore`]; build a fresh graph per forward pass.

use std::collections::HashMap;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{
    col2im, gemm, im2col, log_softmax_in_place, resize_bilinear, resize_bilinear_adjoint, sigmoid,
    silu, silu_grad, softmax_in_place, softplus, ConvGeom, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Silu,
    Softplus,
    Tanh,
    Square,
    Powf(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    AddChannel { a: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Clamp { a: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    LogSoftmaxRows(Var),
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    Resize(Var),
    AvgPool { x: Var, f: usize },
    Reshape(Var),
    Transpose(Var),
    SliceRows { a: Var, start: usize },
    Concat0(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    GatherCols { a: Var, ids: Vec<usize> },
    Crop { a: Var, r0: usize, c0: usize },
    SumAll(Var),
    MeanAll(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    HeadScores { keys: Var, q: Var, heads: usize, scale: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    n_params: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.n_params = self.n_params.max(store.len());
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    // ---- linear algebra ----

    /// `op(a) · op(b)` for 2-D operands, where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `x[m,in] · w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// Broadcast-add a length-`n` row to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.value(a).dims2();
        assert_eq!(self.value(row).len(), n, "row length mismatch");
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow { a, row })
    }

    /// Broadcast-multiply every row of `a[m,n]` by a length-`n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.value(a).dims2();
        assert_eq!(self.value(row).len(), n, "row length mismatch");
        let r = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x *= b;
            }
        }
        self.push(v, Op::MulRow { a, row })
    }

    /// Adds `bias[c]` to every pixel of channel `c` of `a[C,H,W]`.
    pub fn add_channel(&mut self, a: Var, bias: Var) -> Var {
        let (c, h, w) = self.value(a).dims3();
        assert_eq!(self.value(bias).len(), c);
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for (ch, chunk) in v.data_mut().chunks_mut(h * w).enumerate() {
            for x in chunk {
                *x += b[ch];
            }
        }
        self.push(v, Op::AddChannel { a, bias })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Exp => |x, _| x.exp(),
            Unary::Log => |x, _| x.ln(),
            Unary::Sigmoid => |x, _| sigmoid(x),
            Unary::Silu => |x, _| silu(x),
            Unary::Softplus => |x, _| softplus(x),
            Unary::Tanh => |x, _| x.tanh(),
            Unary::Square => |x, _| x * x,
            Unary::Powf(_) => |x, p| x.powf(p),
        };
        let p = if let Unary::Powf(p) = kind { p } else { 0.0 };
        let v = self.value(a).map(|x| f(x, p));
        self.push(v, Op::Unary(a, kind))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// `x^p` for nonnegative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Unary::Powf(p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { a, lo, hi })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), f64::min);
        self.push(v, Op::Minimum(a, b))
    }

    // ---- reductions and normalization ----

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.value(a).dims2();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            log_softmax_in_place(row);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (m, n) = self.value(a).dims2();
        let x = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(Tensor::new(&[m, n], out), Op::LayerNorm { a, gamma, beta, xhat, inv_std })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::MeanAll(a))
    }

    // ---- spatial ----

    /// 2-D convolution of `x[C,H,W]` with `w[O, C*k*k]` and bias `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let o = self.value(w).shape()[0];
        assert_eq!(self.value(w).len(), o * c * kernel * kernel, "conv weight shape");
        let geom = ConvGeom { in_channels: c, height: h, width: wd, kernel, stride, pad };
        let cols = im2col(self.value(x).data(), &geom);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let mut out = vec![0.0; o * ho * wo];
        let bias = self.value(b).data();
        for (oc, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.fill(bias[oc]);
        }
        gemm(o, geom.col_rows(), ho * wo, 1.0, self.value(w).data(), false, &cols, false, 1.0, &mut out);
        self.push(Tensor::new(&[o, ho, wo], out), Op::Conv2d { x, w, b, geom, cols })
    }

    /// Bilinear resize of `x[C,H,W]` to `[C,h,w]` (half-pixel centers).
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = resize_bilinear(self.value(x), h, w);
        self.push(v, Op::Resize(x))
    }

    /// Non-overlapping `f×f` average pooling of `x[C,H,W]`.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert!(h % f == 0 && w % f == 0, "pool factor must divide spatial dims");
        let (oh, ow) = (h / f, w / f);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let norm = 1.0 / (f * f) as f64;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * oh + y / f) * ow + xx / f] += src[(ch * h + y) * w + xx] * norm;
                }
            }
        }
        self.push(Tensor::new(&[c, oh, ow], out), Op::AvgPool { x, f })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.push(v, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose2();
        self.push(v, Op::Transpose(a))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= m, "row slice out of range");
        let v = Tensor::new(&[len, n], self.value(a).data()[start * n..(start + len) * n].to_vec());
        self.push(v, Op::SliceRows { a, start })
    }

    /// Concatenate along the leading dimension; trailing dims must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat trailing shape mismatch");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::new(&shape, data), Op::Concat0(parts.to_vec()))
    }

    /// Rows of `table[V,d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.value(table).dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "embedding id {i} out of range {v}");
            data.extend_from_slice(self.value(table).row(i));
        }
        self.push(Tensor::new(&[ids.len(), d], data), Op::Embedding { table, ids: ids.to_vec() })
    }

    /// `out[t] = a[t, ids[t]]` for `a[T,V]`.
    pub fn gather_cols(&mut self, a: Var, ids: &[usize]) -> Var {
        let (m, n) = self.value(a).dims2();
        assert_eq!(m, ids.len());
        let data = ids
            .iter()
            .enumerate()
            .map(|(t, &i)| {
                assert!(i < n, "column {i} out of range {n}");
                self.value(a).data()[t * n + i]
            })
            .collect();
        self.push(Tensor::new(&[m], data), Op::GatherCols { a, ids: ids.to_vec() })
    }

    /// Spatial crop `rows r0..r1`, `cols c0..c1` of `a[C,H,W]`.
    pub fn crop(&mut self, a: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Var {
        let (c, h, w) = self.value(a).dims3();
        assert!(r0 < r1 && r1 <= h && c0 < c1 && c1 <= w, "crop out of range");
        let (oh, ow) = (r1 - r0, c1 - c0);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in r0..r1 {
                data.extend_from_slice(&src[(ch * h + y) * w + c0..(ch * h + y) * w + c1]);
            }
        }
        self.push(Tensor::new(&[c, oh, ow], data), Op::Crop { a, r0, c0 })
    }

    // ---- attention ----

    /// Multi-head scaled dot-product attention.
    ///
    /// `q[Tq, H*dh]`, `k[Tk, H*dh]`, `v[Tk, H*dh]` with heads laid out in
    /// contiguous column blocks. When `causal`, query `i` sees keys
    /// `0..=i + (Tk - Tq)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (tq, dm) = self.value(q).dims2();
        let (tk, dk) = self.value(k).dims2();
        assert_eq!(dm, dk);
        assert_eq!(self.value(v).dims2(), (tk, dm));
        assert_eq!(dm % heads, 0);
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let offset = tk as isize - tq as isize;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * dm];
        for h in 0..heads {
            let qh = head_block(qd, tq, dm, h, dh);
            let kh = head_block(kd, tk, dm, h, dh);
            let vh = head_block(vd, tk, dm, h, dh);
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            gemm(tq, dh, tk, scale, &qh, false, &kh, true, 0.0, p);
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                if causal {
                    let limit = (i as isize + offset).max(-1);
                    for (j, x) in row.iter_mut().enumerate() {
                        if j as isize > limit {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                }
                softmax_in_place(row);
            }
            let mut oh = vec![0.0; tq * dh];
            gemm(tq, tk, dh, 1.0, p, false, &vh, false, 0.0, &mut oh);
            scatter_head_block(&mut out, &oh, tq, dm, h, dh);
        }
        self.push(Tensor::new(&[tq, dm], out), Op::Attention { q, k, v, heads, probs })
    }

    /// Per-head scaled dot products between one query vector and a key grid.
    ///
    /// `keys[N, H*dh]`, `q[H*dh]` -> `[H, N]` with
    /// `out[h, n] = scale * <keys[n, h-block], q[h-block]>`.
    pub fn head_scores(&mut self, keys: Var, q: Var, heads: usize, scale: f64) -> Var {
        let (n, dm) = self.value(keys).dims2();
        assert_eq!(self.value(q).len(), dm);
        let dh = dm / heads;
        let kd = self.value(keys).data();
        let qd = self.value(q).data();
        let mut out = vec![0.0; heads * n];
        for h in 0..heads {
            for i in 0..n {
                let mut acc = 0.0;
                for d in 0..dh {
                    acc += kd[i * dm + h * dh + d] * qd[h * dh + d];
                }
                out[h * n + i] = scale * acc;
            }
        }
        self.push(Tensor::new(&[heads, n], out), Op::HeadScores { keys, q, heads, scale })
    }

    // ---- backward ----

    /// Reverse pass from a one-element `loss`; returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let grads = self.backward_all(loss);
        let mut out = Gradients::empty(self.n_params);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                out.accumulate(*id, g);
            }
        }
        out
    }

    /// Gradient of `loss` with respect to an arbitrary node (zeros if unreached).
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Tensor {
        let grads = self.backward_all(loss);
        grads[wrt.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(wrt)))
    }

    fn backward_all(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = y.dims2();
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                let mut da = vec![0.0; av.len()];
                if *ta {
                    // A stored [k,m]: dA = op(B) · Gᵀ
                    gemm(k, n, m, 1.0, bv.data(), *tb, g.data(), true, 0.0, &mut da);
                } else {
                    gemm(m, n, k, 1.0, g.data(), false, bv.data(), !*tb, 0.0, &mut da);
                }
                let mut db = vec![0.0; bv.len()];
                if *tb {
                    // B stored [n,k]: dB = Gᵀ · op(A)
                    gemm(n, m, k, 1.0, g.data(), true, av.data(), *ta, 0.0, &mut db);
                } else {
                    gemm(k, m, n, 1.0, av.data(), !*ta, g.data(), false, 0.0, &mut db);
                }
                acc(grads, *a, Tensor::new(av.shape(), da));
                acc(grads, *b, Tensor::new(bv.shape(), db));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(grads, *a, g.zip_map(bv, |x, d| x / d));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(bv.data())
                    .map(|((gx, q), d)| -gx * q / d)
                    .collect();
                acc(grads, *b, Tensor::new(bv.shape(), gb));
            }
            Op::AddRow { a, row } => {
                let n = val(*row).len();
                let mut dr = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (d, x) in dr.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                acc(grads, *a, g.clone());
                acc(grads, *row, Tensor::new(val(*row).shape(), dr));
            }
            Op::MulRow { a, row } => {
                let r = val(*row);
                let n = r.len();
                let mut da = g.clone();
                for chunk in da.data_mut().chunks_mut(n) {
                    for (x, s) in chunk.iter_mut().zip(r.data()) {
                        *x *= s;
                    }
                }
                let mut dr = vec![0.0; n];
                for (gc, ac) in g.data().chunks(n).zip(val(*a).data().chunks(n)) {
                    for j in 0..n {
                        dr[j] += gc[j] * ac[j];
                    }
                }
                acc(grads, *a, da);
                acc(grads, *row, Tensor::new(r.shape(), dr));
            }
            Op::AddChannel { a, bias } => {
                let (_, h, w) = y.dims3();
                let db: Vec<f64> = g.data().chunks(h * w).map(|c| c.iter().sum()).collect();
                acc(grads, *a, g.clone());
                acc(grads, *bias, Tensor::new(val(*bias).shape(), db));
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Unary(a, kind) => {
                let x = val(*a);
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y.data())
                    .map(|((&gv, &xv), &yv)| {
                        gv * match kind {
                            Unary::Exp => yv,
                            Unary::Log => 1.0 / xv,
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Silu => silu_grad(xv),
                            Unary::Softplus => sigmoid(xv),
                            Unary::Tanh => 1.0 - yv * yv,
                            Unary::Square => 2.0 * xv,
                            Unary::Powf(p) => {
                                if xv == 0.0 {
                                    if *p == 1.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                } else {
                                    p * xv.powf(p - 1.0)
                                }
                            }
                        }
                    })
                    .collect();
                acc(grads, *a, Tensor::new(x.shape(), d));
            }
            Op::Clamp { a, lo, hi } => {
                let d = g.zip_map(val(*a), |gv, x| if x > *lo && x < *hi { gv } else { 0.0 });
                acc(grads, *a, d);
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for j in 0..av.len() {
                    if av.data()[j] <= bv.data()[j] {
                        da[j] = g.data()[j];
                    } else {
                        db[j] = g.data()[j];
                    }
                }
                acc(grads, *a, Tensor::new(av.shape(), da));
                acc(grads, *b, Tensor::new(bv.shape(), db));
            }
            Op::LogSoftmaxRows(a) => {
                let (_, n) = y.dims2();
                let mut d = g.clone();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let gs: f64 = drow.iter().sum();
                    for (dx, yv) in drow.iter_mut().zip(yrow) {
                        *dx -= yv.exp() * gs;
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
                let (m, n) = y.dims2();
                let gm = val(*gamma).data();
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..m {
                    let gr = &g.data()[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let dxh = gr[j] * gm[j];
                        s1 += dxh;
                        s2 += dxh * xh[j];
                        dg[j] += gr[j] * xh[j];
                        db[j] += gr[j];
                    }
                    let c = inv_std[i] / n as f64;
                    for j in 0..n {
                        let dxh = gr[j] * gm[j];
                        dx[i * n + j] = c * (n as f64 * dxh - s1 - xh[j] * s2);
                    }
                }
                acc(grads, *a, Tensor::new(&[m, n], dx));
                acc(grads, *gamma, Tensor::new(val(*gamma).shape(), dg));
                acc(grads, *beta, Tensor::new(val(*beta).shape(), db));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let o = y.shape()[0];
                let hw = geom.out_height() * geom.out_width();
                let kk = geom.col_rows();
                let mut dw = vec![0.0; o * kk];
                gemm(o, hw, kk, 1.0, g.data(), false, cols, true, 0.0, &mut dw);
                let db: Vec<f64> = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                let mut dcols = vec![0.0; kk * hw];
                gemm(kk, o, hw, 1.0, val(*w).data(), true, g.data(), false, 0.0, &mut dcols);
                let dx = col2im(&dcols, geom);
                acc(grads, *x, Tensor::new(val(*x).shape(), dx));
                acc(grads, *w, Tensor::new(val(*w).shape(), dw));
                acc(grads, *b, Tensor::new(val(*b).shape(), db));
            }
            Op::Resize(x) => {
                let (_, h, w) = val(*x).dims3();
                acc(grads, *x, resize_bilinear_adjoint(g, h, w));
            }
            Op::AvgPool { x, f } => {
                let (c, h, w) = val(*x).dims3();
                let (oh, ow) = (h / f, w / f);
                let norm = 1.0 / (f * f) as f64;
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            d[(ch * h + yy) * w + xx] = g.data()[(ch * oh + yy / f) * ow + xx / f] * norm;
                        }
                    }
                }
                acc(grads, *x, Tensor::new(&[c, h, w], d));
            }
            Op::Reshape(a) => acc(grads, *a, g.clone().reshape(val(*a).shape())),
            Op::Transpose(a) => acc(grads, *a, g.transpose2()),
            Op::SliceRows { a, start } => {
                let (_, n) = val(*a).dims2();
                let mut d = Tensor::zeros(val(*a).shape());
                d.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(grads, *a, d);
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for p in parts {
                    let shape = val(*p).shape().to_vec();
                    let n = val(*p).len();
                    acc(grads, *p, Tensor::new(&shape, g.data()[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Embedding { table, ids } => {
                let (_, d) = val(*table).dims2();
                let mut dt = Tensor::zeros(val(*table).shape());
                for (t, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt.data_mut()[id * d + j] += g.data()[t * d + j];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::GatherCols { a, ids } => {
                let (_, n) = val(*a).dims2();
                let mut d = Tensor::zeros(val(*a).shape());
                for (t, &id) in ids.iter().enumerate() {
                    d.data_mut()[t * n + id] += g.data()[t];
                }
                acc(grads, *a, d);
            }
            Op::Crop { a, r0, c0 } => {
                let (c, h, w) = val(*a).dims3();
                let (_, oh, ow) = y.dims3();
                let mut d = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for yy in 0..oh {
                        let dst = (ch * h + r0 + yy) * w + c0;
                        d.data_mut()[dst..dst + ow]
                            .copy_from_slice(&g.data()[(ch * oh + yy) * ow..(ch * oh + yy + 1) * ow]);
                    }
                }
                acc(grads, *a, d);
            }
            Op::SumAll(a) => acc(grads, *a, Tensor::full(val(*a).shape(), g.item())),
            Op::MeanAll(a) => {
                let n = val(*a).len() as f64;
                acc(grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, dm) = val(*q).dims2();
                let (tk, _) = val(*k).dims2();
                let dh = dm / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut dq = vec![0.0; tq * dm];
                let mut dk = vec![0.0; tk * dm];
                let mut dv = vec![0.0; tk * dm];
                for h in 0..*heads {
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    let qh = head_block(qd, tq, dm, h, dh);
                    let kh = head_block(kd, tk, dm, h, dh);
                    let vh = head_block(vd, tk, dm, h, dh);
                    let go = head_block(g.data(), tq, dm, h, dh);
                    // dV = Pᵀ dO
                    let mut dvh = vec![0.0; tk * dh];
                    gemm(tk, tq, dh, 1.0, p, true, &go, false, 0.0, &mut dvh);
                    // dP = dO Vᵀ
                    let mut dp = vec![0.0; tq * tk];
                    gemm(tq, dh, tk, 1.0, &go, false, &vh, true, 0.0, &mut dp);
                    for i in 0..tq {
                        let pr = &p[i * tk..(i + 1) * tk];
                        let dr = &mut dp[i * tk..(i + 1) * tk];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (d, pv) in dr.iter_mut().zip(pr) {
                            *d = pv * (*d - dot) * scale;
                        }
                    }
                    let mut dqh = vec![0.0; tq * dh];
                    gemm(tq, tk, dh, 1.0, &dp, false, &kh, false, 0.0, &mut dqh);
                    let mut dkh = vec![0.0; tk * dh];
                    gemm(tk, tq, dh, 1.0, &dp, true, &qh, false, 0.0, &mut dkh);
                    scatter_head_block(&mut dq, &dqh, tq, dm, h, dh);
                    scatter_head_block(&mut dk, &dkh, tk, dm, h, dh);
                    scatter_head_block(&mut dv, &dvh, tk, dm, h, dh);
                }
                acc(grads, *q, Tensor::new(&[tq, dm], dq));
                acc(grads, *k, Tensor::new(&[tk, dm], dk));
                acc(grads, *v, Tensor::new(&[tk, dm], dv));
            }
            Op::HeadScores { keys, q, heads, scale } => {
                let (n, dm) = val(*keys).dims2();
                let dh = dm / heads;
                let kd = val(*keys).data();
                let qd = val(*q).data();
                let mut dk = vec![0.0; n * dm];
                let mut dq = vec![0.0; dm];
                for h in 0..*heads {
                    for i in 0..n {
                        let gv = g.data()[h * n + i] * scale;
                        for d in 0..dh {
                            dk[i * dm + h * dh + d] += gv * qd[h * dh + d];
                            dq[h * dh + d] += gv * kd[i * dm + h * dh + d];
                        }
                    }
                }
                acc(grads, *keys, Tensor::new(&[n, dm], dk));
                acc(grads, *q, Tensor::new(val(*q).shape(), dq));
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Copies head `h` (columns `h*dh..(h+1)*dh`) of a `[t, dm]` buffer.
fn head_block(x: &[f64], t: usize, dm: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * dh);
    for i in 0..t {
        out.extend_from_slice(&x[i * dm + h * dh..i * dm + (h + 1) * dh]);
    }
    out
}

fn scatter_head_block(dst: &mut [f64], src: &[f64], t: usize, dm: usize, h: usize, dh: usize) {
    for i in 0..t {
        dst[i * dm + h * dh..i * dm + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite-difference check of every parameter entry.
    fn check(store: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Var) {
        let mut g = Graph::new();
        let loss = f(&mut g, store);
        let grads = g.backward(loss);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for id in store.ids() {
            for j in 0..store.get(id).len() {
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[j] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[j] -= h;
                let eval = |s: &ParamStore| {
                    let mut g = Graph::new();
                    let l = f(&mut g, s);
                    g.value(l).item()
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ad = grads.get(id).map_or(0.0, |t| t.data()[j]);
                let err = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-3);
                worst = worst.max(err);
                assert!(err < 1e-5, "{} [{j}]: fd {fd} vs ad {ad}", store.name(id));
            }
        }
        assert!(worst.is_finite());
    }

    fn rand_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.add_normal(*name, ParamGroup::Policy, shape, 0.7, &mut rng);
        }
        s
    }

    fn pid(s: &ParamStore, name: &str) -> ParamId {
        s.find(name).unwrap()
    }

    #[test]
    fn matmul_variants_and_elementwise() {
        let s = rand_store(&[("a", vec![3, 4]), ("b", vec![4, 2]), ("c", vec![2, 4]), ("r", vec![2])], 1);
        check(&s, |g, s| {
            let a = g.param(s, pid(s, "a"));
            let b = g.param(s, pid(s, "b"));
            let c = g.param(s, pid(s, "c"));
            let r = g.param(s, pid(s, "r"));
            let x = g.matmul(a, b); // [3,2]
            let y = g.matmul_t(a, false, c, true); // [3,2]
            let z = g.matmul_t(c, false, a, true); // [2,3]
            let zt = g.transpose(z);
            let w = g.mul(x, y);
            let w = g.add_row(w, r);
            let w = g.mul_row(w, r);
            let w = g.sub(w, zt);
            let e = g.sigmoid(w);
            let d = g.add_scalar(e, 1.0);
            let q = g.div(w, d);
            let t = g.matmul_t(a, true, x, false); // [4,2]
            let t = g.silu(t);
            let s1 = g.sum(q);
            let s2 = g.mean(t);
            g.add(s1, s2)
        });
    }

    #[test]
    fn unary_ops_and_softmax() {
        let s = rand_store(&[("x", vec![2, 5])], 2);
        check(&s, |g, s| {
            let x = g.param(s, pid(s, "x"));
            let ls = g.log_softmax_rows(x);
            let ex = g.exp(x);
            let sp = g.softplus(x);
            let th = g.tanh(x);
            let sq = g.square(th);
            let lg = g.add_scalar(sq, 0.5);
            let lg = g.ln(lg);
            let pw = g.sigmoid(x);
            let pw = g.powf(pw, 2.5);
            let cl = g.clamp(x, -0.3, 0.4);
            let mn = g.minimum(ex, sp);
            let gathered = g.gather_cols(ls, &[1, 3]);
            let parts = [g.sum(gathered), g.sum(lg), g.sum(pw), g.sum(cl), g.sum(mn)];
            let mut tot = parts[0];
            for p in &parts[1..] {
                tot = g.add(tot, *p);
            }
            tot
        });
    }

    #[test]
    fn layer_norm_embedding_slices() {
        let s = rand_store(
            &[("tab", vec![6, 4]), ("gam", vec![4]), ("bet", vec![4]), ("w", vec![4, 4])],
            3,
        );
        check(&s, |g, s| {
            let tab = g.param(s, pid(s, "tab"));
            let e = g.embedding(tab, &[2, 0, 2, 5]);
            let gam = g.param(s, pid(s, "gam"));
            let bet = g.param(s, pid(s, "bet"));
            let n = g.layer_norm(e, gam, bet);
            let w = g.param(s, pid(s, "w"));
            let y = g.matmul(n, w);
            let r = g.slice_rows(y, 1, 2);
            let c = g.concat0(&[r, e]);
            let c = g.silu(c);
            let c2 = g.square(c);
            g.sum(c2)
        });
    }

    #[test]
    fn conv_resize_pool_crop() {
        let s = rand_store(
            &[("x", vec![2, 6, 6]), ("w", vec![3, 2 * 9]), ("b", vec![3]), ("w2", vec![1, 3]), ("cb", vec![1])],
            4,
        );
        check(&s, |g, s| {
            let x = g.param(s, pid(s, "x"));
            let w = g.param(s, pid(s, "w"));
            let b = g.param(s, pid(s, "b"));
            let y = g.conv2d(x, w, b, 3, 2, 1); // [3,3,3]
            let y = g.silu(y);
            let y = g.resize(y, 6, 6);
            let p = g.avg_pool(y, 2); // [3,3,3]
            let w2 = g.param(s, pid(s, "w2"));
            let zero = g.constant(Tensor::zeros(&[1]));
            let z = g.conv2d(p, w2, zero, 1, 1, 0); // [1,3,3]
            let cb = g.param(s, pid(s, "cb"));
            let z = g.add_channel(z, cb);
            let z = g.crop(z, 0, 2, 1, 3);
            let z = g.reshape(z, &[2, 2]);
            let z = g.square(z);
            g.sum(z)
        });
    }

    #[test]
    fn attention_and_head_scores() {
        let s = rand_store(&[("q", vec![3, 4]), ("k", vec![5, 4]), ("v", vec![5, 4]), ("qv", vec![4])], 5);
        for causal in [false, true] {
            check(&s, |g, s| {
                let q = g.param(s, pid(s, "q"));
                let k = g.param(s, pid(s, "k"));
                let v = g.param(s, pid(s, "v"));
                let o = g.attention(q, k, v, 2, causal);
                let o = g.square(o);
                let qv = g.param(s, pid(s, "qv"));
                let hs = g.head_scores(k, qv, 2, 0.7);
                let hs = g.tanh(hs);
                let a = g.sum(o);
                let b = g.sum(hs);
                g.add(a, b)
            });
        }
    }

    #[test]
    fn causal_attention_masks_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let mk = |g: &mut Graph, rng: &mut ChaCha8Rng| {
            g.constant(Tensor::from_fn(&[4, 4], |_| rng.gen_range(-1.0..1.0)))
        };
        let q = mk(&mut g, &mut rng);
        let k = mk(&mut g, &mut rng);
        let v = mk(&mut g, &mut rng);
        let full = g.attention(q, k, v, 1, true);
        // first query only sees the first key, so the output equals v[0]
        assert_eq!(g.value(full).row(0), g.value(v).row(0));
    }
}
