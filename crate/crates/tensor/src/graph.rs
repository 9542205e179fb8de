//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op method on [`Graph`] evaluates eagerly and appends one node whose
//! inputs are earlier nodes, so node order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{mismatch, Result, TensorError};
use crate::gemm::{gemm, Layout};
use crate::kernels::{broadcast, conv, norm, resize, softmax};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Statistics for a batch-norm op.
#[derive(Clone, Debug)]
pub enum NormMode<'a> {
    /// Normalise with the statistics of the current batch.
    Batch,
    /// Normalise with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Moments observed by a batch-mode normalisation, for running-stat updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: conv::ConvGeom,
        cols: Vec<f64>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    ScaleShift {
        a: usize,
        scale: f64,
    },
    Relu {
        a: usize,
    },
    Sigmoid {
        a: usize,
    },
    Exp {
        a: usize,
    },
    Softmax {
        a: usize,
        dims: (usize, usize, usize),
        log: bool,
    },
    NegSqDist {
        a: usize,
        b: usize,
        rows: usize,
        codes: usize,
        dim: usize,
    },
    Sum {
        a: usize,
        keep_strides: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        dims: (usize, usize, usize),
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Resize {
        a: usize,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Transpose {
        a: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    bn_stats: Vec<(String, BatchStats)>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push(value, op, tracked)
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A leaf whose gradient is wanted (e.g. an image under attack).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf for a named entry of `store`. Repeated requests return the same
    /// node, so gradients from every use accumulate into one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let entry = store
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("no parameter named `{name}`")))?;
        let v = self.push(entry.tensor.clone(), Op::Leaf, entry.trainable);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    /// Pre-binds `name` to an existing node; later [`Graph::param`] calls
    /// for that name resolve to it.
    pub fn bind_param(&mut self, name: &str, v: Var) {
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
    }

    /// Parameters pulled into this graph, in first-use order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.param_order
    }

    pub fn record_batch_stats(&mut self, key: &str, stats: BatchStats) {
        self.bn_stats.push((key.to_string(), stats));
    }

    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Matrix product: `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]` or `[b,m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, shared_rhs) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n, true),
            (&[b, m, k], &[b2, k2, n]) if b == b2 && k == k2 => (b, m, k, n, false),
            (&[b, m, k], &[k2, n]) if k == k2 => (b, m, k, n, true),
            _ => return Err(mismatch("matmul", format!("{sa:?} · {sb:?}"))),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.val(a), self.val(b));
            for i in 0..batch {
                let boff = if shared_rhs { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    Layout::row_major(k),
                    &bv[boff..],
                    Layout::row_major(n),
                    0.0,
                    &mut out[i * m * n..],
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[a, b],
        ))
    }

    /// 2-d convolution of `x: [B,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[batch, in_ch, h, wd], &[out_ch, wc, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(mismatch("conv2d", format!("input {sx:?}, weight {sw:?}")));
        };
        if wc != in_ch {
            return Err(mismatch(
                "conv2d",
                format!("input has {in_ch} channels but weight expects {wc}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d: stride must be positive".into()));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(mismatch(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            ));
        }
        let geom = conv::ConvGeom {
            batch,
            in_ch,
            h,
            w: wd,
            out_ch,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
        };
        let (kl, p) = (geom.patch_len(), geom.positions());
        let mut cols = vec![0.0; batch * kl * p];
        let mut out = vec![0.0; batch * out_ch * p];
        {
            let (xv, wv) = (self.val(x), self.val(w));
            for b in 0..batch {
                let c = &mut cols[b * kl * p..(b + 1) * kl * p];
                conv::im2col(&geom, &xv[b * in_ch * h * wd..], c);
                gemm(
                    out_ch,
                    kl,
                    p,
                    wv,
                    Layout::row_major(kl),
                    c,
                    Layout::row_major(p),
                    0.0,
                    &mut out[b * out_ch * p..],
                );
            }
        }
        let value = Tensor::new([batch, out_ch, geom.out_h, geom.out_w], out)?;
        Ok(self.derived(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                geom,
                cols,
            },
            &[x, w],
        ))
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast::broadcast_shape(name, sa, sb)?;
        let st_a = broadcast::broadcast_strides(sa, &shape);
        let st_b = broadcast::broadcast_strides(sb, &shape);
        let len = shape.iter().product();
        let mut out = vec![0.0; len];
        let (av, bv) = (self.val(a), self.val(b));
        if av.len() == len && bv.len() == len {
            for ((o, x), y) in out.iter_mut().zip(av).zip(bv) {
                *o = f(*x, *y);
            }
        } else {
            broadcast::walk2(&shape, &st_a, &st_b, |o, i, j| out[o] = f(av[i], bv[j]));
        }
        Tensor::new(shape, out)
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.derived(value, Op::Add { a: a.0, b: b.0 }, &[a, b]))
    }

    /// Broadcasting difference.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.derived(value, Op::Sub { a: a.0, b: b.0 }, &[a, b]))
    }

    /// Broadcasting product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.derived(value, Op::Mul { a: a.0, b: b.0 }, &[a, b]))
    }

    /// `scale * a + shift` with scalar constants.
    pub fn scale_shift(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| scale * v + shift);
        self.derived(value, Op::ScaleShift { a: a.0, scale }, &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.scale_shift(a, scale, 0.0)
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.derived(value, Op::Relu { a: a.0 }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.derived(value, Op::Sigmoid { a: a.0 }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.derived(value, Op::Exp { a: a.0 }, &[a])
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(name, format!("axis {axis} out of range for {shape:?}")));
        }
        if let Some(bad) = self.val(a).iter().find(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: name,
                detail: format!("logit {bad}"),
            });
        }
        let dims = softmax::split_axis(&shape, axis);
        let out = softmax::forward(self.val(a), dims, log);
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(value, Op::Softmax { a: a.0, dims, log }, &[a]))
    }

    /// Max-shifted softmax along `axis`. Fails on non-finite logits.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    /// `out[.., i, k] = -‖a[.., i, :] − b[k, :]‖²` for `a: [.., n, d]`, `b: [K, d]`.
    pub fn neg_sq_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (Some(&dim), &[codes, d2]) = (sa.last(), sb.as_slice()) else {
            return Err(mismatch("neg_sq_distance", format!("{sa:?} vs codebook {sb:?}")));
        };
        if dim != d2 {
            return Err(mismatch(
                "neg_sq_distance",
                format!("feature width {dim} vs codeword width {d2}"),
            ));
        }
        let rows = self.value(a).len() / dim;
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = vec![0.0; rows * codes];
        for r in 0..rows {
            let x = &av[r * dim..(r + 1) * dim];
            for k in 0..codes {
                let c = &bv[k * dim..(k + 1) * dim];
                out[r * codes + k] = -x.iter().zip(c).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = codes;
        let value = Tensor::new(shape, out)?;
        Ok(self.derived(
            value,
            Op::NegSqDist {
                a: a.0,
                b: b.0,
                rows,
                codes,
                dim,
            },
            &[a, b],
        ))
    }

    /// Sums over `axes`, dropping them from the shape.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= shape.len()) {
            return Err(mismatch("reduce_sum", format!("axis {bad} out of range for {shape:?}")));
        }
        let mut keep = shape.clone();
        for &ax in axes {
            keep[ax] = 1;
        }
        let keep_strides = broadcast::broadcast_strides(&keep, &shape);
        let unit = broadcast::broadcast_strides(&shape, &shape);
        let mut out = vec![0.0; keep.iter().product()];
        let av = self.val(a);
        broadcast::walk2(&shape, &unit, &keep_strides, |_, i, o| out[o] += av[i]);
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.derived(value, Op::Sum { a: a.0, keep_strides }, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes).expect("all axes are in range")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-channel normalisation along `axis` followed by `gamma * x̂ + beta`.
    ///
    /// In [`NormMode::Batch`] the returned stats carry the batch mean and
    /// unbiased variance for the caller's running-average update.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("batch_norm", format!("axis {axis} out of range for {shape:?}")));
        }
        let ch = shape[axis];
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [ch] {
                return Err(mismatch(
                    "batch_norm",
                    format!("{what} has shape {:?}, expected [{ch}]", self.shape(v)),
                ));
            }
        }
        let dims = softmax::split_axis(&shape, axis);
        let (mean, var, stats, batch) = match mode {
            NormMode::Batch => {
                let mo = norm::moments(self.val(x), dims);
                if mo.count < 2 {
                    return Err(TensorError::Invalid(
                        "batch_norm: batch statistics need at least two values per channel".into(),
                    ));
                }
                let bessel = mo.count as f64 / (mo.count - 1) as f64;
                let stats = BatchStats {
                    mean: mo.mean.clone(),
                    var: mo.var.iter().map(|v| v * bessel).collect(),
                };
                (mo.mean, mo.var, Some(stats), true)
            }
            NormMode::Running { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(mismatch("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xhat = norm::normalize(self.val(x), dims, &mean, &inv_std);
        let (g, bt) = (self.val(gamma), self.val(beta));
        let (outer, _, inner) = dims;
        let mut out = vec![0.0; xhat.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    out[i] = g[c] * xhat[i] + bt[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let v = self.derived(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                dims,
                xhat,
                inv_std,
                batch,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Bilinear resample of the last two axes to `height × width`.
    pub fn resize_bilinear(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || height == 0 || width == 0 {
            return Err(mismatch(
                "bilinear_resize",
                format!("cannot resize {shape:?} to {height}x{width}"),
            ));
        }
        let nd = shape.len();
        let from = (shape[nd - 2], shape[nd - 1]);
        let planes = shape[..nd - 2].iter().product();
        let out = resize::forward(self.val(a), planes, from, (height, width));
        let mut out_shape = shape;
        out_shape[nd - 2] = height;
        out_shape[nd - 1] = width;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.derived(
            value,
            Op::Resize {
                a: a.0,
                planes,
                from,
                to: (height, width),
            },
            &[a],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = softmax::split_axis(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let v = self.val(*p);
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let inputs = parts.iter().map(|v| v.0).collect();
        Ok(self.derived(
            value,
            Op::Concat {
                inputs,
                outer,
                inner,
                lens,
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.derived(value, Op::Reshape { a: a.0 }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        if nd < 2 {
            return Err(mismatch("transpose", format!("need at least 2 axes, got {shape:?}")));
        }
        let (rows, cols) = (shape[nd - 2], shape[nd - 1]);
        let batch = shape[..nd - 2].iter().product();
        let out = transpose_data(self.val(a), batch, rows, cols);
        let mut out_shape = shape;
        out_shape.swap(nd - 2, nd - 1);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.derived(
            value,
            Op::Transpose {
                a: a.0,
                batch,
                rows,
                cols,
            },
            &[a],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients {
            grads,
            tracked: self.nodes.iter().map(|n| n.tracked).collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.param_order.clone(),
        })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let tracked = |i: usize| self.nodes[i].tracked;
        let mut acc = |i: usize, g: Vec<f64>| accumulate(grads, i, g);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                if tracked(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let boff = if shared_rhs { 0 } else { i * k * n };
                        gemm(
                            m,
                            n,
                            k,
                            &dy[i * m * n..],
                            Layout::row_major(n),
                            &bv[boff..],
                            Layout::transposed(n),
                            0.0,
                            &mut da[i * m * k..],
                        );
                    }
                    acc(a, da);
                }
                if tracked(b) {
                    let mut db = vec![0.0; if shared_rhs { k * n } else { batch * k * n }];
                    for i in 0..batch {
                        let (off, beta) = if shared_rhs { (0, 1.0) } else { (i * k * n, 0.0) };
                        gemm(
                            k,
                            m,
                            n,
                            &av[i * m * k..],
                            Layout::transposed(k),
                            &dy[i * m * n..],
                            Layout::row_major(n),
                            beta,
                            &mut db[off..],
                        );
                    }
                    acc(b, db);
                }
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (x, w) = (*x, *w);
                let (kl, p) = (geom.patch_len(), geom.positions());
                let wv = self.nodes[w].value.data();
                if tracked(w) {
                    let mut dw = vec![0.0; geom.out_ch * kl];
                    for b in 0..geom.batch {
                        gemm(
                            geom.out_ch,
                            p,
                            kl,
                            &dy[b * geom.out_ch * p..],
                            Layout::row_major(p),
                            &cols[b * kl * p..],
                            Layout::transposed(p),
                            1.0,
                            &mut dw,
                        );
                    }
                    acc(w, dw);
                }
                if tracked(x) {
                    let img = geom.in_ch * geom.h * geom.w;
                    let mut dx = vec![0.0; geom.batch * img];
                    let mut dcols = vec![0.0; kl * p];
                    for b in 0..geom.batch {
                        gemm(
                            kl,
                            geom.out_ch,
                            p,
                            wv,
                            Layout::transposed(kl),
                            &dy[b * geom.out_ch * p..],
                            Layout::row_major(p),
                            0.0,
                            &mut dcols,
                        );
                        conv::col2im(geom, &dcols, &mut dx[b * img..(b + 1) * img]);
                    }
                    acc(x, dx);
                }
            }
            &Op::Add { a, b } => {
                for (i, sign) in [(a, 1.0), (b, 1.0)] {
                    if tracked(i) {
                        acc(i, self.unbroadcast(node, i, dy, sign));
                    }
                }
            }
            &Op::Sub { a, b } => {
                for (i, sign) in [(a, 1.0), (b, -1.0)] {
                    if tracked(i) {
                        acc(i, self.unbroadcast(node, i, dy, sign));
                    }
                }
            }
            &Op::Mul { a, b } => {
                if tracked(a) {
                    acc(a, self.product_grad(node, a, b, dy));
                }
                if tracked(b) {
                    acc(b, self.product_grad(node, b, a, dy));
                }
            }
            &Op::ScaleShift { a, scale } => acc(a, dy.iter().map(|g| g * scale).collect()),
            &Op::Relu { a } => {
                let x = self.nodes[a].value.data();
                acc(a, dy.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
            }
            &Op::Sigmoid { a } => {
                let y = node.value.data();
                acc(a, dy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            &Op::Exp { a } => {
                let y = node.value.data();
                acc(a, dy.iter().zip(y).map(|(g, e)| g * e).collect());
            }
            &Op::Softmax { a, dims, log } => {
                acc(a, softmax::backward(node.value.data(), dy, dims, log));
            }
            &Op::NegSqDist {
                a,
                b,
                rows,
                codes,
                dim,
            } => {
                let (av, bv) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                let mut da = tracked(a).then(|| vec![0.0; rows * dim]);
                let mut db = tracked(b).then(|| vec![0.0; codes * dim]);
                for r in 0..rows {
                    for k in 0..codes {
                        let g = dy[r * codes + k];
                        if g == 0.0 {
                            continue;
                        }
                        for d in 0..dim {
                            let diff = av[r * dim + d] - bv[k * dim + d];
                            if let Some(da) = da.as_mut() {
                                da[r * dim + d] -= 2.0 * g * diff;
                            }
                            if let Some(db) = db.as_mut() {
                                db[k * dim + d] += 2.0 * g * diff;
                            }
                        }
                    }
                }
                if let Some(da) = da {
                    acc(a, da);
                }
                if let Some(db) = db {
                    acc(b, db);
                }
            }
            Op::Sum { a, keep_strides } => {
                let shape = self.nodes[*a].value.shape();
                let unit = broadcast::broadcast_strides(shape, shape);
                let mut dx = vec![0.0; self.nodes[*a].value.len()];
                broadcast::walk2(shape, &unit, keep_strides, |_, i, o| dx[i] = dy[o]);
                acc(*a, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
                batch,
            } => {
                let (outer, ch, inner) = *dims;
                let count = (outer * inner) as f64;
                let g = self.nodes[*gamma].value.data();
                let mut sum_dy = vec![0.0; ch];
                let mut sum_dy_xhat = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            sum_dy[c] += dy[i];
                            sum_dy_xhat[c] += dy[i] * xhat[i];
                        }
                    }
                }
                if tracked(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            let k = g[c] * inv_std[c];
                            for i in base..base + inner {
                                dx[i] = if *batch {
                                    k * (dy[i] - sum_dy[c] / count - xhat[i] * sum_dy_xhat[c] / count)
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if tracked(*gamma) {
                    acc(*gamma, sum_dy_xhat);
                }
                if tracked(*beta) {
                    acc(*beta, sum_dy);
                }
            }
            &Op::Resize { a, planes, from, to } => {
                acc(a, resize::backward(dy, planes, from, to));
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut start = 0;
                for (&i, &len) in inputs.iter().zip(lens) {
                    if tracked(i) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let off = (o * total + start) * inner;
                            d.extend_from_slice(&dy[off..off + len * inner]);
                        }
                        acc(i, d);
                    }
                    start += len;
                }
            }
            &Op::Reshape { a } => acc(a, dy.to_vec()),
            &Op::Transpose { a, batch, rows, cols } => {
                acc(a, transpose_data(dy, batch, cols, rows));
            }
        }
    }

    /// `sign * dy` summed over the axes input `i` was broadcast along.
    fn unbroadcast(&self, node: &Node, i: usize, dy: &[f64], sign: f64) -> Vec<f64> {
        let out_shape = node.value.shape();
        let in_shape = self.nodes[i].value.shape();
        let mut d = vec![0.0; self.nodes[i].value.len()];
        if in_shape == out_shape {
            for (t, g) in d.iter_mut().zip(dy) {
                *t = sign * g;
            }
            return d;
        }
        let unit = broadcast::broadcast_strides(out_shape, out_shape);
        let st = broadcast::broadcast_strides(in_shape, out_shape);
        broadcast::walk2(out_shape, &unit, &st, |o, _, j| d[j] += sign * dy[o]);
        d
    }

    /// Gradient of `a * b` with respect to `wrt`.
    fn product_grad(&self, node: &Node, wrt: usize, other: usize, dy: &[f64]) -> Vec<f64> {
        let out_shape = node.value.shape();
        let in_shape = self.nodes[wrt].value.shape();
        let ov = self.nodes[other].value.data();
        let os = broadcast::broadcast_strides(self.nodes[other].value.shape(), out_shape);
        let ws = broadcast::broadcast_strides(in_shape, out_shape);
        let mut d = vec![0.0; self.nodes[wrt].value.len()];
        broadcast::walk2(out_shape, &ws, &os, |o, w, j| d[w] += dy[o] * ov[j]);
        d
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: Vec<f64>) {
    match &mut grads[i] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn transpose_data(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let (src, dst) = (&x[b * rows * cols..], &mut out[b * rows * cols..]);
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    tracked: Vec<bool>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero if `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Result<Tensor> {
        if !self.tracked[v.0] {
            return Err(TensorError::Detached(v.0));
        }
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Ok(Tensor::zeros(shape)),
        }
    }

    /// Gradients of every trainable parameter the graph touched.
    pub fn params(&self) -> impl Iterator<Item = (&str, Tensor)> + '_ {
        self.params
            .iter()
            .filter(|(_, v)| self.tracked[v.0])
            .map(|(name, v)| (name.as_str(), self.get(*v).expect("tracked")))
    }
}
