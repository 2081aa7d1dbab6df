//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and enough context to propagate gradients;
//! [`Tape::backward`] walks the nodes in exact reverse execution order.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, strides, Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Binary { kind: Binary, a: Var, b: Var },
    Scale { a: Var, c: T },
    Unary { kind: Unary, a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    Gather { a: Var, index: Vec<usize> },
    Concat { parts: Vec<Var>, outer: usize, inner: usize, extents: Vec<usize> },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T>, batch_stats: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T> },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, spatial: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary { kind: Binary::Add, .. } => "add",
            Op::Binary { kind: Binary::Sub, .. } => "sub",
            Op::Binary { kind: Binary::Mul, .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Unary { kind: Unary::Relu, .. } => "relu",
            Op::Unary { kind: Unary::Gelu, .. } => "gelu",
            Op::Unary { kind: Unary::Sigmoid, .. } => "sigmoid",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch statistics produced by a training-mode batch norm,
/// used by the caller to update running estimates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    visited: Vec<usize>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const NORM_EPS: f64 = 1e-5;

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), visited: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        self.push_with(t, Op::Leaf, rg)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Adds a leaf with gradient tracking on.
    pub fn variable(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the value of `v` out as a tensor carrying its gradient.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor<T> {
        let mut t = self.value(v).clone();
        t.requires_grad = self.requires_grad(v);
        t.grad = self.grad(v).map(<[T]>::to_vec);
        t
    }

    /// Node indices visited by the last backward pass, in visit order.
    pub fn backward_order(&self) -> &[usize] {
        &self.visited
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product of `[M,K]·[K,N]`, or batched `[B,M,K]·[B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::dim(format!("matmul of {sa:?} and {sb:?}"));
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(mismatch()),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul { a, b, batch, m, k, n }, &[a, b]))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::new(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = if plan.same {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(numel(&plan.out));
            plan.for_each(|_, ia, ib| out.push(f(av[ia], bv[ib])));
            out
        };
        Ok(self.push(Tensor::from_parts(plan.out, out), Op::Binary { kind, a, b }, &[a, b]))
    }

    /// Elementwise sum with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product with NumPy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let out = self.value(a).map(|x| match kind {
            Unary::Relu => x.max(T::zero()),
            Unary::Gelu => gelu(x),
            Unary::Sigmoid => sigmoid(x),
        });
        self.push(out, Op::Unary { kind, a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.numel().max(1) as f64);
        self.push(Tensor::scalar(m), Op::Mean { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }, &[a]))
    }

    /// Collapses all axes from `from_axis` on into one.
    pub fn flatten(&mut self, a: Var, from_axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if from_axis >= s.len() {
            return Err(Error::dim(format!("flatten axis {from_axis} out of range for {s:?}")));
        }
        let mut shape = s[..from_axis].to_vec();
        shape.push(numel(&s[from_axis..]));
        self.reshape(a, &shape)
    }

    /// `out[i] = a[index[i]]`, reshaped to `shape`. Gradients scatter-add.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if numel(shape) != index.len() {
            return Err(Error::dim(format!(
                "gather of {} indices into shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim(format!("gather index {bad} out of range {}", src.len())));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Gather { a, index }, &[a]))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&x| x >= s.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::dim(format!("invalid permutation {axes:?} for {s:?}")));
        }
        let in_strides = strides(&s);
        let out_shape: Vec<usize> = axes.iter().map(|&x| s[x]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let mut index = Vec::with_capacity(numel(&s));
        for_each_index(&out_shape, |idx| {
            index.push(idx.iter().zip(&src_strides).map(|(i, st)| i * st).sum());
        });
        self.gather(a, index, &out_shape)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {s0:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!("concat of {s0:?} and {s:?} on axis {axis}")));
            }
            extents.push(s[axis]);
        }
        let outer = numel(&s0[..axis]);
        let inner = numel(&s0[axis + 1..]);
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { parts: parts.to_vec(), outer, inner, extents },
            parts,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = (numel(&s[..axis]), s[axis], numel(&s[axis + 1..]));
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax { a, outer, len, inner }, &[a]))
    }

    /// 2-D cross-correlation with zero padding and optional channel groups.
    /// `x: [B,C,H,W]`, `w: [F,C/groups,k,k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = |why: &str| Error::dim(format!("conv2d of input {sx:?} with kernel {sw:?}: {why}"));
        let ([b, c, h, wd], [f, cg, k, k2]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(err("expected 4-d input and kernel"));
        };
        if stride == 0 {
            return Err(err("stride must be at least 1"));
        }
        if groups == 0 || c % groups != 0 || f % groups != 0 || c / groups != *cg {
            return Err(err("channel/group mismatch"));
        }
        if k != k2 {
            return Err(err("kernel must be square"));
        }
        if *k > h + 2 * pad || *k > wd + 2 * pad {
            return Err(err("kernel larger than padded input"));
        }
        let geom = ConvGeom {
            batch: *b,
            in_ch: *c,
            h: *h,
            w: *wd,
            out_ch: *f,
            kernel: *k,
            stride,
            pad,
            groups,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let shape = vec![*b, *f, geom.out_h(), geom.out_w()];
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// Batch normalization over `(B,H,W)` per channel of `[B,C,H,W]` (or
    /// over `B` for `[B,C]`).
    ///
    /// With `running = None` the batch statistics normalize and are returned
    /// for the caller's running-average update; otherwise the given
    /// `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::dim(format!("batch_norm expects [B,C] or [B,C,H,W], got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let spatial = numel(&s[2..]);
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [c] {
                return Err(Error::dim(format!(
                    "batch_norm {name} shape {:?} for {c} channels",
                    self.shape(p)
                )));
            }
        }
        let xv = self.value(x).data();
        let count = b * spatial;
        let eps = T::of(NORM_EPS);
        let (mean, var_biased, stats) = match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::dim("batch_norm running statistics length"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let n = T::of(count as f64);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        acc = acc + xv[(bi * c + ch) * spatial..][..spatial].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / n;
                    let mut sq = T::zero();
                    for bi in 0..b {
                        for &v in &xv[(bi * c + ch) * spatial..][..spatial] {
                            let d = v - mean[ch];
                            sq = sq + d * d;
                        }
                    }
                    var[ch] = sq / n;
                }
                let unbiased = var
                    .iter()
                    .map(|&v| if count > 1 { v * n / T::of((count - 1) as f64) } else { v })
                    .collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
        };
        let invstd: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * spatial;
                for i in base..base + spatial {
                    out[i] = (xv[i] - mean[ch]) * invstd[ch] * g[ch] + be[ch];
                }
            }
        }
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm { x, gamma, beta, mean, invstd, batch_stats },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::dim("layer_norm of a 0-d tensor"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!("layer_norm affine params do not match width {d}")));
        }
        let xv = self.value(x).data();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d.max(1);
        let dn = T::of(d as f64);
        let eps = T::of(NORM_EPS);
        let mut mean = Vec::with_capacity(rows);
        let mut invstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - m) * is * g[j] + be[j];
            }
            mean.push(m);
            invstd.push(is);
        }
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::LayerNorm { x, gamma, beta, mean, invstd },
            &[x, gamma, beta],
        ))
    }

    /// Max pooling over `k×k` windows; padding never wins the max.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s[..] else {
            return Err(Error::dim(format!("max_pool2d expects [B,C,H,W], got {s:?}")));
        };
        if stride == 0 || k > h + 2 * pad || k > w + 2 * pad || pad >= k {
            return Err(Error::dim(format!("max_pool2d k={k} stride={stride} pad={pad} on {s:?}")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let i = base + iy as usize * w + ix as usize;
                            if at == usize::MAX || xv[i] > best {
                                best = xv[i];
                                at = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![b, c, oh, ow], out), Op::MaxPool { x, argmax }, &[x]))
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s[..] else {
            return Err(Error::dim(format!("global_avg_pool expects [B,C,H,W], got {s:?}")));
        };
        let spatial = h * w;
        let n = T::of(spatial as f64);
        let out = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![b, c], out), Op::GlobalAvgPool { x, spatial }, &[x]))
    }

    /// Mean cross-entropy of `[B,K]` logits against class indices, via
    /// log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [b, k] = s[..] else {
            return Err(Error::dim(format!("cross_entropy expects [B,K] logits, got {s:?}")));
        };
        if labels.len() != b {
            return Err(Error::validation(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::validation(format!("label {bad} out of range for {k} classes")));
        }
        if b == 0 {
            return Err(Error::validation("cross_entropy of an empty batch"));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for r in 0..b {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total = total + lse - row[labels[r]];
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / z;
            }
        }
        let loss = total / T::of(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("loss node {} is not on this tape", loss.0)))?;
        if lv.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.value.shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.visited.clear();
        if !lv.requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.visited.push(i);
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if self.needs(a) {
                    let mut da = Vec::with_capacity(batch * m * k);
                    for t in 0..batch {
                        da.extend(kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                        ));
                    }
                    out.push((a, da));
                }
                if self.needs(b) {
                    let mut db = Vec::with_capacity(batch * k * n);
                    for t in 0..batch {
                        db.extend(kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                        ));
                    }
                    out.push((b, db));
                }
            }
            &Op::Binary { kind, a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let plan = Broadcast::new(ta.shape(), tb.shape()).expect("validated in forward");
                let (av, bv) = (ta.data(), tb.data());
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                let mut step = |o: usize, ia: usize, ib: usize| {
                    let go = g[o];
                    let (ga, gb) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * bv[ib], go * av[ia]),
                    };
                    da[ia] = da[ia] + ga;
                    db[ib] = db[ib] + gb;
                };
                if plan.same {
                    (0..g.len()).for_each(|o| step(o, o, o));
                } else {
                    plan.for_each(step);
                }
                out.push((a, da));
                out.push((b, db));
            }
            &Op::Scale { a, c } => out.push((a, g.iter().map(|&x| x * c).collect())),
            &Op::Unary { kind, a } => {
                let x = nodes[a.0].value.data();
                let y = nodes[i].value.data();
                let d = match kind {
                    Unary::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    Unary::Gelu => x.iter().zip(g).map(|(&x, &g)| g * gelu_grad(x)).collect(),
                    Unary::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                };
                out.push((a, d));
            }
            &Op::Sum { a } => out.push((a, vec![g[0]; nodes[a.0].value.numel()])),
            &Op::Mean { a } => {
                let n = nodes[a.0].value.numel();
                out.push((a, vec![g[0] / T::of(n.max(1) as f64); n]));
            }
            &Op::Reshape { a } => out.push((a, g.to_vec())),
            Op::Gather { a, index } => {
                let mut d = vec![T::zero(); nodes[a.0].value.numel()];
                for (&src, &gv) in index.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
                out.push((*a, d));
            }
            Op::Concat { parts, outer, inner, extents } => {
                let total: usize = extents.iter().sum();
                for (pi, (&p, &e)) in parts.iter().zip(extents).enumerate() {
                    let off: usize = extents[..pi].iter().sum();
                    let mut d = Vec::with_capacity(outer * e * inner);
                    for o in 0..*outer {
                        let start = (o * total + off) * inner;
                        d.extend_from_slice(&g[start..start + e * inner]);
                    }
                    out.push((p, d));
                }
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = nodes[i].value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                out.push((a, d));
            }
            &Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    &geom,
                    nodes[x.0].value.data(),
                    nodes[w.0].value.data(),
                    g,
                    self.needs(x),
                    self.needs(w),
                );
                if self.needs(x) {
                    out.push((x, dx));
                }
                if self.needs(w) {
                    out.push((w, dw));
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, batch_stats } => {
                let s = nodes[x.0].value.shape();
                let (b, c) = (s[0], s[1]);
                let spatial = numel(&s[2..]);
                let xv = nodes[x.0].value.data();
                let gv = nodes[gamma.0].value.data();
                let n = T::of((b * spatial) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * spatial;
                        for j in base..base + spatial {
                            let xh = (xv[j] - mean[ch]) * invstd[ch];
                            dgamma[ch] = dgamma[ch] + g[j] * xh;
                            dbeta[ch] = dbeta[ch] + g[j];
                        }
                    }
                }
                let mut dx = vec![T::zero(); xv.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * spatial;
                        for j in base..base + spatial {
                            dx[j] = if *batch_stats {
                                let xh = (xv[j] - mean[ch]) * invstd[ch];
                                gv[ch] * invstd[ch] / n * (n * g[j] - dbeta[ch] - xh * dgamma[ch])
                            } else {
                                g[j] * gv[ch] * invstd[ch]
                            };
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::LayerNorm { x, gamma, beta, mean, invstd } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gamma.0].value.data();
                let d = gv.len();
                let dn = T::of(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xv.len()];
                for (r, (&m, &is)) in mean.iter().zip(invstd).enumerate() {
                    let row = r * d..(r + 1) * d;
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for (j, idx) in row.clone().enumerate() {
                        let xh = (xv[idx] - m) * is;
                        dgamma[j] = dgamma[j] + g[idx] * xh;
                        dbeta[j] = dbeta[j] + g[idx];
                        let dxh = g[idx] * gv[j];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh;
                    }
                    for (j, idx) in row.enumerate() {
                        let xh = (xv[idx] - m) * is;
                        let dxh = g[idx] * gv[j];
                        dx[idx] = is / dn * (dn * dxh - sum_dxh - xh * sum_dxh_xh);
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); nodes[x.0].value.numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
                out.push((*x, d));
            }
            &Op::GlobalAvgPool { x, spatial } => {
                let n = T::of(spatial as f64);
                let d = g.iter().flat_map(|&gv| std::iter::repeat(gv / n).take(spatial)).collect();
                out.push((x, d));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / T::of(b as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] = d[r * k + l] - scale;
                }
                out.push((*logits, d));
            }
        }
        for (v, d) in out {
            self.accumulate(v, d);
        }
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let v = x.f64();
    T::of(0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)))
}

fn gelu_grad<T: Element>(x: T) -> T {
    let v = x.f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
    T::of(cdf + v * pdf)
}

/// Calls `f` with every multi-index of `shape` in row-major order.
fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut d = shape.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

struct Broadcast {
    out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Self { out: a.to_vec(), a_strides: vec![], b_strides: vec![], same: true });
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::dim(format!("shapes {a:?} and {b:?} do not broadcast")));
            }
            out.push(x.max(y));
        }
        let bstr = |p: &[usize]| {
            let st = strides(p);
            p.iter().zip(st).map(|(&e, s)| if e == 1 { 0 } else { s }).collect()
        };
        Ok(Self { a_strides: bstr(&pa), b_strides: bstr(&pb), out, same: false })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut o = 0;
        for_each_index(&self.out, |idx| {
            let ia = idx.iter().zip(&self.a_strides).map(|(i, s)| i * s).sum();
            let ib = idx.iter().zip(&self.b_strides).map(|(i, s)| i * s).sum();
            f(o, ia, ib);
            o += 1;
        });
    }
}
