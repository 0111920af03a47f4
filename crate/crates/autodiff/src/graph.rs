//! Eager tape: every op computes its value immediately and records what the
//! backward pass needs. Nodes are appended in creation order, so reverse
//! iteration is a valid reverse topological order.

use crate::error::{AdError, Result};
use crate::real::{gemm, Real};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, is_suffix, split_axis, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, axis: usize, indices: Vec<usize> },
    SumAxis { a: Var, axis: usize },
    SumAll(Var),
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { a: Var, axis: usize, rstd: Vec<T> },
    DepthwiseConv1d { x: Var, w: Var, dilation: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape over dense tensors.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of `v`, or `None` when no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, with unreached nodes reported as exact zeros.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Forward identity that blocks every gradient path through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
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

    // ---------------------------------------------------------------- elementwise

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        binary_values(op, self.value(a), self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Ln(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu_fwd);
        self.push(v, Op::Gelu(a), &[a])
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a [..., m, k] @ b [k, n] -> [..., m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(AdError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k.max(1);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        gemm(
            false,
            false,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            false,
        );
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched matmul over equal leading dims: `a [.., m, k] @ b [.., k, n]`,
    /// or `a @ b^T` with `b [.., n, k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || AdError::Shape {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let nd = sa.len();
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if trans_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if k != kb {
            return Err(err());
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                false,
                trans_b,
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..nd - 2].to_vec();
        shape.extend([m, n]);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// General axis permutation; output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(AdError::Invalid {
                op: "permute",
                msg: format!("bad permutation {perm:?} for shape {shape:?}"),
            });
        }
        let v = permute_values(self.value(a), perm);
        Ok(self.push(v, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(AdError::Invalid {
                op: "transpose",
                msg: format!("need at least 2 dims, got {:?}", self.shape(a)),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(AdError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(AdError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AdError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0;
        for &p in parts {
            let len = self.shape(p)[axis];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AdError::Axis {
                op: "narrow",
                axis,
                shape,
            });
        }
        if start + len > shape[axis] {
            return Err(AdError::Invalid {
                op: "narrow",
                msg: format!(
                    "range {start}..{} exceeds dim {} of {shape:?}",
                    start + len,
                    shape[axis]
                ),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let v = Tensor::new(&new_shape, out)?;
        Ok(self.push(v, Op::Narrow { a, axis, start }, &[a]))
    }

    /// Gathers `indices` (repeats allowed) along `axis`.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AdError::Axis {
                op: "index_select",
                axis,
                shape,
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(AdError::Invalid {
                op: "index_select",
                msg: format!("index {bad} out of range for dim {} of {shape:?}", shape[axis]),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * full + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = indices.len();
        let v = Tensor::new(&new_shape, out)?;
        Ok(self.push(
            v,
            Op::IndexSelect {
                a,
                axis,
                indices: indices.to_vec(),
            },
            &[a],
        ))
    }

    // ---------------------------------------------------------------- reductions

    /// Sum over `axis`; the axis is kept with size 1 when `keepdim`.
    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AdError::Axis {
                op: "sum_axis",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut new_shape = shape;
        if keepdim {
            new_shape[axis] = 1;
        } else {
            new_shape.remove(axis);
        }
        let v = Tensor::new(&new_shape, out)?;
        Ok(self.push(v, Op::SumAxis { a, axis }, &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or_else(|| AdError::Axis {
            op: "mean_axis",
            axis,
            shape: self.shape(a).to_vec(),
        })?;
        let s = self.sum_axis(a, axis, keepdim)?;
        Ok(self.scale(s, T::one() / T::c(len as f64)))
    }

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    // ---------------------------------------------------------------- normalisation

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AdError::Axis {
                op: "softmax",
                axis,
                shape,
            });
        }
        let v = softmax_values(self.value(a), axis, false);
        Ok(self.push(v, Op::Softmax { a, axis }, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AdError::Axis {
                op: "log_softmax",
                axis,
                shape,
            });
        }
        let v = softmax_values(self.value(a), axis, true);
        Ok(self.push(v, Op::LogSoftmax { a, axis }, &[a]))
    }

    /// Normalises to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AdError::Axis {
                op: "layer_norm",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let inv_n = T::one() / T::c(len as f64);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mean = (0..len).map(|l| src[idx(l)]).sum::<T>() * inv_n;
                let var = (0..len)
                    .map(|l| {
                        let d = src[idx(l)] - mean;
                        d * d
                    })
                    .sum::<T>()
                    * inv_n;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for l in 0..len {
                    out[idx(l)] = (src[idx(l)] - mean) * r;
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::LayerNorm { a, axis, rstd }, &[a]))
    }

    // ---------------------------------------------------------------- convolution

    /// Causal dilated depthwise convolution.
    ///
    /// `x [B, S, C]`, `w [K, C]`: `y[b, s, c] = sum_k w[k, c] * x[b, s - k*dilation, c]`,
    /// with out-of-range (negative) positions treated as zero padding.
    /// Tap 0 is the current step.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sx[2] != sw[1] || dilation == 0 {
            return Err(AdError::Shape {
                op: "depthwise_conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (b, s, c) = (sx[0], sx[1], sx[2]);
        let k = sw[0];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); b * s * c];
        for bi in 0..b {
            for t in 0..s {
                let dst = &mut out[(bi * s + t) * c..(bi * s + t + 1) * c];
                for tap in 0..k {
                    let back = tap * dilation;
                    if back > t {
                        break;
                    }
                    let src = &xs[(bi * s + t - back) * c..(bi * s + t - back + 1) * c];
                    let wk = &ws[tap * c..(tap + 1) * c];
                    for ((d, &xv), &wv) in dst.iter_mut().zip(src).zip(wk) {
                        *d += xv * wv;
                    }
                }
            }
        }
        let v = Tensor::new(&sx, out)?;
        Ok(self.push(v, Op::DepthwiseConv1d { x, w, dilation }, &[x, w]))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of nodes shared by several paths accumulate additively.
    /// Leaves created via [`Graph::constant`] or [`Graph::stop_gradient`] never
    /// receive a gradient.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let ls = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(AdError::NonScalarLoss(ls.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if rg(*a) {
                    acc(*a, reduce_to(g, out_shape, self.shape(*a)));
                }
                if rg(*b) {
                    acc(*b, reduce_to(g, out_shape, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    acc(*a, reduce_to(g, out_shape, self.shape(*a)));
                }
                if rg(*b) {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    acc(*b, reduce_to(&neg, out_shape, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                let gt = Tensor::new(out_shape, g.to_vec()).expect("grad");
                if rg(*a) {
                    let ga = binary_values("mul", &gt, self.value(*b), |x, y| x * y).expect("shape");
                    acc(*a, reduce_to(ga.data(), out_shape, self.shape(*a)));
                }
                if rg(*b) {
                    let gb = binary_values("mul", &gt, self.value(*a), |x, y| x * y).expect("shape");
                    acc(*b, reduce_to(gb.data(), out_shape, self.shape(*b)));
                }
            }
            Op::Div(a, b) => {
                let gt = Tensor::new(out_shape, g.to_vec()).expect("grad");
                if rg(*a) {
                    let ga = binary_values("div", &gt, self.value(*b), |x, y| x / y).expect("shape");
                    acc(*a, reduce_to(ga.data(), out_shape, self.shape(*a)));
                }
                if rg(*b) {
                    // d(a/b)/db = -out / b
                    let q = binary_values("div", &node.value, self.value(*b), |x, y| x / y).expect("shape");
                    let gb: Vec<T> = g.iter().zip(q.data()).map(|(&x, &y)| -x * y).collect();
                    acc(*b, reduce_to(&gb, out_shape, self.shape(*b)));
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(&g, &x)| g * (x + x)).collect());
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(&g, &y)| g * y).collect());
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(&g, &x)| g / x).collect());
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, g.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect());
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(false, true, m, n, k, g, self.value(*b).data(), &mut ga, false);
                    acc(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(true, false, k, m, n, self.value(*a).data(), g, &mut gb, false);
                    acc(*b, gb);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let nd = sa.len();
                let (m, k) = (sa[nd - 2], sa[nd - 1]);
                let n = out_shape[nd - 1];
                let batch: usize = sa[..nd - 2].iter().product();
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if rg(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &db[i * k * n..(i + 1) * k * n];
                        // trans_b: out = a b^T, so ga = g b; otherwise ga = g b^T.
                        gemm(
                            false,
                            !*trans_b,
                            m,
                            n,
                            k,
                            gi,
                            bi,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    acc(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(true, false, n, m, k, gi, ai, dst, false);
                        } else {
                            gemm(true, false, k, m, n, ai, gi, dst, false);
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(out_shape, g.to_vec()).expect("grad");
                acc(*a, permute_values(&gt, &inv).into_data());
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if rg(p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(p, gp);
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let sa = self.shape(*a);
                let (outer, full, inner) = split_axis(sa, *axis);
                let len = out_shape[*axis];
                let mut ga = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*a, ga);
            }
            Op::IndexSelect { a, axis, indices } => {
                let sa = self.shape(*a);
                let (outer, full, inner) = split_axis(sa, *axis);
                let mut ga = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    for (j, &idx) in indices.iter().enumerate() {
                        let src = &g[(o * indices.len() + j) * inner..(o * indices.len() + j + 1) * inner];
                        let dst = &mut ga[(o * full + idx) * inner..(o * full + idx + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::SumAxis { a, axis } => {
                let sa = self.shape(*a);
                let (outer, len, inner) = split_axis(sa, *axis);
                let mut ga = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        ga[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0]; n]);
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let y = node.value.data();
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            ga[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let y = node.value.data();
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let total: T = (0..len).map(|l| g[idx(l)]).sum();
                        for l in 0..len {
                            ga[idx(l)] = g[idx(l)] - y[idx(l)].exp() * total;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm { a, axis, rstd } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let y = node.value.data();
                let inv_n = T::one() / T::c(len as f64);
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mg = (0..len).map(|l| g[idx(l)]).sum::<T>() * inv_n;
                        let mgy = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum::<T>() * inv_n;
                        let r = rstd[o * inner + i];
                        for l in 0..len {
                            ga[idx(l)] = r * (g[idx(l)] - mg - y[idx(l)] * mgy);
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::DepthwiseConv1d { x, w, dilation } => {
                let sx = self.shape(*x);
                let (b, s, c) = (sx[0], sx[1], sx[2]);
                let k = self.shape(*w)[0];
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if rg(*x) {
                    let mut gx = vec![T::zero(); xs.len()];
                    for bi in 0..b {
                        for t in 0..s {
                            let gi = &g[(bi * s + t) * c..(bi * s + t + 1) * c];
                            for tap in 0..k {
                                let back = tap * dilation;
                                if back > t {
                                    break;
                                }
                                let dst = &mut gx[(bi * s + t - back) * c..(bi * s + t - back + 1) * c];
                                let wk = &ws[tap * c..(tap + 1) * c];
                                for ((d, &gv), &wv) in dst.iter_mut().zip(gi).zip(wk) {
                                    *d += gv * wv;
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                }
                if rg(*w) {
                    let mut gw = vec![T::zero(); ws.len()];
                    for bi in 0..b {
                        for t in 0..s {
                            let gi = &g[(bi * s + t) * c..(bi * s + t + 1) * c];
                            for tap in 0..k {
                                let back = tap * dilation;
                                if back > t {
                                    break;
                                }
                                let src = &xs[(bi * s + t - back) * c..(bi * s + t - back + 1) * c];
                                let dst = &mut gw[tap * c..(tap + 1) * c];
                                for ((d, &gv), &xv) in dst.iter_mut().zip(gi).zip(src) {
                                    *d += gv * xv;
                                }
                            }
                        }
                    }
                    acc(*w, gw);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let (c, a) = (T::c(GELU_C), T::c(GELU_A));
    let half = T::c(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh_act())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a) = (T::c(GELU_C), T::c(GELU_A));
    let half = T::c(0.5);
    let t = (c * (x + a * x * x * x)).tanh_act();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * a * x * x)
}

pub(crate) fn binary_values<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(sa, data);
    }
    let out = broadcast_shape(sa, sb).ok_or_else(|| AdError::Shape {
        op,
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    })?;
    let n: usize = out.iter().product();
    let mut data = Vec::with_capacity(n);
    if out == sa && is_suffix(sb, &out) && !b.is_empty() {
        let bd = b.data();
        for chunk in a.data().chunks(bd.len()) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
    } else if out == sb && is_suffix(sa, &out) && !a.is_empty() {
        let ad = a.data();
        for chunk in b.data().chunks(ad.len()) {
            data.extend(chunk.iter().zip(ad).map(|(&y, &x)| f(x, y)));
        }
    } else {
        let stra = broadcast_strides(sa, &out);
        let strb = broadcast_strides(sb, &out);
        let (ad, bd) = (a.data(), b.data());
        data.resize(n, T::zero());
        for_each_broadcast(&out, &stra, &strb, |flat, ia, ib| data[flat] = f(ad[ia], bd[ib]));
    }
    Tensor::new(&out, data)
}

/// Sums a gradient of shape `out` down to a broadcast operand of shape `target`.
fn reduce_to<T: Real>(g: &[T], out: &[usize], target: &[usize]) -> Vec<T> {
    if out == target {
        return g.to_vec();
    }
    let tn: usize = target.iter().product();
    if tn == 1 {
        return vec![g.iter().copied().sum()];
    }
    let mut res = vec![T::zero(); tn];
    if is_suffix(target, out) {
        for chunk in g.chunks(tn) {
            for (r, &v) in res.iter_mut().zip(chunk) {
                *r += v;
            }
        }
        return res;
    }
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &st, &zeros, |flat, it, _| res[it] += g[flat]);
    res
}

fn permute_values<T: Real>(a: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = a.shape();
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; nd];
    let src = a.data();
    let mut out = vec![T::zero(); src.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |flat, is, _| out[flat] = src[is]);
    Tensor::new(&out_shape, out).expect("permute shape")
}

fn softmax_values<T: Real>(a: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, len, inner) = split_axis(a.shape(), axis);
    let src = a.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| src[idx(l)]).fold(T::neg_infinity(), T::max);
            let total: T = (0..len).map(|l| (src[idx(l)] - max).exp()).sum();
            if log {
                let lse = max + total.ln();
                for l in 0..len {
                    out[idx(l)] = src[idx(l)] - lse;
                }
            } else {
                for l in 0..len {
                    out[idx(l)] = (src[idx(l)] - max).exp() / total;
                }
            }
        }
    }
    Tensor::new(a.shape(), out).expect("softmax shape")
}
