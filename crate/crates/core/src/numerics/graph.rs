//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended to the tape in creation order, so creation index is a
//! valid topological order and `backward` simply walks the tape in reverse.
//! Gradient contributions are therefore accumulated in a fixed order and
//! repeated runs are bit-identical.

use std::collections::{BTreeMap, HashMap};

use super::tensor::{broadcast_map, broadcast_shapes, strides};
use super::{Float, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Reshape,
    Permute,
    LayerNorm,
    Softmax,
    Gelu,
    Sigmoid,
    Softplus,
    Log,
    Sum,
    Mean,
    Concat,
    Gather,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat => "concat",
            OpKind::Gather => "gather",
        }
    }

    pub const ALL: [OpKind; 18] = {
        use OpKind::*;
        [
            Leaf, Add, Sub, Mul, Scale, MatMul, Reshape, Permute, LayerNorm, Softmax, Gelu,
            Sigmoid, Softplus, Log, Sum, Mean, Concat, Gather,
        ]
    };

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Deliberate corruption of one op's backward rule: the gradient it passes to
/// its inputs is negated. Used to prove the gradient checker catches bugs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradFault {
    pub op: OpKind,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var, usize),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute(..) => OpKind::Permute,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Log(..) => OpKind::Log,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Concat(..) => OpKind::Concat,
            Op::Gather(..) => OpKind::Gather,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// A single forward/backward computation.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
    fault: Option<GradFault>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: GradFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter as a differentiable leaf; repeated calls with
    /// the same name return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.leaf(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every bound parameter (zeros when unreached).
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(&sa, &sb).ok_or(Error::Dimension {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((Tensor::new(out_shape, data)?, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T) -> (Tensor<T>, bool) {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        (value, self.rg(a))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let (value, rg) = self.unary(a, |x| half * x * (T::one() + (x * inv_sqrt2).erf()));
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (value, rg) = self.unary(a, sigmoid);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let (value, rg) = self.unary(a, softplus);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let (value, rg) = self.unary(a, |x| x.ln());
        self.push(value, Op::Log(a), rg)
    }

    // ---------------------------------------------------------------------
    // reductions and structure

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::EmptyAxis { op: "mean" });
        }
        let s: T = x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let mut seen = vec![false; in_shape.len()];
        if perm.len() != in_shape.len()
            || perm.iter().any(|&p| p >= in_shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for shape {in_shape:?}"
            )));
        }
        let map = permute_map(&in_shape, perm);
        let x = self.value(a).data();
        let data = map.iter().map(|&i| x[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(*first).is_empty() {
            return Err(Error::shape("concat of scalars"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Row selection along axis 0; indices may repeat.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(idx)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather(a, idx.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather(a, &idx)
    }

    // ---------------------------------------------------------------------
    // linear algebra and normalization

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast batch
    /// extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let dim_err = || Error::Dimension {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(dim_err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(dim_err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shapes(batch_a, batch_b).ok_or_else(dim_err)?;
        let map_a = broadcast_map(&batch, batch_a);
        let map_b = broadcast_map(&batch, batch_b);
        let nb: usize = batch.iter().product();
        let mut out = vec![T::zero(); nb * m * n];
        let va = self.value(a).data();
        let vb = self.value(b).data();
        for ob in 0..nb {
            let ia = map_a[ob] * m * k;
            let ib = map_b[ob] * k * n;
            T::gemm(
                m,
                k,
                n,
                &va[ia..ia + m * k],
                (k as isize, 1),
                &vb[ib..ib + k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[ob * m * n..(ob + 1) * m * n],
            );
        }
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::EmptyAxis { op: "layer_norm" })?;
        if d == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let rows = xs.len() / d;
        let mut xhat = Vec::with_capacity(xs.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xs.len());
        for row in xs.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gs[j] + bs[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xs[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (xs[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), rg))
    }

    // ---------------------------------------------------------------------
    // backward

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if self.fault.is_some_and(|f| f.op == self.nodes[i].op.kind()) {
                let flipped: Vec<T> = g.iter().map(|&v| -v).collect();
                self.propagate(i, &flipped);
            } else {
                self.propagate(i, &g);
            }
            // parents always precede i, so nothing was written to node i
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, f: impl FnOnce(&mut [T], &[T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        let mut g = self.nodes[v.0]
            .grad
            .take()
            .unwrap_or_else(|| vec![T::zero(); numel]);
        f(&mut g, self.nodes[v.0].value.data());
        self.nodes[v.0].grad = Some(g);
    }

    fn accum_broadcast(&mut self, v: Var, out_shape: &[usize], contrib: &[T]) {
        let in_shape = self.shape(v).to_vec();
        if in_shape == out_shape {
            self.accum(v, |g, _| {
                for (a, &c) in g.iter_mut().zip(contrib) {
                    *a += c;
                }
            });
        } else {
            let map = broadcast_map(out_shape, &in_shape);
            self.accum(v, |g, _| {
                for (&j, &c) in map.iter().zip(contrib) {
                    g[j] += c;
                }
            });
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Move the op out so parents can be borrowed mutably; restored below.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out_shape = self.nodes[i].value.shape().to_vec();
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_broadcast(*a, &out_shape, g);
                self.accum_broadcast(*b, &out_shape, g);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(*a, &out_shape, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accum_broadcast(*b, &out_shape, &neg);
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let ma = broadcast_map(&out_shape, &sa);
                let mb = broadcast_map(&out_shape, &sb);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<T> = g.iter().zip(&mb).map(|(&gi, &j)| gi * vb[j]).collect();
                let gb: Vec<T> = g.iter().zip(&ma).map(|(&gi, &j)| gi * va[j]).collect();
                self.accum_broadcast(*a, &out_shape, &ga);
                self.accum_broadcast(*b, &out_shape, &gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(*a, |acc, _| {
                    for (x, &gi) in acc.iter_mut().zip(g) {
                        *x += gi * c;
                    }
                });
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, &out_shape, g),
            Op::Reshape(a) => self.accum(*a, |acc, _| {
                for (x, &gi) in acc.iter_mut().zip(g) {
                    *x += gi;
                }
            }),
            Op::Permute(a, perm) => {
                let map = permute_map(&self.shape(*a).to_vec(), perm);
                self.accum(*a, |acc, _| {
                    for (&src, &gi) in map.iter().zip(g) {
                        acc[src] += gi;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().expect("ln rank");
                let gs = self.value(*gamma).data().to_vec();
                let dt = T::of(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); g.len()];
                for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gs[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= dt;
                    mean_dh_h /= dt;
                    for j in 0..d {
                        let dh = gr[j] * gs[j];
                        dx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                let add = |acc: &mut [T], src: &[T]| {
                    for (x, &s) in acc.iter_mut().zip(src) {
                        *x += s;
                    }
                };
                self.accum(*x, |acc, _| add(acc, &dx));
                self.accum(*gamma, |acc, _| add(acc, &dgamma));
                self.accum(*beta, |acc, _| add(acc, &dbeta));
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(&out_shape, *axis);
                let y = self.nodes[i].value.data().to_vec();
                self.accum(*x, |acc, _| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + k;
                            let mut dot = T::zero();
                            for j in 0..n {
                                dot += g[at(j)] * y[at(j)];
                            }
                            for j in 0..n {
                                acc[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
                let half = T::of(0.5);
                self.accum(*a, |acc, x| {
                    for ((s, &xi), &gi) in acc.iter_mut().zip(x).zip(g) {
                        let cdf = half * (T::one() + (xi * inv_sqrt2).erf());
                        let pdf = (-half * xi * xi).exp() * inv_sqrt2pi;
                        *s += gi * (cdf + xi * pdf);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accum(*a, |acc, _| {
                    for ((s, &yi), &gi) in acc.iter_mut().zip(&y).zip(g) {
                        *s += gi * yi * (T::one() - yi);
                    }
                });
            }
            Op::Softplus(a) => self.accum(*a, |acc, x| {
                for ((s, &xi), &gi) in acc.iter_mut().zip(x).zip(g) {
                    *s += gi * sigmoid(xi);
                }
            }),
            Op::Log(a) => self.accum(*a, |acc, x| {
                for ((s, &xi), &gi) in acc.iter_mut().zip(x).zip(g) {
                    *s += gi / xi;
                }
            }),
            Op::Sum(a) => {
                let gi = g[0];
                self.accum(*a, |acc, _| acc.iter_mut().for_each(|s| *s += gi));
            }
            Op::Mean(a) => {
                let n = T::of(self.value(*a).numel() as f64);
                let gi = g[0] / n;
                self.accum(*a, |acc, _| acc.iter_mut().for_each(|s| *s += gi));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let chunk = &g[offset..offset + len];
                    self.accum(p, |acc, _| {
                        for (s, &gi) in acc.iter_mut().zip(chunk) {
                            *s += gi;
                        }
                    });
                    offset += len;
                }
            }
            Op::Gather(a, idx) => {
                let width = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                self.accum(*a, |acc, _| {
                    for (row, &r) in idx.iter().enumerate() {
                        for j in 0..width {
                            acc[r * width + j] += g[row * width + j];
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn matmul_backward(&mut self, a: Var, b: Var, out_shape: &[usize], g: &[T]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = &out_shape[..out_shape.len() - 2];
        let map_a = broadcast_map(batch, &sa[..sa.len() - 2]);
        let map_b = broadcast_map(batch, &sb[..sb.len() - 2]);
        let nb: usize = batch.iter().product();
        if self.rg(a) {
            let vb = self.value(b).data().to_vec();
            self.accum(a, |acc, _| {
                for ob in 0..nb {
                    let ia = map_a[ob] * m * k;
                    let ib = map_b[ob] * k * n;
                    // dA += dC · Bᵀ
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[ob * m * n..(ob + 1) * m * n],
                        (n as isize, 1),
                        &vb[ib..ib + k * n],
                        (1, n as isize),
                        T::one(),
                        &mut acc[ia..ia + m * k],
                    );
                }
            });
        }
        if self.rg(b) {
            let va = self.value(a).data().to_vec();
            self.accum(b, |acc, _| {
                for ob in 0..nb {
                    let ia = map_a[ob] * m * k;
                    let ib = map_b[ob] * k * n;
                    // dB += Aᵀ · dC
                    T::gemm(
                        k,
                        m,
                        n,
                        &va[ia..ia + m * k],
                        (1, k as isize),
                        &g[ob * m * n..(ob + 1) * m * n],
                        (n as isize, 1),
                        T::one(),
                        &mut acc[ib..ib + k * n],
                    );
                }
            });
        }
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For each output linear index of the permuted tensor, the source index.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut coord = vec![0usize; out_shape.len()];
    for _ in 0..numel {
        map.push(coord.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
        for d in (0..coord.len()).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random_store(rng: &mut ChaCha8Rng, items: &[(&str, &[usize])]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for (name, shape) in items {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            store.insert(*name, Tensor::new(shape.to_vec(), data).unwrap()).unwrap();
        }
        store
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::<f64>::new();
        let i = g.input(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = g.input(t(&[2, 2], &[2., 3., 4., 5.]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[2., 3., 4., 5.]);

        let a = g.input(t(&[1, 2], &[1., 2.]));
        let b = g.input(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let va = g.input(t(&[4, 5], &a));
        let vb = g.input(t(&[5, 3], &b));
        let c = g.matmul(va, vb).unwrap();
        let oracle = naive_matmul(&a, &b, 4, 5, 3);
        for (x, y) in g.value(c).data().iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let va = g.input(t(&[2, 3, 4], &a));
        let vb = g.input(t(&[4, 2], &b));
        let c = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        for batch in 0..2 {
            let oracle = naive_matmul(&a[batch * 12..(batch + 1) * 12], &b, 3, 4, 2);
            for (x, y) in g.value(c).data()[batch * 6..(batch + 1) * 6].iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut g = Graph::<f64>::new();
        let gamma = g.input(t(&[4], &[1.; 4]));
        let beta = g.input(Tensor::zeros(&[4]));
        let x = g.input(t(&[4], &[5.; 4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let gamma = g.input(t(&[2], &[1., 1.]));
        let beta = g.input(Tensor::zeros(&[2]));
        let x = g.input(t(&[2], &[1., -1.]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-15);
        assert!((g.value(y).data()[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rejects_empty_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[3, 0]));
        let p = g.input(Tensor::zeros(&[0]));
        assert!(matches!(
            g.layer_norm(x, p, p, 1e-5),
            Err(Error::EmptyAxis { .. })
        ));
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..5 * 16).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[5, 16], &data));
        let gamma = g.input(t(&[16], &[1.; 16]));
        let beta = g.input(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for row in g.value(y).data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.input(t(&[2], &[1000., 0.]));
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|v| v.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_any_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3, 4], &data));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| v[o * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn gelu_reference_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[0.0, 3.0]));
        let y = g.gelu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        // 1.5·(1 + erf(3/√2)), erf(2.1213203) = 0.99730020393674
        assert!((v[1] - 2.99595030590).abs() < 1e-9, "{}", v[1]);
        assert!((v[1] - 2.9960).abs() < 1e-4);
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1., 2., 3.]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let store = random_store(&mut rng, &[("a", &[3, 4]), ("b", &[4, 2])]);
            let mut g = Graph::<f32>::new();
            let store = store.cast::<f32>();
            let a = g.param(&store, "a").unwrap();
            let b = g.param(&store, "b").unwrap();
            let c = g.matmul(a, b).unwrap();
            let c = g.gelu(c);
            let s = g.sum(c);
            g.backward(s).unwrap();
            (g.value(s).data().to_vec(), g.param_grads())
        };
        assert_eq!(run(), run());
    }

    fn check(name: &str, items: &[(&str, &[usize])], f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>) {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let store = random_store(&mut rng, items);
            let report = check_gradients(&store, &f, &GradCheckOptions::default()).unwrap();
            assert!(
                report.max_rel_err <= 1e-6,
                "{name}: seed {seed} rel err {} at {}",
                report.max_rel_err,
                report.worst
            );
        }
    }

    #[test]
    fn gradcheck_elementwise_and_reductions() {
        check("add/sub/mul broadcast", &[("a", &[3, 4]), ("b", &[4]), ("c", &[3, 1])], |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let c = g.param(s, "c")?;
            let x = g.add(a, b)?;
            let y = g.mul(x, c)?;
            let z = g.sub(y, b)?;
            let z = g.mul(z, z)?;
            g.mean(z)
        });
        check("scale/sigmoid/softplus/log", &[("a", &[5])], |g, s| {
            let a = g.param(s, "a")?;
            let p = g.sigmoid(a);
            let l = g.log(p);
            let sp = g.softplus(a);
            let sp = g.scale(sp, 0.7);
            let t = g.add(l, sp)?;
            Ok(g.sum(t))
        });
    }

    #[test]
    fn gradcheck_matmul_layer_norm_softmax_gelu() {
        check("matmul", &[("a", &[2, 3, 4]), ("b", &[4, 5])], |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let c = g.matmul(a, b)?;
            let c = g.mul(c, c)?;
            Ok(g.sum(c))
        });
        check("layer_norm", &[("x", &[3, 6]), ("g", &[6]), ("b", &[6]), ("w", &[3, 6])], |g, s| {
            let x = g.param(s, "x")?;
            let ga = g.param(s, "g")?;
            let b = g.param(s, "b")?;
            let w = g.param(s, "w")?;
            let y = g.layer_norm(x, ga, b, 1e-5)?;
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        });
        check("softmax", &[("x", &[2, 3, 4]), ("w", &[2, 3, 4])], |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let y = g.softmax(x, 1)?;
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        });
        check("gelu", &[("x", &[7]), ("w", &[7])], |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let y = g.gelu(x);
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        });
    }

    #[test]
    fn gradcheck_structural_ops() {
        check("permute/reshape/concat/gather", &[("a", &[2, 3, 4]), ("b", &[1, 12]), ("w", &[4, 12])], |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let w = g.param(s, "w")?;
            let p = g.permute(a, &[1, 0, 2])?;
            let r = g.reshape(p, &[3, 8])?;
            let r = g.reshape(r, &[2, 12])?;
            let c = g.concat(&[r, b])?;
            let c = g.gather(c, &[2, 0, 0, 1])?;
            let y = g.mul(c, w)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        });
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = random_store(&mut rng, &[("x", &[6])]);
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.param(s, "x")?;
            let y = g.gelu(x);
            Ok(g.sum(y))
        };
        let opts = GradCheckOptions {
            fault: Some(GradFault { op: OpKind::Gelu }),
            ..Default::default()
        };
        let report = check_gradients(&store, f, &opts).unwrap();
        assert!(report.max_rel_err > 1e-4);
    }
}
