//! Eager tape for reverse-mode differentiation.
//!
//! Every operation evaluates immediately and appends a node holding its
//! value and the operation that produced it. [`Graph::backward`] walks the
//! tape in reverse, so node order is already a topological order.

use std::collections::BTreeMap;

use super::tensor::{ParameterStore, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
    Reshape(Var),
    SelectStep(Var, usize),
    StackSteps(Vec<Var>),
    Conv1d { x: Var, w: Var, b: Var, dilation: usize, cols: Vec<f64> },
    ForwardProjection(Var, Var),
    CumSumLast(Var),
    SmoothL1(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Computes `C (+)= op(A) · op(B)` with `A` `m×k` and `B` `k×n` after the
/// optional transposes. Operands are row-major with their natural shapes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // A stored as m×k (lda=k) or, transposed, as k×m (lda=m).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover every index reachable through the
    // given dimensions and strides (checked above in debug builds and by
    // the shape validation in each caller).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Vehicle-forward axis (second matrix row of `Rx Ry Rz`) and its partials.
fn forward_row_with_partials(a: f64, b: f64, g: f64) -> ([f64; 3], [[f64; 3]; 3]) {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sg, cg) = g.sin_cos();
    let f = [sa * sb * cg + ca * sg, ca * cg - sa * sb * sg, -sa * cb];
    let da = [ca * sb * cg - sa * sg, -sa * cg - ca * sb * sg, -ca * cb];
    let db = [sa * cb * cg, -sa * cb * sg, sa * sb];
    let dg = [-sa * sb * sg + ca * cg, -ca * sg - sa * sb * cg, 0.0];
    (f, [da, db, dg])
}

/// Tape of nodes. Parameters are bound lazily from a [`ParameterStore`].
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParameterStore>,
    bound: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'s ParameterStore) -> Self {
        Graph {
            store: Some(store),
            ..Graph::new()
        }
    }

    /// Forward-only graph: parameters are bound as constants.
    pub fn inference(store: &'s ParameterStore) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds (once) and returns the named parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::invalid("graph has no parameter store"))?;
        let t = store.require(name)?.clone();
        let v = self.variable(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter after [`Graph::backward`].
    /// Parameters that received no gradient report zeros.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .map(|(k, v)| {
                let node = &self.nodes[v.0];
                let g = node.grad.clone().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                (k.clone(), g)
            })
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    // ----- operations -------------------------------------------------------

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let d = sb[0];
        let bias = &self.value(b).data;
        let mut out = self.value(x).clone();
        for row in out.data.chunks_exact_mut(d) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|v| f(*v)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = &self.value(*p).data;
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor { shape, data: out }, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if start + len > d || len == 0 {
            return Err(Error::shape("slice_last", &t.shape, &[start, len]));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data[r * d + start..r * d + start + len]);
        }
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data: out }, Op::SliceLast(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", &t.shape, shape));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `[n,T,d] -> [n,d]` at step `t`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || t >= s[1] {
            return Err(Error::shape("select_step", &s, &[t]));
        }
        let (n, steps, d) = (s[0], s[1], s[2]);
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(n * d);
        for b in 0..n {
            let o = (b * steps + t) * d;
            out.extend_from_slice(&src[o..o + d]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: vec![n, d], data: out }, Op::SelectStep(x, t), rg))
    }

    /// `T × [n,d] -> [n,T,d]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps.first().ok_or_else(|| Error::invalid("stack of nothing"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 {
            return Err(Error::shape("stack_steps", &s0, &[]));
        }
        for v in steps {
            if self.shape(*v) != &s0[..] {
                return Err(Error::shape("stack_steps", &s0, self.shape(*v)));
            }
        }
        let (n, d, t_len) = (s0[0], s0[1], steps.len());
        let mut out = vec![0.0; n * t_len * d];
        for (t, v) in steps.iter().enumerate() {
            let src = &self.value(*v).data;
            for b in 0..n {
                let o = (b * t_len + t) * d;
                out[o..o + d].copy_from_slice(&src[b * d..(b + 1) * d]);
            }
        }
        let rg = steps.iter().any(|v| self.rg(*v));
        Ok(self.push(
            Tensor {
                shape: vec![n, t_len, d],
                data: out,
            },
            Op::StackSteps(steps.to_vec()),
            rg,
        ))
    }

    /// Causal dilated 1-D convolution on channel-last sequences.
    ///
    /// `x: [n,T,cin]`, `w: [k,cin,cout]`, `b: [cout]` → `[n,T,cout]` with
    /// `out[t] = b + Σ_j x[t - (k-1-j)·dilation] · w[j]`, reading zeros
    /// before the sequence start.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[2] || sb.len() != 1 || sb[0] != sw[2] {
            return Err(Error::shape("conv1d_causal", &sx, &sw));
        }
        if dilation == 0 || sw[0] == 0 {
            return Err(Error::invalid("conv1d_causal needs kernel >= 1 and dilation >= 1"));
        }
        let (n, steps, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[2]);
        let width = k * cin;
        let src = &self.value(x).data;
        let mut cols = vec![0.0; n * steps * width];
        for bi in 0..n {
            for t in 0..steps {
                let row = &mut cols[(bi * steps + t) * width..(bi * steps + t + 1) * width];
                for j in 0..k {
                    let shift = (k - 1 - j) * dilation;
                    if t >= shift {
                        let o = (bi * steps + t - shift) * cin;
                        row[j * cin..(j + 1) * cin].copy_from_slice(&src[o..o + cin]);
                    }
                }
            }
        }
        let mut out = vec![0.0; n * steps * cout];
        gemm(n * steps, width, cout, &cols, false, &self.value(w).data, false, &mut out, false);
        let bias = &self.value(b).data;
        for row in out.chunks_exact_mut(cout) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, steps, cout],
                data: out,
            },
            Op::Conv1d { x, w, b, dilation, cols },
            rg,
        ))
    }

    /// Per row: `forward_row(theta) · v`, where `forward_row` is the second
    /// row of `Rx(a)·Ry(b)·Rz(g)`. `theta, v: [m,3]` → `[m,1]`.
    pub fn forward_projection(&mut self, theta: Var, v: Var) -> Result<Var> {
        let (st, sv) = (self.shape(theta), self.shape(v));
        if st.len() != 2 || st[1] != 3 || st != sv {
            return Err(Error::shape("forward_projection", st, sv));
        }
        let m = st[0];
        let (th, vv) = (&self.value(theta).data, &self.value(v).data);
        let data = (0..m)
            .map(|r| {
                let (f, _) = forward_row_with_partials(th[3 * r], th[3 * r + 1], th[3 * r + 2]);
                f[0] * vv[3 * r] + f[1] * vv[3 * r + 1] + f[2] * vv[3 * r + 2]
            })
            .collect();
        let rg = self.rg(theta) || self.rg(v);
        Ok(self.push(Tensor { shape: vec![m, 1], data }, Op::ForwardProjection(theta, v), rg))
    }

    /// Inclusive prefix sum along the last axis.
    pub fn cumsum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data.clone();
        for row in out.chunks_exact_mut(d) {
            for i in 1..row.len() {
                row[i] += row[i - 1];
            }
        }
        let shape = t.shape.clone();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out }, Op::CumSumLast(x), rg)
    }

    /// Mean elementwise SmoothL1 (Huber with unit threshold).
    pub fn smooth_l1(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.shape(x) != self.shape(y) {
            return Err(Error::shape("smooth_l1", self.shape(x), self.shape(y)));
        }
        let (a, b) = (&self.value(x).data, &self.value(y).data);
        if a.is_empty() {
            return Err(Error::invalid("smooth_l1 of empty tensors"));
        }
        let total: f64 = a
            .iter()
            .zip(b)
            .map(|(p, q)| {
                let r = (p - q).abs();
                if r < 1.0 {
                    0.5 * r * r
                } else {
                    r - 0.5
                }
            })
            .sum();
        let v = total / a.len() as f64;
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Tensor::scalar(v), Op::SmoothL1(x, y), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data.iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    // ----- backward ---------------------------------------------------------

    fn accum(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let g = node.grad.get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn accum_slice(&mut self, v: Var, src: &[f64], scale: f64) {
        self.accum(v, |g| {
            for (a, b) in g.iter_mut().zip(src) {
                *a += scale * b;
            }
        });
    }

    /// Reverse pass from a single-element output. Clears previous gradients.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(Error::shape("backward", self.shape(out), &[1]));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(out) {
            return Ok(());
        }
        self.nodes[out.0].grad = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let Some(gout) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &gout);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(gout);
        }
        Ok(())
    }

    fn backprop(&mut self, idx: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bv = self.value(*b).data.clone();
                    self.accum(*a, |g| gemm(m, n, k, gout, false, &bv, true, g, true));
                }
                if self.rg(*b) {
                    let av = self.value(*a).data.clone();
                    self.accum(*b, |g| gemm(k, m, n, &av, true, gout, false, g, true));
                }
            }
            Op::AddBias(x, b) => {
                self.accum_slice(*x, gout, 1.0);
                let d = self.shape(*b)[0];
                self.accum(*b, |g| {
                    for row in gout.chunks_exact(d) {
                        for (a, r) in g.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum_slice(*a, gout, 1.0);
                self.accum_slice(*b, gout, 1.0);
            }
            Op::Sub(a, b) => {
                self.accum_slice(*a, gout, 1.0);
                self.accum_slice(*b, gout, -1.0);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data.clone();
                    self.accum(*a, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * bv[i];
                        }
                    });
                }
                if self.rg(*b) {
                    let av = self.value(*a).data.clone();
                    self.accum(*b, |g| {
                        for i in 0..g.len() {
                            g[i] += gout[i] * av[i];
                        }
                    });
                }
            }
            Op::Affine(x, s) => self.accum_slice(*x, gout, *s),
            Op::Relu(x) => {
                let xv = self.value(*x).data.clone();
                self.accum(*x, |g| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.nodes[idx].value.data.clone();
                self.accum(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data.clone();
                self.accum(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = self.nodes[idx].value.last_dim();
                let rows = self.nodes[idx].value.rows();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    self.accum(*p, |g| {
                        for r in 0..rows {
                            for c in 0..w {
                                g[r * w + c] += gout[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SliceLast(x, start) => {
                let d = self.value(*x).last_dim();
                let len = self.nodes[idx].value.last_dim();
                let start = *start;
                self.accum(*x, |g| {
                    for (r, row) in gout.chunks_exact(len).enumerate() {
                        for (c, v) in row.iter().enumerate() {
                            g[r * d + start + c] += v;
                        }
                    }
                });
            }
            Op::Reshape(x) => self.accum_slice(*x, gout, 1.0),
            Op::SelectStep(x, t) => {
                let s = self.shape(*x).to_vec();
                let (steps, d, t) = (s[1], s[2], *t);
                self.accum(*x, |g| {
                    for (b, row) in gout.chunks_exact(d).enumerate() {
                        let o = (b * steps + t) * d;
                        for c in 0..d {
                            g[o + c] += row[c];
                        }
                    }
                });
            }
            Op::StackSteps(steps) => {
                let t_len = steps.len();
                for (t, v) in steps.iter().enumerate() {
                    let d = self.shape(*v)[1];
                    self.accum(*v, |g| {
                        for (b, row) in g.chunks_exact_mut(d).enumerate() {
                            let o = (b * t_len + t) * d;
                            for c in 0..d {
                                row[c] += gout[o + c];
                            }
                        }
                    });
                }
            }
            Op::Conv1d { x, w, b, dilation, cols } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (n, steps, cin) = (sx[0], sx[1], sx[2]);
                let (k, cout) = (sw[0], sw[2]);
                let width = k * cin;
                let rows = n * steps;
                self.accum(*b, |g| {
                    for row in gout.chunks_exact(cout) {
                        for (a, r) in g.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                });
                self.accum(*w, |g| gemm(width, rows, cout, cols, true, gout, false, g, true));
                if self.rg(*x) {
                    let wv = self.value(*w).data.clone();
                    let mut dcols = vec![0.0; rows * width];
                    gemm(rows, cout, width, gout, false, &wv, true, &mut dcols, false);
                    let dil = *dilation;
                    self.accum(*x, |g| {
                        for bi in 0..n {
                            for t in 0..steps {
                                let row = &dcols[(bi * steps + t) * width..(bi * steps + t + 1) * width];
                                for j in 0..k {
                                    let shift = (k - 1 - j) * dil;
                                    if t >= shift {
                                        let o = (bi * steps + t - shift) * cin;
                                        for c in 0..cin {
                                            g[o + c] += row[j * cin + c];
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::ForwardProjection(theta, v) => {
                let th = self.value(*theta).data.clone();
                let vv = self.value(*v).data.clone();
                let m = th.len() / 3;
                let mut dth = vec![0.0; 3 * m];
                let mut dv = vec![0.0; 3 * m];
                for r in 0..m {
                    let (f, p) = forward_row_with_partials(th[3 * r], th[3 * r + 1], th[3 * r + 2]);
                    let vr = [vv[3 * r], vv[3 * r + 1], vv[3 * r + 2]];
                    for a in 0..3 {
                        dth[3 * r + a] = gout[r] * (p[a][0] * vr[0] + p[a][1] * vr[1] + p[a][2] * vr[2]);
                        dv[3 * r + a] = gout[r] * f[a];
                    }
                }
                self.accum_slice(*theta, &dth, 1.0);
                self.accum_slice(*v, &dv, 1.0);
            }
            Op::CumSumLast(x) => {
                let d = self.value(*x).last_dim();
                self.accum(*x, |g| {
                    for (grow, orow) in g.chunks_exact_mut(d).zip(gout.chunks_exact(d)) {
                        let mut acc = 0.0;
                        for i in (0..d).rev() {
                            acc += orow[i];
                            grow[i] += acc;
                        }
                    }
                });
            }
            Op::SmoothL1(x, y) => {
                let (a, b) = (self.value(*x).data.clone(), self.value(*y).data.clone());
                let scale = gout[0] / a.len() as f64;
                let d: Vec<f64> = a
                    .iter()
                    .zip(&b)
                    .map(|(p, q)| (p - q).clamp(-1.0, 1.0) * scale)
                    .collect();
                self.accum_slice(*x, &d, 1.0);
                self.accum_slice(*y, &d, -1.0);
            }
            Op::Sum(x) => {
                let g0 = gout[0];
                self.accum(*x, |g| g.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(x) => {
                let g0 = gout[0] / self.value(*x).numel() as f64;
                self.accum(*x, |g| g.iter_mut().for_each(|v| *v += g0));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_and_bias_by_hand() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.5]));
        let xw = g.matmul(x, w).unwrap();
        let y = g.add_bias(xw, b).unwrap();
        assert_eq!(g.value(y).data, vec![3.5]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 1]));
        let err = g.matmul(x, w).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
    }

    #[test]
    fn conv_kernel_two_by_hand() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let w = g.constant(t(&[2, 1, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv1d_causal(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_kernel_one_is_pointwise() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let w = g.constant(t(&[1, 2, 1], &[2.0, -1.0]));
        let b = g.constant(t(&[1], &[0.25]));
        for d in [1, 3, 7] {
            let y = g.conv1d_causal(x, w, b, d).unwrap();
            assert_eq!(g.value(y).data, vec![0.25, 2.25, 4.25, 6.25]);
        }
    }

    #[test]
    fn smooth_l1_branches() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1.0, 0.5, 3.0]));
        let b = g.constant(t(&[3], &[1.0, 0.0, 0.0]));
        let l = g.smooth_l1(a, b).unwrap();
        assert!((g.value(l).item() - (0.0 + 0.125 + 2.5) / 3.0).abs() < 1e-15);
        for (x, y, want) in [(2.0, 2.0, 0.0), (0.5, 0.0, 0.125), (3.0, 0.0, 2.5)] {
            let a = g.constant(Tensor::scalar(x));
            let b = g.constant(Tensor::scalar(y));
            let l = g.smooth_l1(a, b).unwrap();
            assert_eq!(g.value(l).item(), want);
        }
    }

    #[test]
    fn backward_through_shared_node() {
        // y = sum(x * x) -> dy/dx = 2x
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn inference_graph_has_no_grads() {
        let mut store = ParameterStore::new();
        store.insert("w", t(&[1], &[2.0])).unwrap();
        let mut g = Graph::inference(&store);
        let w = g.param("w").unwrap();
        let y = g.sum(w);
        g.backward(y).unwrap();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
