//! Define-by-run tape. Every op evaluates eagerly and records enough to run
//! the reverse pass; [`Graph::backward`] walks the tape once in reverse.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::kernels::{self, ConvGeom, Mat};
use crate::tensor::{broadcast_binary, expand_to, numel, reduce_to, split_axis};
use crate::{ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Relu(Var),
    Sigmoid(Var),
    SumAxis(Var),
    Expand(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    IndexRows(Var, Vec<usize>),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample2x(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`] for parameters and input leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
    grad_enabled: bool,
}

impl<'s> Default for Graph<'s> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Self { store: None, nodes: Vec::new(), param_vars: HashMap::new(), frozen: HashSet::new(), grad_enabled: true }
    }

    pub fn with_store(store: &'s ParamStore) -> Self {
        Self { store: Some(store), ..Self::new() }
    }

    /// Parameters listed here enter the graph as constants.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    /// Disable gradient tracking for everything created afterwards.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; memoized so each parameter appears once per graph.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let entry = store.entry(id);
        let trainable = !entry.is_buffer && !self.frozen.contains(&id);
        let v = self.push(entry.value.clone(), Op::Leaf, trainable);
        self.param_vars.insert(id, v);
        v
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = broadcast_binary(self.value(a), self.value(b), f);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `c - x`
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        let mut shape = t.shape().to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..dim {
                let src = &d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += *v;
                }
            }
        }
        shape[axis] = 1;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out), Op::SumAxis(x), rg)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis(x, axis);
        self.scale(s, 1.0 / n)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let n = numel(self.shape(x));
        let flat = self.reshape(x, &[n]);
        let s = self.sum_axis(flat, 0);
        self.reshape(s, &[])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = numel(self.shape(x)) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = expand_to(self.value(x), shape);
        let rg = self.rg(&[x]);
        self.push(out, Op::Expand(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = self.value(x).permute(perm);
        let rg = self.rg(&[x]);
        self.push(out, Op::Permute(x, perm.to_vec()), rg)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Var {
        let r = self.shape(x).len();
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let mut shape = t.shape().to_vec();
        let (outer, dim, inner) = split_axis(&shape, axis);
        assert!(start + len <= dim, "narrow out of range");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        shape[axis] = len;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out), Op::Narrow { x, axis, start }, rg)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty());
        let first = self.shape(xs[0]).to_vec();
        let mut shape = first.clone();
        shape[axis] = xs.iter().map(|&v| self.shape(v)[axis]).sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let d = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = self.rg(xs);
        self.push(Tensor::new(&shape, out), Op::Concat { xs: xs.to_vec(), axis }, rg)
    }

    /// Gather rows along axis 0.
    pub fn index_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let t = self.value(x);
        let mut shape = t.shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            assert!(r < shape[0], "row {r} out of range {}", shape[0]);
            out.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
        }
        shape[0] = rows.len();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, out), Op::IndexRows(x, rows.to_vec()), rg)
    }

    /// `[..., M, K] @ [K, N]` or batched `[..., M, K] @ [..., K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_forward(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Matmul(a, b), rg)
    }

    /// `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, kh, kw]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = ConvGeom { channels: xs[1], height: xs[2], width: xs[3], kh: ws[2], kw: ws[3], stride, pad };
        let data = kernels::conv2d_forward(self.value(x).data(), xs[0], self.value(w).data(), ws[0], &geom);
        let out = Tensor::new(&[xs[0], ws[0], geom.out_h(), geom.out_w()], data);
        let rg = self.rg(&[x, w]);
        self.push(out, Op::Conv2d { x, w, geom }, rg)
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let r = s.len();
        let (h, w) = (s[r - 2], s[r - 1]);
        let planes = numel(&s[..r - 2]);
        let data = kernels::upsample2x(self.value(x).data(), planes, h, w);
        let mut shape = s.clone();
        shape[r - 2] = 2 * h;
        shape[r - 1] = 2 * w;
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&shape, data), Op::Upsample2x(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let out = softmax_forward(self.value(x), axis, false);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x, axis), rg)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Var {
        let out = softmax_forward(self.value(x), axis, true);
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x, axis), rg)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(numel(self.shape(loss)), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut result = Gradients::default();
        let param_of: HashMap<Var, ParamId> = self.param_vars.iter().map(|(k, v)| (*v, *k)).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match param_of.get(&Var(i)) {
                    Some(id) => {
                        result.params.insert(*id, g);
                    }
                    None => {
                        result.inputs.insert(Var(i), g);
                    }
                }
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        result
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, reduce_to(g, val(*a).shape())));
                }
                if need(*b) {
                    out.push((*b, reduce_to(g, val(*b).shape())));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, reduce_to(g, val(*a).shape())));
                }
                if need(*b) {
                    out.push((*b, reduce_to(&g.map(|x| -x), val(*b).shape())));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, reduce_to(&broadcast_binary(g, val(*b), |x, y| x * y), val(*a).shape())));
                }
                if need(*b) {
                    out.push((*b, reduce_to(&broadcast_binary(g, val(*a), |x, y| x * y), val(*b).shape())));
                }
            }
            Op::Div(a, b) => {
                if need(*a) {
                    out.push((*a, reduce_to(&broadcast_binary(g, val(*b), |x, y| x / y), val(*a).shape())));
                }
                if need(*b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let t = broadcast_binary(g, &node.value, |x, y| x * y);
                    let t = broadcast_binary(&t, val(*b), |x, y| -x / y);
                    out.push((*b, reduce_to(&t, val(*b).shape())));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * c))),
            Op::AddScalar(x) => out.push((*x, g.clone())),
            Op::Exp(x) => out.push((*x, zip(g, &node.value, |g, y| g * y))),
            Op::Ln(x) => out.push((*x, zip(g, val(*x), |g, x| g / x))),
            Op::Sqrt(x) => out.push((*x, zip(g, &node.value, |g, y| 0.5 * g / y))),
            Op::Relu(x) => out.push((*x, zip(g, val(*x), |g, x| if x > 0.0 { g } else { 0.0 }))),
            Op::Sigmoid(x) => out.push((*x, zip(g, &node.value, |g, y| g * y * (1.0 - y)))),
            Op::SumAxis(x) => out.push((*x, expand_to(g, val(*x).shape()))),
            Op::Expand(x) => out.push((*x, reduce_to(g, val(*x).shape()))),
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape()))),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                out.push((*x, g.permute(&inv)));
            }
            Op::Narrow { x, axis, start } => {
                let xs = val(*x).shape();
                let (outer, dim, inner) = split_axis(xs, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; numel(xs)];
                for o in 0..outer {
                    gx[(o * dim + start) * inner..(o * dim + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, Tensor::new(xs, gx)));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let vs = val(v).shape();
                    let d = vs[*axis];
                    if need(v) {
                        let mut gv = Vec::with_capacity(numel(vs));
                        for o in 0..outer {
                            gv.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + d) * inner]);
                        }
                        out.push((v, Tensor::new(vs, gv)));
                    }
                    offset += d;
                }
            }
            Op::IndexRows(x, rows) => {
                let xs = val(*x).shape();
                let inner: usize = xs[1..].iter().product();
                let mut gx = vec![0.0; numel(xs)];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, s) in gx[r * inner..(r + 1) * inner].iter_mut().zip(&g.data()[k * inner..(k + 1) * inner]) {
                        *d += *s;
                    }
                }
                out.push((*x, Tensor::new(xs, gx)));
            }
            Op::Matmul(a, b) => {
                let (ga, gb) = matmul_backward(val(*a), val(*b), g, need(*a), need(*b));
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gb) = gb {
                    out.push((*b, gb));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (xt, wt) = (val(*x), val(*w));
                let (gx, gw) = kernels::conv2d_backward(
                    xt.data(),
                    xt.shape()[0],
                    wt.data(),
                    wt.shape()[0],
                    geom,
                    g.data(),
                    need(*x),
                    need(*w),
                );
                if let Some(gx) = gx {
                    out.push((*x, Tensor::new(xt.shape(), gx)));
                }
                if let Some(gw) = gw {
                    out.push((*w, Tensor::new(wt.shape(), gw)));
                }
            }
            Op::Upsample2x(x) => {
                let s = val(*x).shape();
                let r = s.len();
                let data = kernels::upsample2x_backward(g.data(), numel(&s[..r - 2]), s[r - 2], s[r - 1]);
                out.push((*x, Tensor::new(s, data)));
            }
            Op::Softmax(x, axis) => {
                // gx = y * (g - sum(g * y))
                let y = &node.value;
                let (outer, dim, inner) = split_axis(y.shape(), *axis);
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |c: usize| (o * dim + c) * inner + k;
                        let dot: f64 = (0..dim).map(|c| g.data()[idx(c)] * y.data()[idx(c)]).sum();
                        for c in 0..dim {
                            gx[idx(c)] = y.data()[idx(c)] * (g.data()[idx(c)] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), gx)));
            }
            Op::LogSoftmax(x, axis) => {
                // gx = g - softmax * sum(g)
                let y = &node.value;
                let (outer, dim, inner) = split_axis(y.shape(), *axis);
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |c: usize| (o * dim + c) * inner + k;
                        let total: f64 = (0..dim).map(|c| g.data()[idx(c)]).sum();
                        for c in 0..dim {
                            gx[idx(c)] = g.data()[idx(c)] - y.data()[idx(c)].exp() * total;
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape(), gx)));
            }
        }
        out
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    broadcast_binary(a, b, f)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_forward(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; x.numel()];
    let mut max = vec![0.0; inner];
    let mut total = vec![0.0; inner];
    for o in 0..outer {
        let base = o * dim * inner;
        max.fill(f64::NEG_INFINITY);
        for c in 0..dim {
            let row = &d[base + c * inner..base + (c + 1) * inner];
            for (m, &v) in max.iter_mut().zip(row) {
                *m = m.max(v);
            }
        }
        total.fill(0.0);
        for c in 0..dim {
            let row = &d[base + c * inner..base + (c + 1) * inner];
            let dst = &mut out[base + c * inner..base + (c + 1) * inner];
            for k in 0..inner {
                let e = (row[k] - max[k]).exp();
                dst[k] = e;
                total[k] += e;
            }
        }
        for c in 0..dim {
            let row = &d[base + c * inner..base + (c + 1) * inner];
            let dst = &mut out[base + c * inner..base + (c + 1) * inner];
            for k in 0..inner {
                dst[k] = if log { row[k] - max[k] - total[k].ln() } else { dst[k] / total[k] };
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Batch count and per-batch matrix sizes for `a @ b`.
fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize, bool) {
    assert!(a.len() >= 2 && b.len() >= 2, "matmul needs rank >= 2, got {a:?} @ {b:?}");
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    assert_eq!(k, k2, "matmul inner mismatch {a:?} @ {b:?}");
    if b.len() == 2 {
        (1, numel(&a[..a.len() - 1]), k, n, true)
    } else {
        assert_eq!(a[..a.len() - 2], b[..b.len() - 2], "matmul batch mismatch {a:?} @ {b:?}");
        (numel(&a[..a.len() - 2]), m, k, n, false)
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let (batch, m, k, n, _) = matmul_dims(a.shape(), b.shape());
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        kernels::gemm(
            Mat::new(&a.data()[i * m * k..(i + 1) * m * k], m, k),
            Mat::new(&b.data()[i * k * n..(i + 1) * k * n], k, n),
            0.0,
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(&shape, out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor, need_a: bool, need_b: bool) -> (Option<Tensor>, Option<Tensor>) {
    let (batch, m, k, n, _) = matmul_dims(a.shape(), b.shape());
    let mut ga = need_a.then(|| vec![0.0; a.numel()]);
    let mut gb = need_b.then(|| vec![0.0; b.numel()]);
    for i in 0..batch {
        let am = Mat::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
        let bm = Mat::new(&b.data()[i * k * n..(i + 1) * k * n], k, n);
        let gm = Mat::new(&g.data()[i * m * n..(i + 1) * m * n], m, n);
        if let Some(ga) = ga.as_mut() {
            kernels::gemm(gm, bm.t(), 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
        }
        if let Some(gb) = gb.as_mut() {
            kernels::gemm(am.t(), gm, 0.0, &mut gb[i * k * n..(i + 1) * k * n]);
        }
    }
    (ga.map(|d| Tensor::new(a.shape(), d)), gb.map(|d| Tensor::new(b.shape(), d)))
}
