//! Layer building blocks on top of the autodiff graph.

use irs_autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One forward pass: the graph plus mode flags and side outputs.
pub struct Ctx<'s> {
    pub g: Graph<'s>,
    pub train: bool,
    rng: ChaCha8Rng,
    /// Running-statistic updates produced by batch norms in training mode.
    pub bn_updates: Vec<(ParamId, Tensor)>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, train: bool, seed: u64) -> Self {
        Self { g: Graph::with_store(store), train, rng: ChaCha8Rng::seed_from_u64(seed), bn_updates: Vec::new() }
    }

    /// Evaluation mode without gradient tracking.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self { g: Graph::with_store(store).no_grad(), ..Self::new(store, false, 0) }
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let shape = self.g.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(&shape, |_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 });
        let m = self.g.constant(mask);
        self.g.mul(x, m)
    }
}

/// Deterministic parameter initialiser that registers tensors under a
/// name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: String::new() }
    }

    /// Run `f` with `name.` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{name}", self.prefix)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        let n = self.full_name(name);
        self.store.add(n, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        let n = self.full_name(name);
        self.store.add(n, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.full_name(name);
        self.store.add_buffer(n, value)
    }
}

/// `y = x @ w + b` over the last axis; `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        init.scope(name, |i| Self { w: i.uniform("w", &[fan_in, fan_out], bound), b: i.uniform("b", &[fan_out], bound) })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.g.param(self.w);
        let b = ctx.g.param(self.b);
        let y = ctx.g.matmul(x, w);
        ctx.g.add(y, b)
    }
}

/// 2-D convolution with bias; `x: [B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let fan_in = cin * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        init.scope(name, |i| Self {
            w: i.uniform("w", &[cout, cin, k, k], bound),
            b: i.constant("b", &[1, cout, 1, 1], 0.0),
            stride,
            pad,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.g.param(self.w);
        let b = ctx.g.param(self.b);
        let y = ctx.g.conv2d(x, w, self.stride, self.pad);
        ctx.g.add(y, b)
    }
}

const NORM_EPS: f64 = 1e-5;

/// Normalisation over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        init.scope(name, |i| Self { gamma: i.constant("gamma", &[dim], 1.0), beta: i.constant("beta", &[dim], 0.0) })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let axis = ctx.g.shape(x).len() - 1;
        let g = &mut ctx.g;
        let mean = g.mean_axis(x, axis);
        let centered = g.sub(x, mean);
        let sq = g.square(centered);
        let var = g.mean_axis(sq, axis);
        let var = g.add_scalar(var, NORM_EPS);
        let std = g.sqrt(var);
        let normed = g.div(centered, std);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul(normed, gamma);
        g.add(y, beta)
    }
}

/// Batch norm over the feature axis of `[B, L, d]` token sequences:
/// statistics are taken across every `(batch, position)` pair.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        init.scope(name, |i| Self {
            gamma: i.constant("gamma", &[dim], 1.0),
            beta: i.constant("beta", &[dim], 0.0),
            running_mean: i.buffer("running_mean", Tensor::zeros(&[dim])),
            running_var: i.buffer("running_var", Tensor::ones(&[dim])),
            momentum: 0.1,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let shape = ctx.g.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let g = &mut ctx.g;
        let flat = g.reshape(x, &[rows, d]);
        let (mean, var) = if ctx.train {
            let mean = g.mean_axis(flat, 0);
            let centered = g.sub(flat, mean);
            let sq = g.square(centered);
            let var = g.mean_axis(sq, 0);
            let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
            let m = self.momentum;
            let rm = g.param(self.running_mean);
            let rv = g.param(self.running_var);
            let (old_mean, old_var) = (g.value(rm).clone(), g.value(rv).clone());
            let new_mean = Tensor::from_fn(&[d], |j| (1.0 - m) * old_mean.data()[j] + m * g.value(mean).data()[j]);
            let new_var =
                Tensor::from_fn(&[d], |j| (1.0 - m) * old_var.data()[j] + m * unbias * g.value(var).data()[j]);
            ctx.bn_updates.push((self.running_mean, new_mean));
            ctx.bn_updates.push((self.running_var, new_var));
            (mean, var)
        } else {
            let m = g.param(self.running_mean);
            let v = g.param(self.running_var);
            (g.reshape(m, &[1, d]), g.reshape(v, &[1, d]))
        };
        let g = &mut ctx.g;
        let centered = g.sub(flat, mean);
        let var = g.add_scalar(var, NORM_EPS);
        let std = g.sqrt(var);
        let normed = g.div(centered, std);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul(normed, gamma);
        let y = g.add(y, beta);
        g.reshape(y, &shape)
    }
}

/// Multi-head scaled dot-product attention over `[B, L, d]` sequences.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        init.scope(name, |i| Self {
            q: Linear::new(i, "q", d, d),
            k: Linear::new(i, "k", d, d),
            v: Linear::new(i, "v", d, d),
            o: Linear::new(i, "o", d, d),
            heads,
        })
    }

    fn split_heads(&self, ctx: &mut Ctx, x: Var) -> Var {
        let s = ctx.g.shape(x).to_vec();
        let (b, l, d) = (s[0], s[1], s[2]);
        let r = ctx.g.reshape(x, &[b, l, self.heads, d / self.heads]);
        ctx.g.permute(r, &[0, 2, 1, 3])
    }

    pub fn forward(&self, ctx: &mut Ctx, query: Var, key: Var, value: Var) -> Var {
        let s = ctx.g.shape(query).to_vec();
        let (b, lq, d) = (s[0], s[1], s[2]);
        let q = self.q.forward(ctx, query);
        let k = self.k.forward(ctx, key);
        let v = self.v.forward(ctx, value);
        let (q, k, v) = (self.split_heads(ctx, q), self.split_heads(ctx, k), self.split_heads(ctx, v));
        let g = &mut ctx.g;
        let kt = g.transpose_last(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, 1.0 / ((d / self.heads) as f64).sqrt());
        let attn = g.softmax(scores, 3);
        let out = g.matmul(attn, v);
        let out = g.permute(out, &[0, 2, 1, 3]);
        let out = g.reshape(out, &[b, lq, d]);
        self.o.forward(ctx, out)
    }
}

/// Two-layer MLP with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, d: usize, hidden: usize) -> Self {
        init.scope(name, |i| Self { l1: Linear::new(i, "l1", d, hidden), l2: Linear::new(i, "l2", hidden, d) })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.l1.forward(ctx, x);
        let h = ctx.g.relu(h);
        self.l2.forward(ctx, h)
    }
}

/// Pre-norm transformer block with self-attention.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        init.scope(name, |i| Self {
            ln1: LayerNorm::new(i, "ln1", d),
            attn: MultiHeadAttention::new(i, "attn", d, heads),
            ln2: LayerNorm::new(i, "ln2", d),
            ff: FeedForward::new(i, "ff", d, 2 * d),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.ln1.forward(ctx, x);
        let a = self.attn.forward(ctx, h, h, h);
        let x = ctx.g.add(x, a);
        let h = self.ln2.forward(ctx, x);
        let f = self.ff.forward(ctx, h);
        ctx.g.add(x, f)
    }
}
