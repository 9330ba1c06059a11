//! Layers built from tape ops: linear, temporal conv, group norm,
//! multi-head attention, feed-forward, and sinusoidal encodings.
//!
//! A layer struct holds its parameter names and hyperparameters; `init`
//! registers tensors in a [`ParamStore`] and `forward` replays the layer
//! on a [`Graph`] through a [`Binding`].

use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{Init, ParamStore};
use crate::nn::params::Binding;

/// Fully connected layer on the trailing axis.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear { name: name.into(), in_dim, out_dim }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.init_with(store, rng, Init::FanIn(self.in_dim));
    }

    /// Init with an explicit weight scheme (zero for residual outputs).
    pub fn init_with(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, init: Init) {
        store.create(&format!("{}.w", self.name), &[self.in_dim, self.out_dim], init, rng);
        store.create(&format!("{}.b", self.name), &[self.out_dim], Init::Zero, rng);
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        debug_assert_eq!(*shape.last().expect("non-scalar"), self.in_dim, "{}", self.name);
        let n: usize = shape[..shape.len() - 1].iter().product();
        let flat = g.reshape(x, &[n, self.in_dim]);
        let w = bind.var(&format!("{}.w", self.name));
        let b = bind.var(&format!("{}.b", self.name));
        let y = g.matmul(flat, w);
        let y = g.add(y, b);
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(self.out_dim);
        g.reshape(y, &out_shape)
    }
}

/// Kernel-3 temporal convolution over axis 1 of `(N, T, C)`, zero padded,
/// optionally strided. Joint tokens are folded into `N`, so weights are
/// shared across joints.
#[derive(Debug, Clone)]
pub struct Conv1d {
    proj: Linear,
    pub stride: usize,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Conv1d { proj: Linear::new(name, 3 * in_ch, out_ch), stride }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.proj.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Var {
        let t = g.value(x).shape()[1];
        let padded = g.pad_axis(x, 1, 1, 1);
        let tap0 = g.narrow(padded, 1, 0, t);
        let tap1 = g.narrow(padded, 1, 1, t);
        let tap2 = g.narrow(padded, 1, 2, t);
        let stacked = g.concat(2, &[tap0, tap1, tap2]);
        let y = self.proj.forward(g, bind, stacked);
        if self.stride > 1 {
            g.stride_axis(y, 1, self.stride)
        } else {
            y
        }
    }
}

/// Group normalization over the channel (last) axis, statistics pooled
/// over all middle axes, without a learned affine (FiLM supplies one).
pub fn group_norm(g: &mut Graph, x: Var, groups: usize, eps: f64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let c = *shape.last().expect("channels");
    assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
    let mut grouped = shape[..shape.len() - 1].to_vec();
    grouped.push(groups);
    grouped.push(c / groups);
    let xg = g.reshape(x, &grouped);
    // normalize per (batch, group): all axes except 0 and the group axis
    let axes: Vec<usize> = (1..grouped.len()).filter(|&ax| ax != grouped.len() - 2).collect();
    let mu = g.mean_axes(xg, &axes);
    let centered = g.sub(xg, mu);
    let sq = g.mul(centered, centered);
    let var = g.mean_axes(sq, &axes);
    let var_eps = g.add_scalar(var, eps);
    let rstd = g.powf(var_eps, -0.5);
    let normed = g.mul(centered, rstd);
    g.reshape(normed, &shape)
}

/// Multi-head attention with separate query and key/value sources.
///
/// The value path deliberately has no positional information: callers add
/// positional encodings to `q_src`/`k_src` only. The output projection is
/// zero-initialized so a fresh layer is a residual no-op.
#[derive(Debug, Clone)]
pub struct MultiHeadAttn {
    pub heads: usize,
    pub dim: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl MultiHeadAttn {
    pub fn new(name: &str, dim: usize, kv_dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "dim {dim} not divisible by {heads} heads");
        MultiHeadAttn {
            heads,
            dim,
            wq: Linear::new(format!("{name}.q"), dim, dim),
            wk: Linear::new(format!("{name}.k"), kv_dim, dim),
            wv: Linear::new(format!("{name}.v"), kv_dim, dim),
            wo: Linear::new(format!("{name}.o"), dim, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.wq.init(store, rng);
        self.wk.init(store, rng);
        self.wv.init(store, rng);
        self.wo.init_with(store, rng, Init::Zero);
    }

    /// `q_src` is `(N, Tq, dim)`, `k_src`/`v_src` are `(N, Tk, kv_dim)`;
    /// `mask` is an additive `(Tq, Tk)` bias broadcast over batch and heads.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        q_src: Var,
        k_src: Var,
        v_src: Var,
        mask: Option<&ArrayD<f64>>,
    ) -> Var {
        let (n, tq) = {
            let s = g.value(q_src).shape();
            (s[0], s[1])
        };
        let tk = g.value(k_src).shape()[1];
        let (h, d) = (self.heads, self.dim / self.heads);

        let q = self.wq.forward(g, bind, q_src);
        let k = self.wk.forward(g, bind, k_src);
        let v = self.wv.forward(g, bind, v_src);

        let split = |g: &mut Graph, x: Var, t: usize| {
            let r = g.reshape(x, &[n, t, h, d]);
            g.permute(r, &[0, 2, 1, 3])
        };
        let q = split(g, q, tq);
        let k = split(g, k, tk);
        let v = split(g, v, tk);

        let kt = g.permute(k, &[0, 1, 3, 2]);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_masked(scores, mask);
        let ctx = g.matmul(attn, v);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[n, tq, self.dim]);
        self.wo.forward(g, bind, ctx)
    }
}

/// Two-layer feed-forward with SiLU, zero-initialized output.
#[derive(Debug, Clone)]
pub struct FeedForward {
    lin1: Linear,
    lin2: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            lin1: Linear::new(format!("{name}.ff1"), dim, hidden),
            lin2: Linear::new(format!("{name}.ff2"), hidden, dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.lin1.init(store, rng);
        self.lin2.init_with(store, rng, Init::Zero);
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Var {
        let h = self.lin1.forward(g, bind, x);
        let h = g.silu(h);
        self.lin2.forward(g, bind, h)
    }
}

/// Fixed sinusoidal encodings for arbitrary (possibly fractional)
/// positions: `sin` on even channels, `cos` on odd ones.
pub fn sinusoidal_encoding(positions: &[f64], dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((positions.len(), dim));
    for (i, &pos) in positions.iter().enumerate() {
        for j in 0..dim / 2 {
            let omega = 1.0 / 10000f64.powf(2.0 * j as f64 / dim as f64);
            pe[[i, 2 * j]] = (pos * omega).sin();
            pe[[i, 2 * j + 1]] = (pos * omega).cos();
        }
        if dim % 2 == 1 {
            let omega = 1.0 / 10000f64.powf((dim - 1) as f64 / dim as f64);
            pe[[i, dim - 1]] = (pos * omega).sin();
        }
    }
    pe
}

/// Sinusoidal embedding of a batch of diffusion timesteps.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> ArrayD<f64> {
    let pos: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    sinusoidal_encoding(&pos, dim).into_dyn()
}
