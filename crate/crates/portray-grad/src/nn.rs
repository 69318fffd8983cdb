//! Parameter storage and the small set of layers the models are built from.
//!
//! A [`ParamStore`] owns named tensors in insertion order (the order is the
//! checkpoint/optimizer layout). Models hold [`ParamId`]s; per forward pass
//! they bind the store into a graph with [`ParamStore::bind`], which turns
//! every parameter into a leaf `Var`.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name: {}",
            name
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Register every parameter as a graph leaf, in store order.
    pub fn bind(&self, g: &Graph) -> Bound {
        let vars = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        Bound { vars }
    }

    /// Register parameters as constants: no gradients flow to them. Used for
    /// frozen feature stacks.
    pub fn bind_frozen(&self, g: &Graph) -> Bound {
        let vars = self.tensors.iter().map(|t| g.input(t.clone())).collect();
        Bound { vars }
    }

    /// Collect per-parameter gradients from a backward pass over a graph the
    /// store was bound into. Missing gradients come back as zeros.
    pub fn gather_grads(&self, bound: &Bound, grads: &mut [Option<Tensor>]) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .enumerate()
            .map(|(i, v)| {
                grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.tensors[i].shape()))
            })
            .collect()
    }
}

/// Parameters bound into one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform Kaiming-style init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn kaiming<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId, // [in, out]
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), kaiming(&[d_in, d_out], d_in, rng));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b: Some(b) }
    }

    /// All-zero weights and bias; used where the contract requires the layer
    /// to start as an exact no-op.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(&[d_in, d_out]));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b: Some(b) }
    }

    /// x: [T, in] (or [in] after reshape by caller) -> [T, out]
    pub fn apply(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w), false, false);
        match self.b {
            Some(b) => g.add(y, p.var(b)),
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId, // [out, in, k, k]
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            kaiming(&[c_out, c_in, k, k], c_in * k * k, rng),
        );
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, stride, pad }
    }

    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(&[c_out, c_in, k, k]));
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self { w, b, stride, pad }
    }

    pub fn apply(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

/// Multi-head attention. Query tokens `[Tq, C]`, key/value tokens `[Tk, C]`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(width % heads, 0);
        Self {
            wq: Linear::new(store, rng, &format!("{name}.q"), width, width),
            wk: Linear::new(store, rng, &format!("{name}.k"), width, width),
            wv: Linear::new(store, rng, &format!("{name}.v"), width, width),
            wo: Linear::new(store, rng, &format!("{name}.o"), width, width),
            heads,
            width,
        }
    }

    pub fn apply(&self, g: &Graph, p: &Bound, q_tokens: Var, kv_tokens: Var) -> Var {
        let tq = g.shape(q_tokens)[0];
        let tk = g.shape(kv_tokens)[0];
        let dh = self.width / self.heads;
        let split = |v: Var, t: usize| {
            let r = g.reshape(v, &[t, self.heads, dh]);
            g.permute(r, &[1, 0, 2]) // [heads, T, dh]
        };
        let q = split(self.wq.apply(g, p, q_tokens), tq);
        let k = split(self.wk.apply(g, p, kv_tokens), tk);
        let v = split(self.wv.apply(g, p, kv_tokens), tk);
        let scores = g.mul_scalar(g.matmul(q, k, false, true), 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_axis(scores, 2);
        let ctx = g.matmul(attn, v, false, false); // [heads, Tq, dh]
        let merged = g.reshape(g.permute(ctx, &[1, 0, 2]), &[tq, self.width]);
        self.wo.apply(g, p, merged)
    }
}

/// Adaptive layer norm: LN(x) * (1 + scale) + shift, with scale/shift coming
/// from a conditioning vector through a linear layer.
#[derive(Debug, Clone)]
pub struct AdaLayerNorm {
    pub proj: Linear, // cond [1, Dc] -> [1, 2*C]
    pub width: usize,
}

impl AdaLayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, cond_dim: usize, width: usize) -> Self {
        // Zero-init keeps the modulation neutral at the start of training.
        Self { proj: Linear::zeros(store, &format!("{name}.mod"), cond_dim, 2 * width), width }
    }

    /// x: [T, C], cond: [1, Dc]
    pub fn apply(&self, g: &Graph, p: &Bound, x: Var, cond: Var) -> Var {
        let m = self.proj.apply(g, p, cond); // [1, 2C]
        let scale = g.slice(m, 1, 0, self.width);
        let shift = g.slice(m, 1, self.width, self.width);
        let normed = g.layer_norm(x);
        let scaled = g.mul(normed, g.add_scalar(scale, 1.0));
        g.add(scaled, shift)
    }
}

/// Two-layer feed-forward with SiLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Self {
        Self {
            lin1: Linear::new(store, rng, &format!("{name}.ff1"), width, hidden),
            lin2: Linear::new(store, rng, &format!("{name}.ff2"), hidden, width),
        }
    }

    pub fn apply(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        self.lin2.apply(g, p, g.silu(self.lin1.apply(g, p, x)))
    }
}

/// Sinusoidal embedding of a scalar (timestep) into `dim` features.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        data[i] = (t * freq).sin();
        data[half + i] = (t * freq).cos();
    }
    Tensor::new(&[1, dim], data)
}

/// Sinusoidal positional encoding for `len` positions starting at `start`.
pub fn positional_encoding(start: usize, len: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        let pos = (start + p) as f64;
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            data[p * dim + i] = (pos * freq).sin();
            data[p * dim + half + i] = (pos * freq).cos();
        }
    }
    Tensor::new(&[len, dim], data)
}
