//! Parameter store, layer primitives and the Adam optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Arr, Graph, Val};

/// How a parameter tensor is filled by `init_all`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Truncated normal, resampled beyond two standard deviations.
    TruncNormal(f32),
}

/// Named, ordered collection of trainable tensors. Registration order is
/// the canonical order for initialization, optimizer state and checkpoints.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    inits: Vec<Init>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Arr::zeros(IxDyn(shape)));
        self.inits.push(init);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Fills every parameter from a single seeded stream, in registration
    /// order, so identical architectures and seeds yield identical weights.
    pub fn init_all(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (v, init) in self.values.iter_mut().zip(self.inits.iter()) {
            match init {
                Init::Zeros => v.fill(0.0),
                Init::Ones => v.fill(1.0),
                Init::TruncNormal(std) => {
                    let dist = Normal::new(0f32, *std).unwrap();
                    for x in v.iter_mut() {
                        loop {
                            let s = dist.sample(&mut rng);
                            if s.abs() <= 2.0 * std {
                                *x = s;
                                break;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: usize) -> &Arr {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Arr {
        &mut self.values[id]
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Activation selector for small MLPs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Act {
    Gelu,
    Relu,
    Tanh,
    None,
}

fn apply_act(g: &Graph, x: Val, act: Act) -> Val {
    match act {
        Act::Gelu => g.gelu(x),
        Act::Relu => g.relu(x),
        Act::Tanh => g.tanh(x),
        Act::None => x,
    }
}

/// Dense layer over the last axis; leading axes are flattened through.
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(st: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_init(st, name, in_dim, out_dim, Init::TruncNormal(0.02), true)
    }

    pub fn no_bias(st: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_init(st, name, in_dim, out_dim, Init::TruncNormal(0.02), false)
    }

    pub fn with_init(
        st: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        let w = st.register(&format!("{name}.w"), &[in_dim, out_dim], init);
        let b = bias.then(|| st.register(&format!("{name}.b"), &[out_dim], Init::Zeros));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &Graph, x: Val) -> Val {
        let shape = g.shape(x);
        let last = *shape.last().expect("linear input rank");
        assert_eq!(last, self.in_dim, "linear in_dim mismatch");
        let lead: usize = shape[..shape.len() - 1].iter().product();
        let x2 = if shape.len() == 2 { x } else { g.reshape(x, &[lead, last]) };
        let mut y = g.matmul(x2, g.param(self.w));
        if let Some(b) = self.b {
            y = g.add(y, g.param(b));
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out_shape = shape.clone();
            *out_shape.last_mut().unwrap() = self.out_dim;
            g.reshape(y, &out_shape)
        }
    }
}

/// Stack of dense layers with an activation between them (not after the
/// last). `dropout` applies after each hidden activation while training.
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Act,
    pub dropout: f32,
}

impl Mlp {
    pub fn new(st: &mut ParamStore, name: &str, dims: &[usize], act: Act, dropout: f32) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(st, &format!("{name}.l{i}"), w[0], w[1]))
            .collect();
        Mlp { layers, act, dropout }
    }

    /// Same topology but the final layer starts at exactly zero (weights
    /// and bias), used by the FGAT offset head.
    pub fn new_zero_final(st: &mut ParamStore, name: &str, dims: &[usize], act: Act) -> Self {
        assert!(dims.len() >= 2);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i == n - 1 { Init::Zeros } else { Init::TruncNormal(0.02) };
                Linear::with_init(st, &format!("{name}.l{i}"), w[0], w[1], init, true)
            })
            .collect();
        Mlp { layers, act, dropout: 0.0 }
    }

    pub fn forward(&self, g: &Graph, x: Val) -> Val {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h);
            if i + 1 < n {
                h = apply_act(g, h, self.act);
                h = g.dropout(h, self.dropout);
            }
        }
        h
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    pub g: usize,
    pub b: usize,
}

impl LayerNorm {
    pub fn new(st: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            g: st.register(&format!("{name}.g"), &[dim], Init::Ones),
            b: st.register(&format!("{name}.b"), &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, g: &Graph, x: Val) -> Val {
        g.layer_norm(x, g.param(self.g), g.param(self.b), 1e-5)
    }
}

/// Multi-head attention over unbatched token sets: queries `[nq, d]`,
/// keys/values `[nk, d]`. `mask` broadcasts to `[heads, nq, nk]` and marks
/// positions that may be attended; `bias` is added to the logits.
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Mha {
    /// Projections carry no biases so that fully-masked attention
    /// contributes exactly zero and residual paths pass through unchanged.
    pub fn new(st: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "dim must divide by heads");
        Mha {
            wq: Linear::no_bias(st, &format!("{name}.wq"), dim, dim),
            wk: Linear::no_bias(st, &format!("{name}.wk"), dim, dim),
            wv: Linear::no_bias(st, &format!("{name}.wv"), dim, dim),
            wo: Linear::no_bias(st, &format!("{name}.wo"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn forward(
        &self,
        g: &Graph,
        q: Val,
        kv: Val,
        mask: Option<Arc<ArrayD<bool>>>,
        bias: Option<Val>,
    ) -> Val {
        let qp = self.wq.forward(g, q);
        let kp = self.wk.forward(g, kv);
        let vp = self.wv.forward(g, kv);
        let ctx = attend(g, qp, kp, vp, self.heads, mask, bias);
        self.wo.forward(g, ctx)
    }
}

/// Scaled dot-product attention on already-projected `[n, d]` tensors,
/// splitting `d` into `heads`. Returns the concatenated head outputs
/// (no output projection).
pub fn attend(
    g: &Graph,
    qp: Val,
    kp: Val,
    vp: Val,
    heads: usize,
    mask: Option<Arc<ArrayD<bool>>>,
    bias: Option<Val>,
) -> Val {
    let (nq, d) = {
        let s = g.shape(qp);
        (s[0], s[1])
    };
    let nk = g.shape(kp)[0];
    let dh = d / heads;
    let split = |x: Val, n: usize| {
        let x = g.reshape(x, &[n, heads, dh]);
        g.permute(x, &[1, 0, 2])
    };
    let qh = split(qp, nq);
    let kh = split(kp, nk);
    let vh = split(vp, nk);
    let kt = g.permute(kh, &[0, 2, 1]);
    let mut scores = g.bmm(qh, kt);
    scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
    if let Some(b) = bias {
        scores = g.add(scores, b);
    }
    let attn = g.softmax_masked(scores, mask);
    let ctx = g.bmm(attn, vh);
    let ctx = g.permute(ctx, &[1, 0, 2]);
    g.reshape(ctx, &[nq, d])
}

/// Batched attention over `[b, n, d]` projected tensors (one independent
/// attention per leading batch entry, e.g. per window). `bias` broadcasts
/// against `[b, heads, nq, nk]` logits, as does `mask`.
pub fn attend_batched(
    g: &Graph,
    qp: Val,
    kp: Val,
    vp: Val,
    heads: usize,
    mask: Option<Arc<ArrayD<bool>>>,
    bias: Option<Val>,
) -> Val {
    let (b, nq, d) = {
        let s = g.shape(qp);
        (s[0], s[1], s[2])
    };
    let nk = g.shape(kp)[1];
    let dh = d / heads;
    let split = |x: Val, n: usize| {
        let x = g.reshape(x, &[b, n, heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * heads, n, dh])
    };
    let qh = split(qp, nq);
    let kh = split(kp, nk);
    let vh = split(vp, nk);
    let kt = g.permute(kh, &[0, 2, 1]);
    let scores = g.bmm(qh, kt);
    let mut scores = g.reshape(g.scale(scores, 1.0 / (dh as f32).sqrt()), &[b, heads, nq, nk]);
    if let Some(bv) = bias {
        scores = g.add(scores, bv);
    }
    let attn = g.softmax_masked(scores, mask);
    let attn = g.reshape(attn, &[b * heads, nq, nk]);
    let ctx = g.bmm(attn, vh);
    let ctx = g.reshape(ctx, &[b, heads, nq, dh]);
    let ctx = g.permute(ctx, &[0, 2, 1, 3]);
    g.reshape(ctx, &[b, nq, d])
}

/// Odd-kernel same-padding convolution over `[h, w, c]` maps.
pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new(st: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel");
        // He fan-in scaling: a chain of convs with a fixed small std would
        // shrink activations geometrically and underflow the decoder heads.
        let std = (2.0 / (k * k * cin) as f32).sqrt();
        Conv2d {
            w: st.register(&format!("{name}.w"), &[k, k, cin, cout], Init::TruncNormal(std)),
            b: st.register(&format!("{name}.b"), &[cout], Init::Zeros),
            cin,
            cout,
        }
    }

    pub fn forward(&self, g: &Graph, x: Val) -> Val {
        g.conv2d(x, g.param(self.w), g.param(self.b))
    }
}

/// Single-layer LSTM scanned over the time axis of `[n, t, in]` inputs.
pub struct Lstm {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b: usize,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(st: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Self {
        Lstm {
            w_ih: st.register(&format!("{name}.w_ih"), &[in_dim, 4 * hidden], Init::TruncNormal(0.02)),
            w_hh: st.register(&format!("{name}.w_hh"), &[hidden, 4 * hidden], Init::TruncNormal(0.02)),
            b: st.register(&format!("{name}.b"), &[4 * hidden], Init::Zeros),
            in_dim,
            hidden,
        }
    }

    /// Runs the scan and returns the final hidden state `[n, hidden]`.
    pub fn forward_last(&self, g: &Graph, x: Val) -> Val {
        let shape = g.shape(x);
        assert_eq!(shape.len(), 3, "lstm wants [n, t, in]");
        let (n, t) = (shape[0], shape[1]);
        let hdim = self.hidden;
        let mut h = g.input(Arr::zeros(IxDyn(&[n, hdim])), "lstm.h0");
        let mut c = g.input(Arr::zeros(IxDyn(&[n, hdim])), "lstm.c0");
        for step in 0..t {
            let xt = g.narrow(x, 1, step, 1);
            let xt = g.reshape(xt, &[n, self.in_dim]);
            let z = g.add(
                g.add(g.matmul(xt, g.param(self.w_ih)), g.matmul(h, g.param(self.w_hh))),
                g.param(self.b),
            );
            let i = g.sigmoid(g.narrow(z, 1, 0, hdim));
            let f = g.sigmoid(g.narrow(z, 1, hdim, hdim));
            let gg = g.tanh(g.narrow(z, 1, 2 * hdim, hdim));
            let o = g.sigmoid(g.narrow(z, 1, 3 * hdim, hdim));
            c = g.add(g.mul(f, c), g.mul(i, gg));
            h = g.mul(o, g.tanh(c));
        }
        h
    }
}

/// One GRU cell (torch gate layout: reset, update, candidate).
pub struct GruCell {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b_ih: usize,
    pub b_hh: usize,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(st: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Self {
        GruCell {
            w_ih: st.register(&format!("{name}.w_ih"), &[in_dim, 3 * hidden], Init::TruncNormal(0.02)),
            w_hh: st.register(&format!("{name}.w_hh"), &[hidden, 3 * hidden], Init::TruncNormal(0.02)),
            b_ih: st.register(&format!("{name}.b_ih"), &[3 * hidden], Init::Zeros),
            b_hh: st.register(&format!("{name}.b_hh"), &[3 * hidden], Init::Zeros),
            in_dim,
            hidden,
        }
    }

    /// `x [n, in]`, `h [n, hidden]` -> next hidden `[n, hidden]`.
    pub fn step(&self, g: &Graph, x: Val, h: Val) -> Val {
        let hd = self.hidden;
        let gi = g.add(g.matmul(x, g.param(self.w_ih)), g.param(self.b_ih));
        let gh = g.add(g.matmul(h, g.param(self.w_hh)), g.param(self.b_hh));
        let r = g.sigmoid(g.add(g.narrow(gi, 1, 0, hd), g.narrow(gh, 1, 0, hd)));
        let z = g.sigmoid(g.add(g.narrow(gi, 1, hd, hd), g.narrow(gh, 1, hd, hd)));
        let n = g.tanh(g.add(
            g.narrow(gi, 1, 2 * hd, hd),
            g.mul(r, g.narrow(gh, 1, 2 * hd, hd)),
        ));
        // h' = (1 - z) * n + z * h
        let zn = g.mul(z, n);
        g.add(g.sub(n, zn), g.mul(z, h))
    }
}

/// Adam with global-norm gradient clipping and bias correction.
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip: f32,
    pub t: u64,
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
}

impl Adam {
    pub fn new(store: &ParamStore, clip: f32) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            m: (0..store.len()).map(|i| Arr::zeros(store.value(i).raw_dim())).collect(),
            v: (0..store.len()).map(|i| Arr::zeros(store.value(i).raw_dim())).collect(),
        }
    }

    /// Applies one update. `grads` aligns with the store; `None` entries
    /// (parameters unused by the batch) are treated as zero gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Arr>], lr: f32) -> f32 {
        assert_eq!(grads.len(), store.len());
        let mut sq = 0f64;
        for gopt in grads.iter().flatten() {
            sq += gopt.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
        }
        let norm = sq.sqrt() as f32;
        let scale = if norm > self.clip && norm > 0.0 { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, gopt) in grads.iter().enumerate() {
            let Some(gr) = gopt else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            let theta = store.value_mut(id);
            for ((mi, vi), (ti, &gi)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(theta.iter_mut().zip(gr.iter()))
            {
                let gs = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gs;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gs * gs;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *ti -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}
