//! Transformer building blocks on top of the autodiff graph.
//!
//! Each layer holds only parameter handles; values live in a [`ParamStore`].
//! The `*_row` methods evaluate a layer on a single row without a graph and
//! back the cached decoder.

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{Init, ParamId, ParamStore, Session};

pub const LN_EPS: f64 = 1e-5;

/// Fill value for disallowed attention scores; finite so every forward value
/// stays finite, and low enough that `exp` underflows to exactly zero.
pub const MASK_FILL: f64 = -1e30;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    pub dropout_rate: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            model_dim: 256,
            heads: 4,
            ff_dim: 2048,
            blocks: 6,
            dropout_rate: 0.0,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidConfig("layer sizes must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Boolean `[query_len × key_len]` matrix; `true` means the query may attend
/// to the key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub query_len: usize,
    pub key_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(query_len: usize, key_len: usize) -> Self {
        Self {
            query_len,
            key_len,
            allowed: vec![true; query_len * key_len],
        }
    }

    /// Lower-triangular mask over a sequence of length `n`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n * n).map(|i| i % n <= i / n).collect();
        Self {
            query_len: n,
            key_len: n,
            allowed,
        }
    }

    pub fn from_fn(query_len: usize, key_len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..query_len * key_len)
            .map(|i| f(i / key_len, i % key_len))
            .collect();
        Self {
            query_len,
            key_len,
            allowed,
        }
    }

    pub fn is_allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.key_len + k]
    }

    fn fill_mask(&self) -> Option<Vec<bool>> {
        if self.allowed.iter().all(|a| *a) {
            None
        } else {
            Some(self.allowed.iter().map(|a| !a).collect())
        }
    }
}

/// Scaled dot-product attention split over `heads`, without projections.
/// Returns the output `[Lq × d]` and the per-head weight matrices.
pub fn scaled_dot_attention(
    s: &mut Session,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (qs, ks, vs) = (
        s.graph.shape(q).to_vec(),
        s.graph.shape(k).to_vec(),
        s.graph.shape(v).to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks != vs {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    if mask.query_len != qs[0] || mask.key_len != ks[0] {
        return Err(Error::ShapeMismatch {
            op: "attention mask",
            lhs: vec![mask.query_len, mask.key_len],
            rhs: vec![qs[0], ks[0]],
        });
    }
    let d = qs[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidConfig(format!("{d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let fill = mask.fill_mask();
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                s.graph.slice(q, 1, h * dh, (h + 1) * dh)?,
                s.graph.slice(k, 1, h * dh, (h + 1) * dh)?,
                s.graph.slice(v, 1, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = s.graph.transpose(kh)?;
        let scores = s.graph.matmul(qh, kt)?;
        let mut scores = s.graph.scale(scores, 1.0 / (dh as f64).sqrt())?;
        if let Some(m) = &fill {
            scores = s.graph.masked_fill(scores, m.clone(), MASK_FILL)?;
        }
        let w = s.graph.softmax(scores)?;
        outputs.push(s.graph.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 {
        outputs[0]
    } else {
        s.graph.concat(&outputs, 1)?
    };
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_gain(store, init, name, in_dim, out_dim, 1.0)
    }

    /// Glorot weights multiplied by `gain`.
    pub fn with_gain(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize, gain: f64) -> Self {
        let mut w = init.glorot(in_dim, out_dim);
        w.data_mut().iter_mut().for_each(|v| *v *= gain);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), init.zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul(x, w)?;
        s.graph.add(y, b)
    }

    pub fn forward_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut y = kernels::vecmat(x, store.data(self.weight), self.out_dim);
        for (v, b) in y.iter_mut().zip(store.data(self.bias)) {
            *v += b;
        }
        y
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), init.ones(&[dim])),
            beta: store.add(format!("{name}.beta"), init.zeros(&[dim])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm(x, g, b, LN_EPS)
    }

    pub fn forward_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        kernels::layer_norm_row(x, store.data(self.gamma), store.data(self.beta), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, rows: usize, dim: usize) -> Self {
        Self {
            table: store.add(format!("{name}.table"), init.normal(&[rows, dim], 1.0)),
            rows,
            dim,
        }
    }

    pub fn forward(&self, s: &mut Session, ids: &[usize]) -> Result<Var> {
        let t = s.param(self.table);
        s.graph.embedding(t, ids)
    }

    pub fn row<'a>(&self, store: &'a ParamStore, id: usize) -> &'a [f64] {
        &store.data(self.table)[id * self.dim..(id + 1) * self.dim]
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, ff_dim: usize) -> Self {
        Self {
            inner: Linear::new(store, init, &format!("{name}.inner"), dim, ff_dim),
            outer: Linear::new(store, init, &format!("{name}.outer"), ff_dim, dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, dropout: f64) -> Result<Var> {
        let h = self.inner.forward(s, x)?;
        let h = s.graph.relu(h)?;
        let h = s.dropout(h, dropout)?;
        self.outer.forward(s, h)
    }

    pub fn forward_row(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = self.inner.forward_row(store, x);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        self.outer.forward_row(store, &h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: Linear::new(store, init, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, init, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, init, &format!("{name}.value"), dim, dim),
            output: Linear::new(store, init, &format!("{name}.output"), dim, dim),
            heads,
        }
    }

    /// Self-attention over the rows of `x`.
    pub fn forward(&self, s: &mut Session, x: Var, mask: &AttentionMask) -> Result<Var> {
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, x)?;
        let v = self.value.forward(s, x)?;
        let (ctx, _) = scaled_dot_attention(s, q, k, v, mask, self.heads)?;
        self.output.forward(s, ctx)
    }
}

/// Conformer-style convolution module: depthwise conv, ReLU, pointwise
/// projection.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: Linear,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, kernel: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, init, &format!("{name}.norm"), dim),
            depthwise: store.add(
                format!("{name}.depthwise.weight"),
                init.glorot_shaped(&[kernel, dim], kernel, kernel),
            ),
            depthwise_bias: store.add(format!("{name}.depthwise.bias"), init.zeros(&[dim])),
            pointwise: Linear::new(store, init, &format!("{name}.pointwise"), dim, dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.norm.forward(s, x)?;
        let w = s.param(self.depthwise);
        let b = s.param(self.depthwise_bias);
        let h = s.graph.depthwise_conv1d(h, w)?;
        let h = s.graph.add(h, b)?;
        let h = s.graph.relu(h)?;
        self.pointwise.forward(s, h)
    }
}

/// Pre-norm transformer block with an optional convolution module.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub conv: Option<ConvModule>,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cfg: &LayerConfig,
        conv_kernel: Option<usize>,
    ) -> Self {
        let d = cfg.model_dim;
        Self {
            attn_norm: LayerNorm::new(store, init, &format!("{name}.attn_norm"), d),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), d, cfg.heads),
            conv: conv_kernel.map(|k| ConvModule::new(store, init, &format!("{name}.conv"), d, k)),
            ff_norm: LayerNorm::new(store, init, &format!("{name}.ff_norm"), d),
            ff: FeedForward::new(store, init, &format!("{name}.ff"), d, cfg.ff_dim),
            dropout: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, mask: &AttentionMask) -> Result<Var> {
        let h = self.attn_norm.forward(s, x)?;
        let a = self.attn.forward(s, h, mask)?;
        let a = s.dropout(a, self.dropout)?;
        let mut x = s.graph.add(x, a)?;
        if let Some(conv) = &self.conv {
            let c = conv.forward(s, x)?;
            let c = s.dropout(c, self.dropout)?;
            x = s.graph.add(x, c)?;
        }
        let h = self.ff_norm.forward(s, x)?;
        let f = self.ff.forward(s, h, self.dropout)?;
        let f = s.dropout(f, self.dropout)?;
        s.graph.add(x, f)
    }
}

/// Stack of kernel-2 stride-2 convolutions with ReLU; reduces the frame rate
/// by `rate` so that `T' = ⌊T / rate⌋`.
#[derive(Clone, Debug)]
pub struct ConvSubsample {
    pub layers: Vec<(ParamId, ParamId)>,
    pub rate: usize,
}

impl ConvSubsample {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, in_dim: usize, out_dim: usize, rate: usize) -> Result<Self> {
        if !matches!(rate, 2 | 4) {
            return Err(Error::InvalidConfig(format!("subsampling rate must be 2 or 4, got {rate}")));
        }
        let n_layers = rate.trailing_zeros() as usize;
        let mut layers = Vec::with_capacity(n_layers);
        let mut cin = in_dim;
        for i in 0..n_layers {
            let w = store.add(
                format!("{name}.conv{i}.weight"),
                init.glorot_shaped(&[2, cin, out_dim], 2 * cin, out_dim),
            );
            let b = store.add(format!("{name}.conv{i}.bias"), init.zeros(&[out_dim]));
            layers.push((w, b));
            cin = out_dim;
        }
        Ok(Self { layers, rate })
    }

    pub fn output_len(&self, frames: usize) -> usize {
        frames / self.rate
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let t = s.graph.shape(x)[0];
        if t < self.rate {
            return Err(Error::InputTooShort {
                what: "conv_subsample",
                len: t,
                field: self.rate,
            });
        }
        let mut h = x;
        for &(w, b) in &self.layers {
            let wv = s.param(w);
            let bv = s.param(b);
            h = s.graph.conv1d(h, wv, 2)?;
            h = s.graph.add(h, bv)?;
            h = s.graph.relu(h)?;
        }
        Ok(h)
    }
}

/// Sinusoidal encoding: `PE[t, 2i] = sin(t / 10000^{2i/d})`, `PE[t, 2i+1] = cos(·)`.
pub fn positional_encoding(length: usize, model_dim: usize) -> Tensor {
    let mut data = vec![0.0; length * model_dim];
    for t in 0..length {
        positional_row_into(t, model_dim, &mut data[t * model_dim..(t + 1) * model_dim]);
    }
    Tensor::from_parts(vec![length, model_dim], data)
}

pub fn positional_row(position: usize, model_dim: usize) -> Vec<f64> {
    let mut row = vec![0.0; model_dim];
    positional_row_into(position, model_dim, &mut row);
    row
}

fn positional_row_into(position: usize, model_dim: usize, row: &mut [f64]) {
    for (j, v) in row.iter_mut().enumerate() {
        let pair = (j / 2) as f64;
        let angle = position as f64 / 10000f64.powf(2.0 * pair / model_dim as f64);
        *v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
    }
}
