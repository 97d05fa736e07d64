//! Reusable neural blocks: multi-head attention (self / cross / causal),
//! feed-forward nets, patch embedding, and the 2x upsampling convolution
//! used by the mask decoder.
//!
//! Parameters live in a [`ParamStore`] (named flat arrays). A forward
//! pass binds the store onto a fresh tape ([`ParamStore::bind`]) and the
//! blocks reference their parameters through the binding, so blocks stay
//! immutable and forwards are pure given (input, weights).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Additive value for masked attention logits. Finite (keeps the
/// no-NaN/Inf forward invariant) yet exp-underflows to exactly 0.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: TensorId) -> TensorId {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation '{}'", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }
}

// ── Parameter store ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Named flat parameter arrays; the single owner of model weights.
#[derive(Default)]
pub struct ParamStore {
    meta: Vec<ParamMeta>,
    values: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param data must match shape");
        self.meta.push(ParamMeta {
            name: name.into(),
            shape,
            trainable: true,
        });
        self.values.push(data);
        ParamId(self.meta.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id.0]
    }

    pub fn metas(&self) -> &[ParamMeta] {
        &self.meta
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    pub fn iter_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.meta.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.meta.iter().position(|m| m.name == name).map(ParamId)
    }

    /// Mark every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for m in &mut self.meta {
            if m.name.starts_with(prefix) {
                m.trainable = trainable;
            }
        }
    }

    pub fn trainable_flags(&self) -> Vec<bool> {
        self.meta.iter().map(|m| m.trainable).collect()
    }

    /// Zero every parameter under a name prefix (used by identity tests).
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (m, v) in self.meta.iter().zip(self.values.iter_mut()) {
            if m.name.starts_with(prefix) {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Register every parameter as a leaf on `tape`, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let ids = self
            .values
            .iter()
            .zip(&self.meta)
            .map(|(v, m)| {
                tape.leaf_from(m.shape.clone(), v.clone())
                    .expect("stored shape consistent")
            })
            .collect();
        Binding { ids }
    }
}

/// Tape handles for one bound forward pass, indexed by [`ParamId`].
pub struct Binding {
    ids: Vec<TensorId>,
}

impl Binding {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

// ── Weight init ─────────────────────────────────────────────────────

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) linear weight.
pub fn init_linear(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect()
}

pub fn init_table(rng: &mut impl Rng, rows: usize, dim: usize) -> Vec<f64> {
    let bound = 1.0 / (dim as f64).sqrt();
    (0..rows * dim).map(|_| rng.gen_range(-bound..bound)).collect()
}

// ── Layer norm parameters ───────────────────────────────────────────

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), vec![dim], vec![1.0; dim]),
            bias: store.add(format!("{name}.bias"), vec![dim], vec![0.0; dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        tape.layer_norm(x, bind.id(self.gain), bind.id(self.bias), LN_EPS)
    }
}

// ── Multi-head attention ────────────────────────────────────────────

/// Scaled dot-product attention with per-head column splits. Queries come
/// from one stream, keys/values from another (equal for self-attention).
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub dim: usize,
    pub heads: usize,
    pub causal: bool,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bq: ParamId,
    bk: ParamId,
    bv: ParamId,
    bo: ParamId,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention '{}': dim {} not divisible by heads {}",
                name, dim, heads
            )));
        }
        let mut proj = |store: &mut ParamStore, suffix: &str| {
            store.add(
                format!("{name}.{suffix}"),
                vec![dim, dim],
                init_linear(rng, dim, dim),
            )
        };
        let wq = proj(store, "wq");
        let wk = proj(store, "wk");
        let wv = proj(store, "wv");
        let wo = proj(store, "wo");
        let zero = |store: &mut ParamStore, suffix: &str| {
            store.add(format!("{name}.{suffix}"), vec![dim], vec![0.0; dim])
        };
        Ok(AttentionBlock {
            dim,
            heads,
            causal,
            wq,
            wk,
            wv,
            wo,
            bq: zero(store, "bq"),
            bk: zero(store, "bk"),
            bv: zero(store, "bv"),
            bo: zero(store, "bo"),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        q_src: TensorId,
        kv_src: TensorId,
    ) -> Result<TensorId> {
        let lq = tape.shape(q_src)[0];
        let lk = tape.shape(kv_src)[0];
        if tape.shape(q_src)[1] != self.dim || tape.shape(kv_src)[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "attn",
                lhs: tape.shape(q_src).to_vec(),
                rhs: vec![self.dim],
            });
        }
        if self.causal && lq != lk {
            return Err(Error::InvalidInput(
                "causal attention requires equal query/key lengths".into(),
            ));
        }

        let q = tape.matmul(q_src, bind.id(self.wq))?;
        let q = tape.add_row(q, bind.id(self.bq))?;
        let k = tape.matmul(kv_src, bind.id(self.wk))?;
        let k = tape.add_row(k, bind.id(self.bk))?;
        let v = tape.matmul(kv_src, bind.id(self.wv))?;
        let v = tape.add_row(v, bind.id(self.bv))?;

        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = if self.causal {
            let mut m = vec![0.0; lq * lk];
            for i in 0..lq {
                for j in (i + 1)..lk {
                    m[i * lk + j] = MASK_NEG;
                }
            }
            Some(tape.leaf_from(vec![lq, lk], m)?)
        } else {
            None
        };

        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let scores = match mask {
                Some(m) => tape.add(scores, m)?,
                None => scores,
            };
            let attn = tape.softmax(scores, 1)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&head_outs)?;
        let out = tape.matmul(cat, bind.id(self.wo))?;
        tape.add_row(out, bind.id(self.bo))
    }
}

// ── Feed-forward ────────────────────────────────────────────────────

/// `W2 . act(W1 . x + b1) + b2`, same output shape as input.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub dim: usize,
    pub hidden: usize,
    pub act: Activation,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
    ) -> Self {
        FeedForward {
            dim,
            hidden,
            act,
            w1: store.add(format!("{name}.w1"), vec![dim, hidden], init_linear(rng, dim, hidden)),
            b1: store.add(format!("{name}.b1"), vec![hidden], vec![0.0; hidden]),
            w2: store.add(format!("{name}.w2"), vec![hidden, dim], init_linear(rng, hidden, dim)),
            b2: store.add(format!("{name}.b2"), vec![dim], vec![0.0; dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        if tape.shape(x)[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "feed_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.dim],
            });
        }
        let h = tape.matmul(x, bind.id(self.w1))?;
        let h = tape.add_row(h, bind.id(self.b1))?;
        let h = self.act.apply(tape, h);
        let o = tape.matmul(h, bind.id(self.w2))?;
        tape.add_row(o, bind.id(self.b2))
    }
}

// ── Two-layer MLP head ──────────────────────────────────────────────

/// `in -> hidden -> out` projection head (decoder hyper-weight / bbox).
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub out_dim: usize,
    act: Activation,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl MlpHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        act: Activation,
    ) -> Self {
        MlpHead {
            out_dim,
            act,
            w1: store.add(format!("{name}.w1"), vec![in_dim, hidden], init_linear(rng, in_dim, hidden)),
            // small positive start keeps narrow ReLU hidden layers alive
            b1: store.add(format!("{name}.b1"), vec![hidden], vec![0.01; hidden]),
            w2: store.add(format!("{name}.w2"), vec![hidden, out_dim], init_linear(rng, hidden, out_dim)),
            b2: store.add(format!("{name}.b2"), vec![out_dim], vec![0.0; out_dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let h = tape.matmul(x, bind.id(self.w1))?;
        let h = tape.add_row(h, bind.id(self.b1))?;
        let h = self.act.apply(tape, h);
        let o = tape.matmul(h, bind.id(self.w2))?;
        tape.add_row(o, bind.id(self.b2))
    }
}

// ── Patch embedding ─────────────────────────────────────────────────

/// Non-overlapping patch projection plus learned positional table.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    w: ParamId,
    b: ParamId,
    pos: ParamId,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        img_h: usize,
        img_w: usize,
        patch: usize,
        dim: usize,
    ) -> Result<Self> {
        if patch == 0 || img_h % patch != 0 || img_w % patch != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide image {}x{}",
                patch, img_h, img_w
            )));
        }
        let (gh, gw) = (img_h / patch, img_w / patch);
        let pdim = patch * patch;
        Ok(PatchEmbed {
            patch,
            grid_h: gh,
            grid_w: gw,
            dim,
            w: store.add(format!("{name}.w"), vec![pdim, dim], init_linear(rng, pdim, dim)),
            b: store.add(format!("{name}.b"), vec![dim], vec![0.0; dim]),
            pos: store.add(format!("{name}.pos"), vec![gh * gw, dim], init_table(rng, gh * gw, dim)),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// `pixels` is the row-major `img_h x img_w` grid in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, pixels: &[f64]) -> Result<TensorId> {
        let (p, gh, gw) = (self.patch, self.grid_h, self.grid_w);
        let img_w = gw * p;
        if pixels.len() != gh * p * img_w {
            return Err(Error::BadShape {
                op: "patch_embed",
                expected: format!("{} pixels", gh * p * img_w),
                got: vec![pixels.len()],
            });
        }
        let mut patches = Vec::with_capacity(gh * gw * p * p);
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let row = gy * p + py;
                    let start = row * img_w + gx * p;
                    patches.extend_from_slice(&pixels[start..start + p]);
                }
            }
        }
        let x = tape.leaf_from(vec![gh * gw, p * p], patches)?;
        let x = tape.matmul(x, bind.id(self.w))?;
        let x = tape.add_row(x, bind.id(self.b))?;
        tape.add(x, bind.id(self.pos))
    }
}

// ── 2x upsampling convolution ───────────────────────────────────────

/// Stride-2 2x2 transposed convolution: doubles both spatial dimensions
/// and halves the channel count.
#[derive(Debug, Clone)]
pub struct UpConv2x {
    pub in_ch: usize,
    pub out_ch: usize,
    w: ParamId,
    b: ParamId,
}

impl UpConv2x {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
    ) -> Result<Self> {
        if in_ch % 2 != 0 {
            return Err(Error::Config(format!(
                "upconv2x '{}': in-channels {} must be even",
                name, in_ch
            )));
        }
        let out_ch = in_ch / 2;
        Ok(UpConv2x {
            in_ch,
            out_ch,
            w: store.add(
                format!("{name}.w"),
                vec![in_ch, 4 * out_ch],
                init_linear(rng, in_ch, 4 * out_ch),
            ),
            b: store.add(format!("{name}.b"), vec![out_ch], vec![0.0; out_ch]),
        })
    }

    /// `x` is an `[h*w, in_ch]` token grid; returns `[(2h)*(2w), in_ch/2]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: TensorId,
        h: usize,
        w: usize,
    ) -> Result<TensorId> {
        let sx = tape.shape(x).to_vec();
        if sx != [h * w, self.in_ch] {
            return Err(Error::ShapeMismatch {
                op: "upconv2x",
                lhs: sx,
                rhs: vec![h * w, self.in_ch],
            });
        }
        let y = tape.matmul(x, bind.id(self.w))?;
        let y = tape.upshuffle2x(y, h, w)?;
        tape.add_row(y, bind.id(self.b))
    }
}
