//! Image and text encoders.
//!
//! The image encoder is a small ViT: patch embedding, pre-norm
//! transformer blocks, final layer norm. The text encoder is a causal
//! transformer over a closed word vocabulary; its final hidden states are
//! layer-normalized and linearly projected into the shared embedding
//! space, and the projected row at the [EOS] position doubles as the
//! pooled text feature. Both encoders can be frozen: frozen parameters
//! keep receiving gradients but are skipped by the optimizer.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    Activation, AttentionBlock, Binding, FeedForward, LayerNormParams, ParamStore, PatchEmbed,
};
use crate::tensor::{Tape, TensorId};

// ── Vocabulary ──────────────────────────────────────────────────────

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED_TOKENS: usize = 4;

const BUILTIN_VOCAB: &str = include_str!("../assets/vocab.txt");

/// Closed word-level vocabulary. File format: one token per line; the id
/// of the word on line `i` (0-based) is `RESERVED_TOKENS + i`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let words: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), RESERVED_TOKENS + i))
            .collect();
        Vocabulary { words, index }
    }

    /// The synthetic-grammar vocabulary compiled into the binary.
    pub fn builtin() -> Self {
        Self::from_words(&BUILTIN_VOCAB.lines().filter(|l| !l.is_empty()).collect::<Vec<_>>())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Self::from_words(
            &text.lines().filter(|l| !l.is_empty()).collect::<Vec<_>>(),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for w in &self.words {
            let _ = writeln!(out, "{}", w);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Total id space including the four reserved ids.
    pub fn len(&self) -> usize {
        RESERVED_TOKENS + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        match id {
            PAD => "[PAD]",
            SOS => "[SOS]",
            EOS => "[EOS]",
            UNK => "[UNK]",
            _ => &self.words[id - RESERVED_TOKENS],
        }
    }

    /// Whitespace tokenization of a description body (no SOS/EOS).
    pub fn encode_body(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// `[SOS] body [EOS]`.
    pub fn wrap(&self, body: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(body.len() + 2);
        out.push(SOS);
        out.extend_from_slice(body);
        out.push(EOS);
        out
    }

    pub fn decode_body(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= RESERVED_TOKENS)
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Validate a token sequence against the encoder contract: starts with
/// SOS, exactly one EOS, PAD only after the EOS, length within `max_len`.
/// Returns the EOS position.
pub fn validate_tokens(tokens: &[usize], max_len: usize) -> Result<usize> {
    if tokens.len() > max_len {
        return Err(Error::Truncation {
            len: tokens.len(),
            max_len,
        });
    }
    if tokens.first() != Some(&SOS) {
        return Err(Error::InvalidInput(
            "token sequence must start with [SOS]".into(),
        ));
    }
    let eos_count = tokens.iter().filter(|&&t| t == EOS).count();
    if eos_count != 1 {
        return Err(Error::InvalidInput(format!(
            "token sequence must contain exactly one [EOS], found {}",
            eos_count
        )));
    }
    let eos_pos = tokens.iter().position(|&t| t == EOS).unwrap();
    if tokens[eos_pos + 1..].iter().any(|&t| t != PAD) {
        return Err(Error::InvalidInput(
            "only [PAD] allowed after [EOS]".into(),
        ));
    }
    Ok(eos_pos)
}

// ── Shared transformer layer ────────────────────────────────────────

/// Pre-norm residual block: `x + attn(ln1(x))` then `x + ffn(ln2(x))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNormParams,
    attn: AttentionBlock,
    ln2: LayerNormParams,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        act: Activation,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), dim),
            attn: AttentionBlock::new(store, rng, &format!("{name}.attn"), dim, heads, causal)?,
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, 4 * dim, act),
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let n = self.ln1.forward(tape, bind, x)?;
        let a = self.attn.forward(tape, bind, n, n)?;
        let x = tape.add(x, a)?;
        let n = self.ln2.forward(tape, bind, x)?;
        let f = self.ffn.forward(tape, bind, n)?;
        tape.add(x, f)
    }
}

// ── Image encoder ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub name: String,
    pub img_h: usize,
    pub img_w: usize,
    pub dim: usize,
    patch: PatchEmbed,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNormParams,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        img_h: usize,
        img_w: usize,
        patch: usize,
        dim: usize,
        n_layers: usize,
        heads: usize,
        act: Activation,
    ) -> Result<Self> {
        let pe = PatchEmbed::new(store, rng, &format!("{name}.patch"), img_h, img_w, patch, dim)?;
        let layers = (0..n_layers)
            .map(|i| {
                EncoderLayer::new(store, rng, &format!("{name}.layer{}", i), dim, heads, false, act)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageEncoder {
            name: name.to_string(),
            img_h,
            img_w,
            dim,
            patch: pe,
            layers,
            final_ln: LayerNormParams::new(store, &format!("{name}.final_ln"), dim),
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.patch.n_tokens()
    }

    pub fn grid_side(&self) -> usize {
        self.patch.grid_h
    }

    /// `pixels` row-major `img_h x img_w`, values in `[0, 1]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, pixels: &[f64]) -> Result<TensorId> {
        if let Some(&bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {} outside [0, 1]",
                bad
            )));
        }
        let mut x = self.patch.forward(tape, bind, pixels)?;
        for layer in &self.layers {
            x = layer.forward(tape, bind, x)?;
        }
        self.final_ln.forward(tape, bind, x)
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        store.set_trainable_prefix(&self.name, !frozen);
    }
}

// ── Text encoder ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub name: String,
    pub max_len: usize,
    pub dim: usize,
    token_embed: crate::nn::ParamId,
    pos_embed: crate::nn::ParamId,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNormParams,
    proj_w: crate::nn::ParamId,
    proj_b: crate::nn::ParamId,
}

/// Full projected text sequence plus the pooled EOS feature.
pub struct TextFeatures {
    /// `[L, d]` projected sequence, consumed by the feature mixer.
    pub sequence: TensorId,
    /// `[1, d]` layer-normed, projected activation at the EOS token.
    pub eos_feature: TensorId,
    pub eos_pos: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        n_layers: usize,
        heads: usize,
        act: Activation,
    ) -> Result<Self> {
        let token_embed = store.add(
            format!("{name}.token_embed"),
            vec![vocab_size, dim],
            crate::nn::init_table(rng, vocab_size, dim),
        );
        let pos_embed = store.add(
            format!("{name}.pos_embed"),
            vec![max_len, dim],
            crate::nn::init_table(rng, max_len, dim),
        );
        let layers = (0..n_layers)
            .map(|i| {
                EncoderLayer::new(store, rng, &format!("{name}.layer{}", i), dim, heads, true, act)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TextEncoder {
            name: name.to_string(),
            max_len,
            dim,
            token_embed,
            pos_embed,
            layers,
            final_ln: LayerNormParams::new(store, &format!("{name}.final_ln"), dim),
            proj_w: store.add(
                format!("{name}.proj_w"),
                vec![dim, dim],
                crate::nn::init_linear(rng, dim, dim),
            ),
            proj_b: store.add(format!("{name}.proj_b"), vec![dim], vec![0.0; dim]),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        tokens: &[usize],
    ) -> Result<TextFeatures> {
        let eos_pos = validate_tokens(tokens, self.max_len)?;
        let mut x = tape.embed_rows(bind.id(self.token_embed), tokens)?;
        let pos = tape.slice_rows(bind.id(self.pos_embed), 0, tokens.len())?;
        x = tape.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(tape, bind, x)?;
        }
        let normed = self.final_ln.forward(tape, bind, x)?;
        let projected = tape.matmul(normed, bind.id(self.proj_w))?;
        let projected = tape.add_row(projected, bind.id(self.proj_b))?;
        let eos_feature = tape.select_row(projected, eos_pos)?;
        Ok(TextFeatures {
            sequence: projected,
            eos_feature,
            eos_pos,
        })
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        store.set_trainable_prefix(&self.name, !frozen);
    }
}
