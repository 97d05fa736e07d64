//! Full pipeline: image encoder -> text encoder -> mixer stack -> mask
//! decoder, plus checkpoint serialization and the loss hookup used by
//! training and gradient checking.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{canonicalize_bbox, MaskDecoder, Prediction};
use crate::encoders::{ImageEncoder, TextEncoder, Vocabulary};
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossNodes};
use crate::mixer::{mix, FusedFeatures, MixerBlock};
use crate::nn::{Activation, Binding, ParamStore};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input side (canvas).
    pub img_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub image_layers: usize,
    pub text_layers: usize,
    pub mixer_depth: usize,
    pub text_max_len: usize,
    pub vocab_size: usize,
    pub act_encoder: Activation,
    pub act_decoder: Activation,
    /// Bilinearly resize decoder logits up to the input resolution.
    pub resize_to_input: bool,
    /// Text-stream cross-attention residual taken from the image tensor
    /// (only valid when both streams share a sequence length).
    pub paper_literal_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            img_size: 64,
            patch: 8,
            dim: 64,
            heads: 4,
            image_layers: 4,
            text_layers: 2,
            mixer_depth: 4,
            text_max_len: 16,
            vocab_size: Vocabulary::builtin().len(),
            act_encoder: Activation::Gelu,
            act_decoder: Activation::Relu,
            resize_to_input: true,
            paper_literal_residual: false,
        }
    }
}

impl ModelConfig {
    /// Tiny end-to-end configuration for gradient checking: d=8, 2x2
    /// token grid, short text.
    pub fn tiny() -> Self {
        ModelConfig {
            img_size: 16,
            patch: 8,
            dim: 8,
            heads: 2,
            image_layers: 1,
            text_layers: 1,
            mixer_depth: 4,
            text_max_len: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.img_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch {} must divide image size {}",
                self.patch, self.img_size
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be divisible by 4",
                self.dim
            )));
        }
        if self.mixer_depth == 0 {
            return Err(Error::Config("mixer depth must be >= 1".into()));
        }
        let side = self.img_size / self.patch;
        let after = 4 * side;
        if self.resize_to_input && self.img_size % after != 0 {
            return Err(Error::Config(format!(
                "decoder output side {} cannot be doubled up to image size {}",
                after, self.img_size
            )));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub mixer: Vec<MixerBlock>,
    pub decoder: MaskDecoder,
}

/// Tape handles of one forward pass.
pub struct ForwardPass {
    pub fused: FusedFeatures,
    /// `[img_size^2, 1]` when resizing, else decoder-native resolution.
    pub mask_logits: TensorId,
    pub mask_probs: TensorId,
    pub out_side: usize,
    pub bbox_sigmoid: TensorId,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_encoder = ImageEncoder::new(
            &mut store,
            &mut rng,
            "image_encoder",
            cfg.img_size,
            cfg.img_size,
            cfg.patch,
            cfg.dim,
            cfg.image_layers,
            cfg.heads,
            cfg.act_encoder,
        )?;
        let text_encoder = TextEncoder::new(
            &mut store,
            &mut rng,
            "text_encoder",
            cfg.vocab_size,
            cfg.text_max_len,
            cfg.dim,
            cfg.text_layers,
            cfg.heads,
            cfg.act_encoder,
        )?;
        let mixer = (0..cfg.mixer_depth)
            .map(|i| {
                MixerBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("mixer.{}", i),
                    cfg.dim,
                    cfg.heads,
                    cfg.act_encoder,
                    cfg.paper_literal_residual,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = MaskDecoder::new(
            &mut store,
            &mut rng,
            "decoder",
            cfg.dim,
            cfg.heads,
            cfg.act_decoder,
        )?;
        Ok(Model {
            cfg,
            store,
            image_encoder,
            text_encoder,
            mixer,
            decoder,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.store.bind(tape)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        pixels: &[f64],
        tokens: &[usize],
    ) -> Result<ForwardPass> {
        let f_im = self.image_encoder.forward(tape, bind, pixels)?;
        let text = self.text_encoder.forward(tape, bind, tokens)?;
        let fused = mix(tape, bind, &self.mixer, f_im, text.sequence)?;
        let decoded = self.decoder.decode(tape, bind, &fused)?;

        let mut logits = decoded.mask_logits;
        let mut side = decoded.side;
        if self.cfg.resize_to_input {
            while side < self.cfg.img_size {
                logits = tape.bilinear2x(logits, side, side)?;
                side *= 2;
            }
        }
        let probs = tape.sigmoid(logits);
        Ok(ForwardPass {
            fused,
            mask_logits: logits,
            mask_probs: probs,
            out_side: side,
            bbox_sigmoid: decoded.bbox_sigmoid,
        })
    }

    /// Forward plus the training objective for one sample.
    pub fn forward_with_loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        pixels: &[f64],
        tokens: &[usize],
        gt_mask: &[f64],
        gt_bbox: &[f64; 4],
        lambda_bbox: f64,
    ) -> Result<(ForwardPass, LossNodes, LossBreakdown)> {
        let fwd = self.forward(tape, bind, pixels, tokens)?;
        let (nodes, breakdown) = total_loss(
            tape,
            fwd.mask_probs,
            gt_mask,
            Some(fwd.bbox_sigmoid),
            gt_bbox,
            lambda_bbox,
        )?;
        Ok((fwd, nodes, breakdown))
    }

    /// Inference: fresh tape, materialized prediction.
    pub fn predict(&self, pixels: &[f64], tokens: &[usize]) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let fwd = self.forward(&mut tape, &bind, pixels, tokens)?;
        let logits = tape.value(fwd.mask_logits).to_vec();
        let probs = tape.value(fwd.mask_probs).to_vec();
        let braw = tape.value(fwd.bbox_sigmoid);
        Ok(Prediction {
            width: fwd.out_side,
            height: fwd.out_side,
            mask_logits: logits,
            mask_probs: probs,
            bbox: canonicalize_bbox([braw[0], braw[1], braw[2], braw[3]]),
        })
    }

    /// Freeze or unfreeze both encoders (mixer and decoder stay trainable).
    pub fn set_freeze_encoders(&mut self, frozen: bool) {
        let img = self.image_encoder.clone();
        let txt = self.text_encoder.clone();
        img.set_frozen(&mut self.store, frozen);
        txt.set_frozen(&mut self.store, frozen);
    }

    // ── Checkpoints ─────────────────────────────────────────────────
    //
    // Little-endian binary: magic "TGLM", version u32, then one record
    // per parameter until EOF: u32 name length, name bytes, u32 ndim,
    // ndim * u32 dims, then the f64 payload.

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"TGLM");
        out.extend_from_slice(&1u32.to_le_bytes());
        for id in self.store.iter_ids() {
            let meta = self.store.meta(id);
            let name = meta.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(meta.shape.len() as u32).to_le_bytes());
            for &d in &meta.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in self.store.value(id) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let mut file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut raw = Vec::new();
        file.read_to_end(&mut raw)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > raw.len() {
                return Err(Error::Checkpoint(format!(
                    "truncated at byte {} of {}",
                    pos, path.display()
                )));
            }
            let s = &raw[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != b"TGLM" {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic bytes",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                version
            )));
        }
        let mut seen = std::collections::HashSet::new();
        while pos < raw.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut pos, numel * 8)?;
            let id = self.store.find(&name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint parameter '{}' not in model", name))
            })?;
            if self.store.meta(id).shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}': checkpoint shape {:?} vs model shape {:?}",
                    name,
                    shape,
                    self.store.meta(id).shape
                )));
            }
            let values: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *self.store.value_mut(id) = values;
            seen.insert(name);
        }
        if seen.len() != self.store.len() {
            let missing: Vec<&str> = self
                .store
                .iter_ids()
                .map(|id| self.store.meta(id).name.as_str())
                .filter(|n| !seen.contains(*n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint missing parameters: {}",
                missing.join(", ")
            )));
        }
        Ok(())
    }
}
