//! Query-based image-text feature mixer.
//!
//! One block runs, in order: text self-attention, text-to-image
//! cross-attention, a feed-forward net on the text stream, then a second
//! cross-attention that folds the fused text back into the image stream.
//! Every sub-block is pre-norm with a residual skip, so a block with all
//! weights zeroed is exactly the identity on both streams. Blocks stack
//! sequentially (default depth 4).
//!
//! The image-stream update uses image tokens as queries and fused text as
//! keys/values, which keeps the output image-shaped for the decoder. The
//! text-stream cross-attention residual is the text stream itself; the
//! `image_residual_on_text` switch adds the image tensor instead, which
//! only type-checks when both streams have equal sequence lengths.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, AttentionBlock, Binding, FeedForward, LayerNormParams, ParamStore};
use crate::tensor::{Tape, TensorId};

/// The fused pair produced by the mixer; shapes match the inputs.
#[derive(Debug, Clone, Copy)]
pub struct FusedFeatures {
    /// `[n_tokens, d]` image stream.
    pub image: TensorId,
    /// `[text_len, d]` text stream.
    pub text: TensorId,
}

#[derive(Debug, Clone)]
pub struct MixerBlock {
    ln_self: LayerNormParams,
    self_attn: AttentionBlock,
    ln_cross_text: LayerNormParams,
    cross_text_to_image: AttentionBlock,
    ln_ffn: LayerNormParams,
    ffn: FeedForward,
    ln_cross_image: LayerNormParams,
    cross_image_to_text: AttentionBlock,
    /// Residual of the second equation comes from the image stream
    /// instead of the text stream (valid only at equal lengths).
    pub image_residual_on_text: bool,
}

impl MixerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        act: Activation,
        image_residual_on_text: bool,
    ) -> Result<Self> {
        Ok(MixerBlock {
            ln_self: LayerNormParams::new(store, &format!("{name}.ln_self"), dim),
            self_attn: AttentionBlock::new(
                store,
                rng,
                &format!("{name}.self_attn"),
                dim,
                heads,
                false,
            )?,
            ln_cross_text: LayerNormParams::new(store, &format!("{name}.ln_cross_text"), dim),
            cross_text_to_image: AttentionBlock::new(
                store,
                rng,
                &format!("{name}.cross_text_to_image"),
                dim,
                heads,
                false,
            )?,
            ln_ffn: LayerNormParams::new(store, &format!("{name}.ln_ffn"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, 4 * dim, act),
            ln_cross_image: LayerNormParams::new(store, &format!("{name}.ln_cross_image"), dim),
            cross_image_to_text: AttentionBlock::new(
                store,
                rng,
                &format!("{name}.cross_image_to_text"),
                dim,
                heads,
                false,
            )?,
            image_residual_on_text,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        f_im: TensorId,
        f_text: TensorId,
    ) -> Result<FusedFeatures> {
        if tape.shape(f_im)[1] != tape.shape(f_text)[1] {
            return Err(Error::ShapeMismatch {
                op: "mix_block",
                lhs: tape.shape(f_im).to_vec(),
                rhs: tape.shape(f_text).to_vec(),
            });
        }

        // text_1 = text + attn(text, text)
        let n = self.ln_self.forward(tape, bind, f_text)?;
        let a = self.self_attn.forward(tape, bind, n, n)?;
        let text_1 = tape.add(f_text, a)?;

        // text_2 = text_1 + cross_attn(text_1 -> image)
        let n = self.ln_cross_text.forward(tape, bind, text_1)?;
        let a = self.cross_text_to_image.forward(tape, bind, n, f_im)?;
        let residual = if self.image_residual_on_text { f_im } else { text_1 };
        let text_2 = tape.add(residual, a)?;

        // fused_text = text_2 + feed_forward(text_2)
        let n = self.ln_ffn.forward(tape, bind, text_2)?;
        let f = self.ffn.forward(tape, bind, n)?;
        let fused_text = tape.add(text_2, f)?;

        // fused_image = image + cross_attn(image -> fused_text)
        let n = self.ln_cross_image.forward(tape, bind, f_im)?;
        let a = self.cross_image_to_text.forward(tape, bind, n, fused_text)?;
        let fused_image = tape.add(f_im, a)?;

        Ok(FusedFeatures {
            image: fused_image,
            text: fused_text,
        })
    }
}

/// Apply a stack of mixer blocks in sequence. Empty stacks are rejected.
pub fn mix(
    tape: &mut Tape,
    bind: &Binding,
    blocks: &[MixerBlock],
    f_im: TensorId,
    f_text: TensorId,
) -> Result<FusedFeatures> {
    if blocks.is_empty() {
        return Err(Error::Config("mixer stack must contain at least one block".into()));
    }
    let mut fused = FusedFeatures {
        image: f_im,
        text: f_text,
    };
    for block in blocks {
        fused = block.forward(tape, bind, fused.image, fused.text)?;
    }
    Ok(fused)
}
