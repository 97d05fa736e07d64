//! Mask decoder: two 2x up-convolutions over the fused image grid, a
//! bidirectional cross-attention exchange with the fused text, and two
//! MLP heads. The mask head emits a text-conditioned hyper-weight vector
//! whose inner product with the upsampled feature map gives per-pixel
//! logits (a dynamic linear classifier); the box head emits a normalized
//! bounding box through a sigmoid.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::mixer::FusedFeatures;
use crate::nn::{Activation, AttentionBlock, Binding, LayerNormParams, MlpHead, ParamStore, UpConv2x};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub dim: usize,
    up1: UpConv2x,
    up2: UpConv2x,
    ln_image: LayerNormParams,
    cross_image_to_text: AttentionBlock,
    ln_text: LayerNormParams,
    cross_text_to_image: AttentionBlock,
    mlp_mask: MlpHead,
    mlp_bbox: MlpHead,
}

/// Raw decoder outputs on the tape, before any resize to input resolution.
pub struct DecodeOutput {
    /// `[side*side, 1]` mask logits; `side` is 4x the token-grid side.
    pub mask_logits: TensorId,
    pub side: usize,
    /// `[1, 4]` sigmoid box output, not yet canonicalized.
    pub bbox_sigmoid: TensorId,
    /// Channel chain evidence: `(rows, channels)` after each up-conv.
    pub f1_shape: (usize, usize),
    pub f2_shape: (usize, usize),
}

impl MaskDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        act: Activation,
    ) -> Result<Self> {
        if dim % 4 != 0 {
            return Err(Error::Config(format!(
                "decoder '{}': model dim {} must be divisible by 4 for the C -> C/2 -> C/4 chain",
                name, dim
            )));
        }
        Ok(MaskDecoder {
            dim,
            up1: UpConv2x::new(store, rng, &format!("{name}.up1"), dim)?,
            up2: UpConv2x::new(store, rng, &format!("{name}.up2"), dim / 2)?,
            ln_image: LayerNormParams::new(store, &format!("{name}.ln_image"), dim),
            cross_image_to_text: AttentionBlock::new(
                store,
                rng,
                &format!("{name}.cross_image_to_text"),
                dim,
                heads,
                false,
            )?,
            ln_text: LayerNormParams::new(store, &format!("{name}.ln_text"), dim),
            cross_text_to_image: AttentionBlock::new(
                store,
                rng,
                &format!("{name}.cross_text_to_image"),
                dim,
                heads,
                false,
            )?,
            // 2x hidden keeps narrow ReLU heads from starting fully dead
            mlp_mask: MlpHead::new(store, rng, &format!("{name}.mlp_mask"), dim, 2 * dim, dim / 4, act),
            mlp_bbox: MlpHead::new(store, rng, &format!("{name}.mlp_bbox"), dim, 2 * dim, 4, act),
        })
    }

    pub fn decode(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        fused: &FusedFeatures,
    ) -> Result<DecodeOutput> {
        let n_tok = tape.shape(fused.image)[0];
        let side = (n_tok as f64).sqrt().round() as usize;
        if side * side != n_tok {
            return Err(Error::Config(format!(
                "decoder: token count {} is not a perfect square",
                n_tok
            )));
        }
        if tape.shape(fused.image)[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "decode",
                lhs: tape.shape(fused.image).to_vec(),
                rhs: vec![n_tok, self.dim],
            });
        }

        // F1 = upconv(grid), F2 = upconv(F1): halve channels, double size
        let f1 = self.up1.forward(tape, bind, fused.image, side, side)?;
        let f2 = self.up2.forward(tape, bind, f1, 2 * side, 2 * side)?;
        let f1_shape = (tape.shape(f1)[0], tape.shape(f1)[1]);
        let f2_shape = (tape.shape(f2)[0], tape.shape(f2)[1]);

        // bidirectional exchange; the text stream pools at its first token
        let n = self.ln_image.forward(tape, bind, fused.image)?;
        let a = self.cross_image_to_text.forward(tape, bind, n, fused.text)?;
        let img2 = tape.add(fused.image, a)?;
        let n = self.ln_text.forward(tape, bind, fused.text)?;
        let a = self.cross_text_to_image.forward(tape, bind, n, img2)?;
        let txt2 = tape.add(fused.text, a)?;
        let f3 = tape.select_row(txt2, 0)?;

        // mask logit at pixel p = <hyper, F2[p]>
        let hyper = self.mlp_mask.forward(tape, bind, f3)?;
        let hyper_t = tape.transpose(hyper)?;
        let mask_logits = tape.matmul(f2, hyper_t)?;

        let bbox_raw = self.mlp_bbox.forward(tape, bind, f3)?;
        let bbox_sigmoid = tape.sigmoid(bbox_raw);

        Ok(DecodeOutput {
            mask_logits,
            side: 4 * side,
            bbox_sigmoid,
            f1_shape,
            f2_shape,
        })
    }
}

// ── Prediction-side values ──────────────────────────────────────────

/// Materialized model output for one sample.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub width: usize,
    pub height: usize,
    pub mask_logits: Vec<f64>,
    pub mask_probs: Vec<f64>,
    /// `(x1, y1, x2, y2)` normalized and canonicalized.
    pub bbox: [f64; 4],
}

/// Order the box corners: `x1 <= x2`, `y1 <= y2`.
pub fn canonicalize_bbox(raw: [f64; 4]) -> [f64; 4] {
    let [x1, y1, x2, y2] = raw;
    [x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2)]
}

/// Threshold probabilities into a binary mask; `>=` is inclusive.
pub fn binarize(probs: &[f64], width: usize, height: usize, threshold: f64) -> Result<BinaryMask> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!(
            "binarize threshold {} outside (0, 1)",
            threshold
        )));
    }
    if probs.len() != width * height {
        return Err(Error::BadShape {
            op: "binarize",
            expected: format!("{} probabilities", width * height),
            got: vec![probs.len()],
        });
    }
    let bits = probs.iter().map(|&p| u8::from(p >= threshold)).collect();
    BinaryMask::new(width, height, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::FusedFeatures;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(33)
    }

    fn decode_with(dim: usize, grid_side: usize, text_len: usize) -> DecodeOutput {
        let mut store = ParamStore::new();
        let mut r = rng();
        let dec = MaskDecoder::new(&mut store, &mut r, "decoder", dim, 2, Activation::Relu).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let n = grid_side * grid_side;
        let img: Vec<f64> = (0..n * dim).map(|i| ((i * 37 % 100) as f64) / 100.0 - 0.5).collect();
        let txt: Vec<f64> =
            (0..text_len * dim).map(|i| ((i * 53 % 100) as f64) / 100.0 - 0.5).collect();
        let im = tape.leaf_from(vec![n, dim], img).unwrap();
        let tx = tape.leaf_from(vec![text_len, dim], txt).unwrap();
        let fused = FusedFeatures { image: im, text: tx };
        let out = dec.decode(&mut tape, &bind, &fused).unwrap();
        // materialize for assertions outside the tape
        DecodeOutput {
            mask_logits: out.mask_logits,
            side: out.side,
            bbox_sigmoid: out.bbox_sigmoid,
            f1_shape: out.f1_shape,
            f2_shape: out.f2_shape,
        }
    }

    #[test]
    fn shape_law_8x8x64() {
        let out = decode_with(64, 8, 5);
        assert_eq!(out.f1_shape, (256, 32), "F1 is 16x16x32");
        assert_eq!(out.f2_shape, (1024, 16), "F2 is 32x32x16");
        assert_eq!(out.side, 32, "mask logits 32x32");
    }

    #[test]
    fn rejects_non_square_token_count() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let dec = MaskDecoder::new(&mut store, &mut r, "decoder", 8, 2, Activation::Relu).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let im = tape.leaf_from(vec![6, 8], vec![0.0; 48]).unwrap();
        let tx = tape.leaf_from(vec![2, 8], vec![0.0; 16]).unwrap();
        let fused = FusedFeatures { image: im, text: tx };
        assert!(dec.decode(&mut tape, &bind, &fused).is_err());
    }

    #[test]
    fn rejects_dim_not_divisible_by_four() {
        let mut store = ParamStore::new();
        assert!(MaskDecoder::new(&mut store, &mut rng(), "d", 6, 2, Activation::Relu).is_err());
    }

    #[test]
    fn zero_mask_head_gives_uniform_half_probs() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let dec = MaskDecoder::new(&mut store, &mut r, "decoder", 8, 2, Activation::Relu).unwrap();
        store.zero_prefix("decoder.mlp_mask");
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let im = tape.leaf_from(vec![4, 8], (0..32).map(|i| i as f64 / 32.0).collect()).unwrap();
        let tx = tape.leaf_from(vec![3, 8], vec![0.1; 24]).unwrap();
        let fused = FusedFeatures { image: im, text: tx };
        let out = dec.decode(&mut tape, &bind, &fused).unwrap();
        assert!(tape.value(out.mask_logits).iter().all(|&v| v == 0.0));
        let probs = tape.sigmoid(out.mask_logits);
        assert!(tape.value(probs).iter().all(|&p| p == 0.5));
    }

    #[test]
    fn bbox_is_canonical_for_arbitrary_weights() {
        for seed in 0..10u64 {
            let mut store = ParamStore::new();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let dec =
                MaskDecoder::new(&mut store, &mut r, "decoder", 8, 2, Activation::Relu).unwrap();
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let img: Vec<f64> = (0..4 * 8).map(|_| r.gen_range(-2.0..2.0)).collect();
            let txt: Vec<f64> = (0..2 * 8).map(|_| r.gen_range(-2.0..2.0)).collect();
            let im = tape.leaf_from(vec![4, 8], img).unwrap();
            let tx = tape.leaf_from(vec![2, 8], txt).unwrap();
            let fused = FusedFeatures { image: im, text: tx };
            let out = dec.decode(&mut tape, &bind, &fused).unwrap();
            let raw = tape.value(out.bbox_sigmoid);
            let b = canonicalize_bbox([raw[0], raw[1], raw[2], raw[3]]);
            assert!(0.0 <= b[0] && b[0] <= b[2] && b[2] <= 1.0);
            assert!(0.0 <= b[1] && b[1] <= b[3] && b[3] <= 1.0);
        }
    }

    #[test]
    fn binarize_threshold_is_inclusive() {
        let m = binarize(&[0.5, 0.5, 0.5, 0.5], 2, 2, 0.5).unwrap();
        assert_eq!(m.count_ones(), 4, ">= keeps exact-threshold pixels");
        let m2 = binarize(&[0.1, 0.2, 0.3, 0.4], 2, 2, 0.5).unwrap();
        assert_eq!(m2.count_ones(), 0);
        assert!(binarize(&[0.5], 1, 1, 0.0).is_err());
    }

    #[test]
    fn binarize_monotone_in_threshold() {
        let mut r = rng();
        for _ in 0..50 {
            let probs: Vec<f64> = (0..64).map(|_| r.gen_range(0.0..1.0)).collect();
            let lo = binarize(&probs, 8, 8, 0.3).unwrap();
            let hi = binarize(&probs, 8, 8, 0.7).unwrap();
            // raising the threshold never adds pixels
            for (a, b) in lo.bits().iter().zip(hi.bits()) {
                assert!(b <= a);
            }
        }
    }
}
