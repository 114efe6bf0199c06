//! Differentiable building blocks: patch embedding, the shared
//! multi-resolution encoder, bicubic token upsampling and the two
//! pretraining decoders.
//!
//! Everything is written against [`Tape`]; the free functions in this module
//! are value-level conveniences that run a throwaway tape.

pub mod decoders;
pub mod encoder;
pub mod layers;
pub mod tokens;

use crate::autograd::{Tape, Var};
use crate::data::image::Image;
use crate::error::{contract_err, Result};
use crate::interp::grid_weights;
use crate::params::{Matrix, ParamStore};

pub use decoders::{MimDecoder, NspDecoder, DECODER_BLOCKS};
pub use encoder::{Encoder, EncoderConfig, EncoderOutput};
pub use layers::{multi_head_attention, Attention, SaCaFfnBlock};
pub use tokens::{masked_count, MaskPattern, TokenSequence};

/// Bicubic resampling of a row-major token field from grid `from` to `to`,
/// one channel at a time.
pub fn upsample_tokens(t: &mut Tape, x: Var, from: (usize, usize), to: (usize, usize)) -> Var {
    if from == to {
        return x;
    }
    let w = t.constant(grid_weights(from, to, false));
    t.matmul(w, x)
}

/// Multi-head attention without projections on plain matrices.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    let mut t = Tape::detached();
    let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let (out, _) = multi_head_attention(&mut t, q, k, v, heads, None)?;
    Ok(t.value(out).clone())
}

/// Value-level bicubic token upsampling. The input must not carry `[CLS]`.
pub fn upsample_tokens_bicubic(x: &TokenSequence, target: (usize, usize)) -> Result<TokenSequence> {
    if x.cls.is_some() {
        return Err(contract_err!("strip [CLS] before upsampling tokens"));
    }
    if x.positions.is_some() {
        return Err(contract_err!("upsampling needs the full token grid"));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(contract_err!("empty target grid {target:?}"));
    }
    let tokens = grid_weights(x.grid, target, false).dot(&x.tokens);
    TokenSequence::new(tokens, target)
}

/// One SA–CA–FFN block on plain token sequences.
pub fn sa_ca_ffn_block(
    block: &SaCaFfnBlock,
    store: &ParamStore,
    x: &TokenSequence,
    context: &TokenSequence,
) -> Result<TokenSequence> {
    if context.cls.is_some() {
        return Err(contract_err!("cross-attention context must exclude [CLS]"));
    }
    let mut t = Tape::new(store);
    let xv = t.constant(x.tokens.clone());
    let cv = t.constant(context.tokens.clone());
    let y = block.forward(&mut t, xv, cv, None)?;
    Ok(TokenSequence {
        cls: None,
        tokens: t.value(y).clone(),
        grid: x.grid,
        positions: x.positions.clone(),
    })
}

/// Patch tokens plus positional embeddings, with the `[CLS]` token prepended.
pub fn patch_embed(encoder: &Encoder, store: &ParamStore, image: &Image) -> Result<TokenSequence> {
    let mut t = Tape::new(store);
    let (tokens, grid) = encoder.embed_patches(&mut t, image)?;
    let cls = encoder.cls_token(&mut t);
    Ok(TokenSequence::new(t.value(tokens).clone(), grid)?.with_cls(t.value(cls).row(0).to_vec()))
}

/// Full encoder pass; with `visible`, only unmasked positions are encoded.
pub fn encode(
    encoder: &Encoder,
    store: &ParamStore,
    image: &Image,
    visible: Option<&MaskPattern>,
) -> Result<TokenSequence> {
    let positions = visible.map(|m| m.visible_positions());
    if let Some(m) = visible {
        let grid = (image.height / encoder.cfg.patch, image.width / encoder.cfg.patch);
        if m.len() != grid.0 * grid.1 {
            return Err(contract_err!(
                "mask covers {} tokens but the image has {}",
                m.len(),
                grid.0 * grid.1
            ));
        }
    }
    let mut t = Tape::new(store);
    let out = encoder.forward(&mut t, image, positions.as_deref())?;
    Ok(out.to_sequence(&t))
}

/// Next-scale decoding of already-upsampled tokens `f` against the small-scale
/// patch tokens.
pub fn nsp_decode(
    decoder: &NspDecoder,
    store: &ParamStore,
    f: &TokenSequence,
    context_small: &TokenSequence,
    expected_tokens: usize,
) -> Result<TokenSequence> {
    if f.len() != expected_tokens {
        return Err(crate::error::Error::Config(format!(
            "upsampled sequence has {} tokens, next scale needs {expected_tokens}",
            f.len()
        )));
    }
    if f.cls.is_some() || context_small.cls.is_some() {
        return Err(contract_err!("decoder inputs must exclude [CLS]"));
    }
    let mut t = Tape::new(store);
    let x = t.constant(f.tokens.clone());
    let c = t.constant(context_small.tokens.clone());
    let y = decoder.forward(&mut t, x, c)?;
    TokenSequence::new(t.value(y).clone(), f.grid)
}

/// Masked decoding. `visible` holds encoder outputs of the unmasked tokens
/// (with their grid positions); `mask` tells which positions are filled with
/// the mask token.
pub fn mim_decode(
    decoder: &MimDecoder,
    store: &ParamStore,
    visible: &TokenSequence,
    mask: &MaskPattern,
    context_small: Option<&TokenSequence>,
    context_nsp: Option<&TokenSequence>,
) -> Result<TokenSequence> {
    let positions = visible
        .positions
        .clone()
        .unwrap_or_else(|| (0..visible.len()).collect());
    let n = visible.grid.0 * visible.grid.1;
    if mask.len() != n {
        return Err(contract_err!("mask covers {} of {n} positions", mask.len()));
    }
    let mut sorted = positions.clone();
    sorted.sort_unstable();
    if sorted != mask.visible_positions() {
        return Err(contract_err!(
            "visible tokens do not match the unmasked positions; masked slots would lack mask tokens"
        ));
    }
    let mut t = Tape::new(store);
    let v = t.constant(visible.tokens.clone());
    let f = decoder.assemble(&mut t, v, &positions, visible.grid)?;
    let layout = context_small.map(|c| t.constant(c.tokens.clone()));
    let stroke = context_nsp.map(|c| t.constant(c.tokens.clone()));
    let y = decoder.forward(&mut t, f, layout, stroke)?;
    TokenSequence::new(t.value(y).clone(), visible.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_attention_by_symmetry() {
        let out = scaled_dot_attention(&array![[0.0]], &array![[0.0], [0.0]], &array![[1.0], [3.0]], 1)
            .unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = array![[0.3, -2.0], [5.0, 1.0], [0.0, 0.0]];
        let k = array![[1.0, 2.0]];
        let v = array![[7.0, -3.0]];
        let out = scaled_dot_attention(&q, &k, &v, 1).unwrap();
        for row in out.rows() {
            assert!((row[0] - 7.0).abs() < 1e-12 && (row[1] + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_key_softmax_value() {
        // weights = softmax([1, 0]) = [e/(e+1), 1/(e+1)]
        let e = std::f64::consts::E;
        let expected = e / (e + 1.0);
        let out = scaled_dot_attention(&array![[1.0]], &array![[1.0], [0.0]], &array![[1.0], [0.0]], 1)
            .unwrap();
        assert!((out[[0, 0]] - expected).abs() < 1e-12);
        assert!((out[[0, 0]] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn attention_errors() {
        let a = Matrix::zeros((2, 4));
        assert!(scaled_dot_attention(&a, &Matrix::zeros((2, 3)), &a, 1).is_err());
        assert!(scaled_dot_attention(&a, &Matrix::zeros((0, 4)), &Matrix::zeros((0, 4)), 1).is_err());
        assert!(scaled_dot_attention(&a, &a, &a, 3).is_err());
    }

    #[test]
    fn upsample_rejects_cls() {
        let t = TokenSequence::new(Matrix::zeros((4, 2)), (1, 4)).unwrap().with_cls(vec![0.0; 2]);
        assert!(upsample_tokens_bicubic(&t, (2, 8)).is_err());
    }
}
