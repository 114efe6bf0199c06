//! Autoregressive transformer decoder over the pretrained encoder.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::image::Image;
use crate::error::{config_err, contract_err, Result};
use crate::model::layers::{LayerNorm, Linear, SaCaFfnBlock};
use crate::model::{Encoder, EncoderConfig};
use crate::params::{Init, Matrix, ParamId, ParamStore};
use crate::pretrain::AdamWConfig;
use crate::recognizer::Charset;
use crate::scale::ScaleSpec;

pub const DECODER_PREFIX: &str = "decoder.";

/// Value added to disallowed attention logits; `exp` of it underflows to 0.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub augment: bool,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            hidden: 512,
            heads: 8,
            max_len: 25,
            lr: 1e-4,
            batch_size: 64,
            epochs: 10,
            warmup_epochs: 0,
            augment: true,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

impl RecognizerConfig {
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            hidden: 64,
            heads: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(config_err!("recognizer depth, hidden and heads must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(config_err!(
                "recognizer.hidden {} is not divisible by recognizer.heads {}",
                self.hidden,
                self.heads
            ));
        }
        if self.max_len == 0 {
            return Err(config_err!("recognizer.max_len must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(config_err!("recognizer batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

/// Encoder plus decoder. Parameters live under `encoder.` and `decoder.`.
#[derive(Clone, Debug)]
pub struct Recognizer {
    pub encoder: Encoder,
    pub memory_proj: Linear,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<SaCaFfnBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub charset: Charset,
    pub cfg: RecognizerConfig,
    /// Encoder input size.
    pub input: ScaleSpec,
}

impl Recognizer {
    pub fn new(
        store: &mut ParamStore,
        enc: &EncoderConfig,
        cfg: &RecognizerConfig,
        input: ScaleSpec,
    ) -> Result<Self> {
        cfg.validate()?;
        let charset = Charset::default();
        let h = cfg.hidden;
        let v = charset.class_count();
        let encoder = Encoder::new(store, "encoder", enc)?;
        let memory_proj = Linear::new(store, "decoder.memory_proj", enc.embed_dim, h);
        let token_embed = store.add("decoder.token_embed", v, h, Init::Normal(0.02));
        let pos_embed = store.add("decoder.pos_embed", cfg.max_len + 1, h, Init::Normal(0.02));
        let blocks = (0..cfg.depth)
            .map(|i| SaCaFfnBlock::new(store, &format!("decoder.blocks.{i}"), h, h, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "decoder.norm", h);
        let head = Linear::new(store, "decoder.head", h, v);
        Ok(Self {
            encoder,
            memory_proj,
            token_embed,
            pos_embed,
            blocks,
            norm,
            head,
            charset,
            cfg: cfg.clone(),
            input,
        })
    }

    /// The encoder input for `image`: resized to the working size with the
    /// encoder's channel count.
    pub fn prepare(&self, image: &Image) -> Image {
        image
            .with_channels(self.encoder.cfg.channels)
            .resize(self.input.height, self.input.width)
    }

    /// Projected encoder patch tokens, `N × hidden`.
    pub fn memory(&self, t: &mut Tape, prepared: &Image) -> Result<Var> {
        let out = self.encoder.forward(t, prepared, None)?;
        Ok(self.memory_proj.forward(t, out.tokens))
    }

    /// Logits `L × classes` for teacher-forced `inputs` under a causal mask.
    pub fn logits(&self, t: &mut Tape, memory: Var, inputs: &[usize]) -> Result<Var> {
        let len = inputs.len();
        if len == 0 || len > self.cfg.max_len + 1 {
            return Err(contract_err!(
                "decoder input of length {len}; expected 1..={}",
                self.cfg.max_len + 1
            ));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.charset.class_count()) {
            return Err(contract_err!("token id {bad} outside the vocabulary"));
        }
        let tok = t.param(self.token_embed);
        let tok = t.gather_rows(tok, inputs.to_vec());
        let pos = t.param(self.pos_embed);
        let pos = t.gather_rows(pos, (0..len).collect());
        let mut x = t.add(tok, pos);
        let bias = t.constant(causal_bias(len));
        for block in &self.blocks {
            x = block.forward(t, x, memory, Some(bias))?;
        }
        let x = self.norm.forward(t, x);
        Ok(self.head.forward(t, x))
    }
}

/// `0` on and below the diagonal, a large negative value above it.
pub fn causal_bias(len: usize) -> Matrix {
    Matrix::from_shape_fn((len, len), |(i, j)| if j > i { MASKED_LOGIT } else { 0.0 })
}
