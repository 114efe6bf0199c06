use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::image::Image;
use crate::error::{config_err, contract_err, input_err, Result};
use crate::interp::grid_weights;
use crate::model::layers::{EncoderBlock, LayerNorm, Linear};
use crate::model::tokens::TokenSequence;
use crate::params::{Init, ParamId, ParamStore};

/// Shape of the shared multi-resolution patch encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    /// Grid of the learned positional table; smaller grids are interpolated.
    pub max_grid: [usize; 2],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// ViT-S sized: 384 wide, 12 layers, 6 heads, 4-pixel patches.
    pub fn desk() -> Self {
        Self {
            embed_dim: 384,
            depth: 12,
            heads: 6,
            patch: 4,
            channels: 1,
            max_grid: [8, 32],
        }
    }

    /// The small profile used by tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            depth: 2,
            heads: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 || self.heads == 0 {
            return Err(config_err!("encoder dimensions must be nonzero: {self:?}"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(config_err!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim,
                self.heads
            ));
        }
        if self.patch == 0 || self.channels == 0 || self.max_grid.contains(&0) {
            return Err(config_err!("patch, channels and max_grid must be nonzero"));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

/// Tape handles for one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub cls: Var,
    pub tokens: Var,
    pub grid: (usize, usize),
    /// Grid position of every output row of `tokens`.
    pub positions: Vec<usize>,
    /// Per-head attention nodes, indexed `[layer][head]`; their probabilities
    /// (rows/cols = CLS + tokens) come from `Tape::attention_probs`.
    pub attention: Vec<Vec<Var>>,
}

impl EncoderOutput {
    pub fn to_sequence(&self, t: &Tape) -> TokenSequence {
        let full = self.positions.len() == self.grid.0 * self.grid.1
            && self.positions.iter().enumerate().all(|(i, &p)| i == p);
        TokenSequence {
            cls: Some(t.value(self.cls).row(0).to_vec()),
            tokens: t.value(self.tokens).clone(),
            grid: self.grid,
            positions: (!full).then(|| self.positions.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub patch_proj: Linear,
    pub cls: ParamId,
    pub cls_pos: ParamId,
    /// `max_grid.0 · max_grid.1 × d`, row-major.
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_proj = Linear::new(store, &format!("{name}.patch_proj"), cfg.patch_dim(), d);
        let cls = store.add(&format!("{name}.cls"), 1, d, Init::Normal(0.02));
        let cls_pos = store.add(&format!("{name}.cls_pos"), 1, d, Init::Normal(0.02));
        let pos = store.add(
            &format!("{name}.pos"),
            cfg.max_grid[0] * cfg.max_grid[1],
            d,
            Init::Normal(0.02),
        );
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(store, &format!("{name}.blocks.{i}"), d, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        Ok(Self {
            cfg: cfg.clone(),
            patch_proj,
            cls,
            cls_pos,
            pos,
            blocks,
            norm,
        })
    }

    pub fn max_grid(&self) -> (usize, usize) {
        (self.cfg.max_grid[0], self.cfg.max_grid[1])
    }

    /// Positional table resampled to `grid` (bicubic, clamp-to-edge).
    pub fn positional(&self, t: &mut Tape, grid: (usize, usize)) -> Var {
        interpolated_table(t, self.pos, self.max_grid(), grid)
    }

    /// Patch tokens with positional embeddings, no `[CLS]`.
    pub fn embed_patches(&self, t: &mut Tape, image: &Image) -> Result<(Var, (usize, usize))> {
        if image.channels != self.cfg.channels {
            return Err(input_err!(
                "image has {} channels, encoder expects {}",
                image.channels,
                self.cfg.channels
            ));
        }
        let patches = image.patches(self.cfg.patch)?;
        let grid = (image.height / self.cfg.patch, image.width / self.cfg.patch);
        let x = t.constant(patches);
        let x = self.patch_proj.forward(t, x);
        let pos = self.positional(t, grid);
        Ok((t.add(x, pos), grid))
    }

    /// `[CLS]` row with its positional embedding.
    pub fn cls_token(&self, t: &mut Tape) -> Var {
        let c = t.param(self.cls);
        let p = t.param(self.cls_pos);
        t.add(c, p)
    }

    /// Runs the encoder. With `positions`, only those grid positions are
    /// encoded, in the given order.
    pub fn forward(
        &self,
        t: &mut Tape,
        image: &Image,
        positions: Option<&[usize]>,
    ) -> Result<EncoderOutput> {
        let (tokens, grid) = self.embed_patches(t, image)?;
        let n = grid.0 * grid.1;
        let (tokens, positions) = match positions {
            Some(p) => {
                check_positions(p, n)?;
                (t.gather_rows(tokens, p.to_vec()), p.to_vec())
            }
            None => (tokens, (0..n).collect()),
        };
        let cls = self.cls_token(t);
        let mut x = t.concat_rows(&[cls, tokens]);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, probs) = block.forward(t, x)?;
            x = y;
            attention.push(probs);
        }
        let x = self.norm.forward(t, x);
        let rows = positions.len();
        let cls = t.gather_rows(x, vec![0]);
        let tokens = t.gather_rows(x, (1..=rows).collect());
        Ok(EncoderOutput {
            cls,
            tokens,
            grid,
            positions,
            attention,
        })
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            b.zero_output_projections(store);
        }
    }
}

/// A learned `(from.0·from.1) × d` table resampled to `to`.
pub(crate) fn interpolated_table(
    t: &mut Tape,
    table: ParamId,
    from: (usize, usize),
    to: (usize, usize),
) -> Var {
    let p = t.param(table);
    if from == to {
        return p;
    }
    let w = t.constant(grid_weights(from, to, false));
    t.matmul(w, p)
}

pub(crate) fn check_positions(positions: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &p in positions {
        if p >= n {
            return Err(contract_err!("position {p} outside a grid of {n} tokens"));
        }
        if std::mem::replace(&mut seen[p], true) {
            return Err(contract_err!("position {p} listed twice"));
        }
    }
    Ok(())
}
