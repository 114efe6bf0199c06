use crate::autograd::{Tape, Var};
use crate::error::{contract_err, Result};
use crate::model::encoder::{check_positions, interpolated_table};
use crate::model::layers::{Linear, SaCaFfnBlock};
use crate::params::{Init, ParamId, ParamStore};

pub const DECODER_BLOCKS: usize = 2;

/// Predicts next-scale features from bicubically upsampled tokens while
/// cross-attending to the small-scale encoder tokens.
#[derive(Clone, Debug)]
pub struct NspDecoder {
    pub blocks: Vec<SaCaFfnBlock>,
    pub head: Linear,
}

impl NspDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let blocks = (0..DECODER_BLOCKS)
            .map(|i| SaCaFfnBlock::new(store, &format!("{name}.blocks.{i}"), dim, dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            head: Linear::new(store, &format!("{name}.head"), dim, out_dim),
        })
    }

    /// `upsampled`: `N(s_{k+1}) × d`; `context`: small-scale patch tokens.
    pub fn forward(&self, t: &mut Tape, upsampled: Var, context: Var) -> Result<Var> {
        let mut x = upsampled;
        for b in &self.blocks {
            x = b.forward(t, x, context, None)?;
        }
        Ok(self.head.forward(t, x))
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            b.zero_output_projections(store);
        }
    }
}

/// Masked-token decoder. Block 1 cross-attends to the small-scale encoder
/// tokens, block 2 to the next-scale prediction. Without guidance both
/// blocks cross-attend to their own input sequence instead.
#[derive(Clone, Debug)]
pub struct MimDecoder {
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub pos_grid: (usize, usize),
    pub layout_block: SaCaFfnBlock,
    pub stroke_block: SaCaFfnBlock,
    pub head: Linear,
    pub guided: bool,
}

impl MimDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        nsp_out_dim: usize,
        out_dim: usize,
        pos_grid: (usize, usize),
        guided: bool,
    ) -> Result<Self> {
        let stroke_ctx = if guided { nsp_out_dim } else { dim };
        Ok(Self {
            mask_token: store.add(&format!("{name}.mask_token"), 1, dim, Init::Normal(0.02)),
            pos: store.add(
                &format!("{name}.pos"),
                pos_grid.0 * pos_grid.1,
                dim,
                Init::Normal(0.02),
            ),
            pos_grid,
            layout_block: SaCaFfnBlock::new(store, &format!("{name}.blocks.0"), dim, dim, heads)?,
            stroke_block: SaCaFfnBlock::new(
                store,
                &format!("{name}.blocks.1"),
                dim,
                stroke_ctx,
                heads,
            )?,
            head: Linear::new(store, &format!("{name}.head"), dim, out_dim),
            guided,
        })
    }

    /// Scatters the encoded visible tokens back onto the full grid, fills the
    /// remaining positions with the shared mask token and adds positional
    /// embeddings.
    pub fn assemble(
        &self,
        t: &mut Tape,
        visible: Var,
        positions: &[usize],
        grid: (usize, usize),
    ) -> Result<Var> {
        let n = grid.0 * grid.1;
        check_positions(positions, n)?;
        if t.shape(visible).0 != positions.len() {
            return Err(contract_err!(
                "{} visible tokens but {} positions",
                t.shape(visible).0,
                positions.len()
            ));
        }
        let mask_row = positions.len();
        let mut index = vec![mask_row; n];
        for (row, &p) in positions.iter().enumerate() {
            index[p] = row;
        }
        let mask = t.param(self.mask_token);
        let stacked = t.concat_rows(&[visible, mask]);
        let full = t.gather_rows(stacked, index);
        let pos = interpolated_table(t, self.pos, self.pos_grid, grid);
        Ok(t.add(full, pos))
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        f_mim: Var,
        layout_ctx: Option<Var>,
        stroke_ctx: Option<Var>,
    ) -> Result<Var> {
        let x = match (self.guided, layout_ctx) {
            (true, Some(ctx)) => self.layout_block.forward(t, f_mim, ctx, None)?,
            (true, None) => return Err(contract_err!("guided decoding needs the small-scale context")),
            (false, _) => self.layout_block.forward(t, f_mim, f_mim, None)?,
        };
        let x = match (self.guided, stroke_ctx) {
            (true, Some(ctx)) => self.stroke_block.forward(t, x, ctx, None)?,
            (true, None) => return Err(contract_err!("guided decoding needs the next-scale prediction")),
            (false, _) => self.stroke_block.forward(t, x, x, None)?,
        };
        Ok(self.head.forward(t, x))
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.layout_block.zero_output_projections(store);
        self.stroke_block.zero_output_projections(store);
    }
}
