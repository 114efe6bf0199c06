//! The three pretraining losses and their unweighted sum.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::image::Image;
use crate::error::{contract_err, Result};
use crate::model::{Encoder, MaskPattern, TokenSequence};
use crate::params::{Matrix, ParamStore};

/// What the decoders regress onto.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Patch tokens of the frozen teacher encoder.
    #[default]
    Feature,
    /// Per-patch standardized raw pixels.
    Pixel,
}

/// Loss values of one step. `total` is always `nsp + mim + mla`, summed in
/// that order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nsp: f64,
    pub mim: f64,
    pub mla: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(nsp: f64, mim: f64, mla: f64) -> Self {
        let mut parts = Self {
            nsp,
            mim,
            mla,
            total: 0.0,
        };
        parts.total = total_loss(&parts);
        parts
    }

    pub fn is_finite(&self) -> bool {
        self.nsp.is_finite() && self.mim.is_finite() && self.mla.is_finite() && self.total.is_finite()
    }
}

pub fn total_loss(parts: &LossBreakdown) -> f64 {
    parts.nsp + parts.mim + parts.mla
}

fn same_shape(t: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(contract_err!(
            "{what}: prediction {:?} and target {:?} differ in shape",
            t.shape(a),
            t.shape(b)
        ));
    }
    Ok(())
}

fn squared_error_sum(t: &mut Tape, a: Var, b: Var) -> Var {
    let d = t.sub(a, b);
    let sq = t.mul(d, d);
    t.sum(sq)
}

/// `‖pred − target‖² / N`: squared error summed over tokens and channels,
/// divided by the token count only.
pub fn nsp_loss_var(t: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_shape(t, pred, target, "next-scale loss")?;
    let n = t.shape(pred).0;
    if n == 0 {
        return Err(contract_err!("next-scale loss over zero tokens"));
    }
    let s = squared_error_sum(t, pred, target);
    Ok(t.scale(s, 1.0 / n as f64))
}

/// Squared error over masked positions only, divided by the masked count.
pub fn mim_loss_var(t: &mut Tape, pred: Var, target: Var, mask: &MaskPattern) -> Result<Var> {
    same_shape(t, pred, target, "masked loss")?;
    if mask.len() != t.shape(pred).0 {
        return Err(contract_err!(
            "mask covers {} positions, prediction has {}",
            mask.len(),
            t.shape(pred).0
        ));
    }
    let masked = mask.masked_positions();
    if masked.is_empty() {
        return Err(contract_err!("masked loss needs at least one masked position"));
    }
    let count = masked.len() as f64;
    let p = t.gather_rows(pred, masked.clone());
    let q = t.gather_rows(target, masked);
    let s = squared_error_sum(t, p, q);
    Ok(t.scale(s, 1.0 / count))
}

/// `‖c_mask − c_small‖² + ‖c_mask − c_large‖²` over `1 × d` rows.
pub fn mla_loss_var(t: &mut Tape, cls_masked: Var, cls_small: Var, cls_large: Var) -> Result<Var> {
    same_shape(t, cls_masked, cls_small, "alignment loss")?;
    same_shape(t, cls_masked, cls_large, "alignment loss")?;
    let a = squared_error_sum(t, cls_masked, cls_small);
    let b = squared_error_sum(t, cls_masked, cls_large);
    Ok(t.add(a, b))
}

fn eval_pair(
    pred: &Matrix,
    target: &Matrix,
    f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut t = Tape::detached();
    let p = t.constant(pred.clone());
    let q = t.constant(target.clone());
    let l = f(&mut t, p, q)?;
    Ok(t.scalar(l))
}

fn strip_check(pred: &TokenSequence, target: &TokenSequence) -> Result<()> {
    if pred.tokens.dim() != target.tokens.dim() {
        return Err(contract_err!(
            "prediction {:?} and target {:?} differ in shape",
            pred.tokens.dim(),
            target.tokens.dim()
        ));
    }
    Ok(())
}

/// Next-scale feature loss. Any `[CLS]` on either side is ignored.
pub fn nsp_loss(pred: &TokenSequence, target: &TokenSequence) -> Result<f64> {
    strip_check(pred, target)?;
    eval_pair(&pred.tokens, &target.tokens, nsp_loss_var)
}

/// Masked-position feature loss. Any `[CLS]` on either side is ignored.
pub fn mim_loss(pred: &TokenSequence, target: &TokenSequence, mask: &MaskPattern) -> Result<f64> {
    strip_check(pred, target)?;
    eval_pair(&pred.tokens, &target.tokens, |t, p, q| mim_loss_var(t, p, q, mask))
}

pub fn mla_loss(cls_masked: &[f64], cls_small: &[f64], cls_large: &[f64]) -> Result<f64> {
    if cls_masked.len() != cls_small.len() || cls_masked.len() != cls_large.len() {
        return Err(contract_err!(
            "[CLS] widths differ: {}, {}, {}",
            cls_masked.len(),
            cls_small.len(),
            cls_large.len()
        ));
    }
    let row = |v: &[f64]| Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape");
    let mut t = Tape::detached();
    let a = t.constant(row(cls_masked));
    let b = t.constant(row(cls_small));
    let c = t.constant(row(cls_large));
    let l = mla_loss_var(&mut t, a, b, c)?;
    Ok(t.scalar(l))
}

pub const PIXEL_EPS: f64 = 1e-6;

/// Flattened patches of `view`, each standardized to zero mean and unit
/// variance. A constant patch maps to zeros.
pub fn pixel_targets(view: &Image, patch: usize) -> Result<Matrix> {
    let mut p = view.patches(patch)?;
    let n = p.ncols() as f64;
    for mut row in p.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + PIXEL_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    Ok(p)
}

/// Width of the regression targets under `mode`.
pub fn target_width(mode: TargetMode, teacher_dim: usize, patch: usize, channels: usize) -> usize {
    match mode {
        TargetMode::Feature => teacher_dim,
        TargetMode::Pixel => patch * patch * channels,
    }
}

/// Regression target for a clean view: teacher patch tokens (no `[CLS]`,
/// no gradient) or standardized pixels.
pub fn make_target(
    view: &Image,
    mode: TargetMode,
    teacher: &Encoder,
    teacher_params: &ParamStore,
) -> Result<TokenSequence> {
    let grid = (view.height / teacher.cfg.patch, view.width / teacher.cfg.patch);
    match mode {
        TargetMode::Feature => {
            let mut t = Tape::new(teacher_params);
            let out = teacher.forward(&mut t, view, None)?;
            TokenSequence::new(t.value(out.tokens).clone(), grid)
        }
        TargetMode::Pixel => TokenSequence::new(pixel_targets(view, teacher.cfg.patch)?, grid),
    }
}
