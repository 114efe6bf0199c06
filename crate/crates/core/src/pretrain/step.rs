//! The model assembled for pretraining and one optimization step over it.

use crate::autograd::{Tape, Var};
use crate::data::views::ViewBundle;
use crate::error::{contract_err, Error, Result};
use crate::model::{upsample_tokens, Encoder, EncoderConfig, MimDecoder, NspDecoder};
use crate::objectives::{
    make_target, mim_loss_var, mla_loss_var, nsp_loss_var, target_width, LossBreakdown,
};
use crate::params::{Matrix, ParamGrads, ParamStore};
use crate::pretrain::config::PretrainConfig;
use crate::scale::ScaleSequence;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const NSP_PREFIX: &str = "nsp_decoder.";
pub const MIM_PREFIX: &str = "mim_decoder.";

/// Online encoder plus both decoders. Teacher parameters live in a second
/// store with the same layout, so the same structs drive both.
#[derive(Clone, Debug)]
pub struct MnspModel {
    pub encoder: Encoder,
    pub nsp: NspDecoder,
    pub mim: MimDecoder,
    pub target_width: usize,
}

impl MnspModel {
    pub fn build(
        store: &mut ParamStore,
        enc: &EncoderConfig,
        scales: &ScaleSequence,
        cfg: &PretrainConfig,
    ) -> Result<Self> {
        enc.validate()?;
        cfg.validate()?;
        if scales.patch() != enc.patch {
            return Err(crate::error::config_err!(
                "scale sequence patch {} differs from encoder patch {}",
                scales.patch(),
                enc.patch
            ));
        }
        let width = target_width(cfg.target_mode, enc.embed_dim, enc.patch, enc.channels);
        let encoder = Encoder::new(store, "encoder", enc)?;
        let nsp = NspDecoder::new(store, "nsp_decoder", enc.embed_dim, enc.heads, width)?;
        let mim = MimDecoder::new(
            store,
            "mim_decoder",
            enc.embed_dim,
            enc.heads,
            width,
            width,
            scales.largest().grid(),
            cfg.flags.guidance,
        )?;
        Ok(Self {
            encoder,
            nsp,
            mim,
            target_width: width,
        })
    }
}

/// Teacher outputs for one bundle; constants as far as the online tape is
/// concerned.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub large: Option<Matrix>,
    pub masked: Option<Matrix>,
}

pub fn compute_targets(
    model: &MnspModel,
    teacher: &ParamStore,
    bundle: &ViewBundle,
    cfg: &PretrainConfig,
) -> Result<Targets> {
    let f = cfg.flags;
    let large = if f.nsp {
        Some(make_target(&bundle.view_large, cfg.target_mode, &model.encoder, teacher)?.tokens)
    } else {
        None
    };
    let masked = if f.mim {
        Some(make_target(&bundle.target_view, cfg.target_mode, &model.encoder, teacher)?.tokens)
    } else {
        None
    };
    Ok(Targets { large, masked })
}

/// Loss nodes of one sample on an online tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub nsp: Option<Var>,
    pub mim: Option<Var>,
    pub mla: Option<Var>,
    pub total: Var,
    /// Teacher targets as they enter the online graph (constants: no
    /// gradient flows back to the teacher).
    pub targets: [Option<Var>; 2],
}

impl LossVars {
    pub fn values(&self, t: &Tape) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| t.scalar(x));
        LossBreakdown::new(v(self.nsp), v(self.mim), v(self.mla))
    }
}

/// Builds the full forward graph of one bundle.
pub fn sample_losses(
    t: &mut Tape,
    model: &MnspModel,
    bundle: &ViewBundle,
    targets: &Targets,
    cfg: &PretrainConfig,
) -> Result<LossVars> {
    let f = cfg.flags;
    let small = model.encoder.forward(t, &bundle.view_small, None)?;

    let mut target_vars = [None, None];
    let mut nsp = None;
    let mut nsp_pred = None;
    if f.nsp {
        let target = targets
            .large
            .as_ref()
            .ok_or_else(|| contract_err!("next-scale target missing"))?;
        let large_grid = bundle.pair.large.grid();
        let up = upsample_tokens(t, small.tokens, small.grid, large_grid);
        let pred = model.nsp.forward(t, up, small.tokens)?;
        let target = t.constant(target.clone());
        target_vars[0] = Some(target);
        nsp = Some(nsp_loss_var(t, pred, target)?);
        nsp_pred = Some(pred);
    }

    let mut mim = None;
    let mut mla = None;
    if f.mim || f.mla {
        let visible = bundle.mask.visible_positions();
        let enc = model.encoder.forward(t, &bundle.view_masked, Some(&visible))?;
        if f.mim {
            let target = targets
                .masked
                .as_ref()
                .ok_or_else(|| contract_err!("masked-view target missing"))?;
            let f_mim = model.mim.assemble(t, enc.tokens, &visible, enc.grid)?;
            let pred = if f.guidance {
                model.mim.forward(t, f_mim, Some(small.tokens), nsp_pred)?
            } else {
                model.mim.forward(t, f_mim, None, None)?
            };
            let target = t.constant(target.clone());
            target_vars[1] = Some(target);
            mim = Some(mim_loss_var(t, pred, target, &bundle.mask)?);
        }
        if f.mla {
            let large = model.encoder.forward(t, &bundle.view_large, None)?;
            mla = Some(mla_loss_var(t, enc.cls, small.cls, large.cls)?);
        }
    }

    let parts: Vec<Var> = [nsp, mim, mla].into_iter().flatten().collect();
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = t.add(total, p);
    }
    Ok(LossVars {
        nsp,
        mim,
        mla,
        total,
        targets: target_vars,
    })
}

#[derive(Clone, Debug)]
pub struct StepResult {
    /// Batch means.
    pub losses: LossBreakdown,
    /// Gradient of the mean total loss.
    pub grads: ParamGrads,
}

/// Forward and backward over a batch. Per-sample gradients are summed in
/// batch order and divided by the batch size.
pub fn pretrain_step(
    bundles: &[ViewBundle],
    model: &MnspModel,
    online: &ParamStore,
    teacher: &ParamStore,
    cfg: &PretrainConfig,
) -> Result<StepResult> {
    if bundles.is_empty() {
        return Err(contract_err!("pretraining step over an empty batch"));
    }
    let mut grads = ParamGrads::zeros_like(online);
    let (mut nsp, mut mim, mut mla) = (0.0, 0.0, 0.0);
    for bundle in bundles {
        let targets = compute_targets(model, teacher, bundle, cfg)?;
        let mut t = Tape::new(online);
        let vars = sample_losses(&mut t, model, bundle, &targets, cfg)?;
        let v = vars.values(&t);
        nsp += v.nsp;
        mim += v.mim;
        mla += v.mla;
        grads.accumulate(t.backward(vars.total).params());
    }
    let b = bundles.len() as f64;
    grads.scale(1.0 / b);
    let losses = LossBreakdown::new(nsp / b, mim / b, mla / b);
    if !losses.is_finite() || !grads.all_finite() {
        return Err(Error::Numerical(diagnostic(&losses, &grads, online)));
    }
    Ok(StepResult { losses, grads })
}

/// One-line dump of per-loss values and per-module gradient norms.
pub fn diagnostic(losses: &LossBreakdown, grads: &ParamGrads, store: &ParamStore) -> String {
    format!(
        "nsp={} mim={} mla={} total={} grad_norm[encoder]={} grad_norm[nsp_decoder]={} grad_norm[mim_decoder]={}",
        losses.nsp,
        losses.mim,
        losses.mla,
        losses.total,
        grads.norm_with_prefix(store, ENCODER_PREFIX),
        grads.norm_with_prefix(store, NSP_PREFIX),
        grads.norm_with_prefix(store, MIM_PREFIX),
    )
}
