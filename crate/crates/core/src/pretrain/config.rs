use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::objectives::TargetMode;
use crate::pretrain::optim::AdamWConfig;

/// Which components of the objective and of view construction are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainFlags {
    pub nsp: bool,
    pub mim: bool,
    pub mla: bool,
    /// MIM decoder cross-attends to the small-scale tokens and the
    /// next-scale prediction; otherwise each block attends to its own input.
    pub guidance: bool,
    pub zoom_in: bool,
    pub augment: bool,
}

impl Default for PretrainFlags {
    fn default() -> Self {
        Self {
            nsp: true,
            mim: true,
            mla: true,
            guidance: true,
            zoom_in: true,
            augment: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// Encoder arrays read from `teacher_checkpoint`.
    LoadCheckpoint,
    /// An independently seeded, never-trained encoder.
    FrozenRandom,
    /// The initial weights during warm-up, then a copy of the online
    /// encoder taken when warm-up ends.
    #[default]
    WarmupSnapshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub mask_ratio: f64,
    pub target_mode: TargetMode,
    pub flags: PretrainFlags,
    pub teacher_mode: TeacherMode,
    pub teacher_checkpoint: Option<PathBuf>,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            batch_size: 64,
            epochs: 10,
            warmup_epochs: 1,
            mask_ratio: 0.8,
            target_mode: TargetMode::Feature,
            flags: PretrainFlags::default(),
            teacher_mode: TeacherMode::default(),
            teacher_checkpoint: None,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            checkpoint_every: 0,
        }
    }
}

/// Step counts derived from the corpus size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepPlan {
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(config_err!("pretrain.base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if self.batch_size == 0 {
            return Err(config_err!("pretrain.batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(config_err!("pretrain.epochs must be positive"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(config_err!("pretrain.mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        let f = self.flags;
        if !(f.nsp || f.mim || f.mla) {
            return Err(config_err!("at least one of flags.nsp, flags.mim, flags.mla must be enabled"));
        }
        if f.guidance && !(f.nsp && f.mim) {
            return Err(config_err!(
                "flags.guidance needs both flags.nsp and flags.mim; disable guidance for single-branch runs"
            ));
        }
        if self.teacher_mode == TeacherMode::LoadCheckpoint && self.teacher_checkpoint.is_none() {
            return Err(config_err!("teacher_mode load-checkpoint needs pretrain.teacher_checkpoint"));
        }
        Ok(())
    }

    pub fn plan(&self, corpus_len: usize) -> Result<StepPlan> {
        if corpus_len == 0 {
            return Err(config_err!("empty pretraining corpus"));
        }
        let steps_per_epoch = corpus_len.div_ceil(self.batch_size) as u64;
        let plan = StepPlan {
            steps_per_epoch,
            total_steps: steps_per_epoch * self.epochs as u64,
            warmup_steps: steps_per_epoch * self.warmup_epochs as u64,
        };
        if plan.total_steps <= plan.warmup_steps {
            return Err(config_err!(
                "{} total steps do not exceed {} warm-up steps",
                plan.total_steps,
                plan.warmup_steps
            ));
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_arithmetic() {
        let cfg = PretrainConfig::default();
        let plan = cfg.plan(512).unwrap();
        assert_eq!(plan.total_steps, 80);
        assert_eq!(plan.warmup_steps, 8);
        assert_eq!(cfg.plan(65).unwrap().steps_per_epoch, 2);
    }

    #[test]
    fn guidance_requires_both_branches() {
        let mut cfg = PretrainConfig::default();
        cfg.flags.nsp = false;
        assert!(cfg.validate().is_err());
        cfg.flags.guidance = false;
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<PretrainConfig>(r#"{"base_lrr": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("base_lrr"));
        let cfg: PretrainConfig = serde_json::from_str(r#"{"flags": {"mla": false}}"#).unwrap();
        assert!(!cfg.flags.mla && cfg.flags.nsp);
        let t: TeacherMode = serde_json::from_str("\"frozen-random\"").unwrap();
        assert_eq!(t, TeacherMode::FrozenRandom);
    }
}
