//! The pretraining loop: data order, teacher management, optimizer,
//! metrics log and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::data::views::{build_views, ViewBundle, ViewFlags};
use crate::data::TextSample;
use crate::error::{config_err, Error, Result};
use crate::objectives::LossBreakdown;
use crate::params::ParamStore;
use crate::pretrain::checkpoint::Checkpoint;
use crate::pretrain::config::{PretrainConfig, StepPlan, TeacherMode};
use crate::pretrain::optim::{clip_grad_norm, AdamW};
use crate::pretrain::schedule::lr_schedule;
use crate::pretrain::step::{diagnostic, pretrain_step, MnspModel, ENCODER_PREFIX};
use crate::rng::{mix_str, sample_rng};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,lr,nsp,mim,mla,total";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EMERGENCY_DIR: &str = "checkpoint-emergency";
const TEACHER_PREFIX: &str = "teacher.";

const STREAM_ORDER: u64 = 1;
const STREAM_VIEWS: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// Number of optimizer updates including this one.
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        format!("{},{},{},{},{},{}", self.step, self.lr, l.nsp, l.mim, l.mla, l.total)
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Where `metrics.csv` and checkpoints go; nothing is written without it.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    /// Halt (with a checkpoint) after this many total steps.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Rows produced by this invocation.
    pub metrics: Vec<MetricsRow>,
    pub plan: StepPlan,
}

/// Everything the loop mutates, kept together so it can be checkpointed.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: MnspModel,
    pub online: ParamStore,
    pub teacher: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
}

fn build_store(cfg: &RunConfig, seed: u64) -> Result<(MnspModel, ParamStore)> {
    let mut store = ParamStore::new(seed);
    let model = MnspModel::build(&mut store, &cfg.encoder, &cfg.scales, &cfg.pretrain)?;
    Ok((model, store))
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, online) = build_store(cfg, mix_str(cfg.seed, "online"))?;
        let teacher = match cfg.pretrain.teacher_mode {
            TeacherMode::WarmupSnapshot => online.clone(),
            TeacherMode::FrozenRandom => build_store(cfg, mix_str(cfg.seed, "teacher"))?.1,
            TeacherMode::LoadCheckpoint => {
                let path = cfg
                    .pretrain
                    .teacher_checkpoint
                    .as_ref()
                    .ok_or_else(|| config_err!("load-checkpoint teacher needs a path"))?;
                let source = Checkpoint::load(path)?.param_store();
                let mut t = online.clone();
                t.copy_prefix_from(ENCODER_PREFIX, &source, ENCODER_PREFIX)?;
                t
            }
        };
        let optimizer = AdamW::new(&online, cfg.pretrain.optimizer);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            online,
            teacher,
            optimizer,
            step: 0,
        })
    }

    /// Restores parameters, optimizer moments, teacher and step counter.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != "pretrain" {
            return Err(config_err!("expected a pretraining checkpoint, found kind {:?}", ckpt.kind));
        }
        let mut tr = Self::new_untrained_teacher(cfg)?;
        let source = ckpt.param_store();
        for prefix in [ENCODER_PREFIX, "nsp_decoder.", "mim_decoder."] {
            tr.online.copy_prefix_from(prefix, &source, prefix)?;
        }
        tr.teacher
            .copy_prefix_from(ENCODER_PREFIX, &source, &format!("{TEACHER_PREFIX}{ENCODER_PREFIX}"))?;
        tr.optimizer.load_state(&tr.online, &ckpt.optimizer)?;
        tr.step = ckpt.step;
        Ok(tr)
    }

    fn new_untrained_teacher(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, online) = build_store(cfg, mix_str(cfg.seed, "online"))?;
        let teacher = online.clone();
        let optimizer = AdamW::new(&online, cfg.pretrain.optimizer);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            online,
            teacher,
            optimizer,
            step: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params: Vec<_> = self
            .online
            .iter()
            .map(|(_, n, v)| (n.to_string(), v.clone()))
            .collect();
        params.extend(
            self.teacher
                .iter()
                .filter(|(_, n, _)| n.starts_with(ENCODER_PREFIX))
                .map(|(_, n, v)| (format!("{TEACHER_PREFIX}{n}"), v.clone())),
        );
        Checkpoint {
            kind: "pretrain".into(),
            step: self.step,
            params,
            optimizer: self.optimizer.state_arrays(&self.online),
            config: self.cfg.snapshot(),
        }
    }

    /// The views of batch `step` (0-based), drawn deterministically from the
    /// seed, the epoch and the position within it.
    pub fn batch_views(&self, corpus: &[TextSample], plan: &StepPlan, step: u64) -> Result<Vec<ViewBundle>> {
        let pc = &self.cfg.pretrain;
        let n = corpus.len();
        let epoch = step / plan.steps_per_epoch;
        let within = (step % plan.steps_per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut sample_rng(self.cfg.seed, STREAM_ORDER, epoch));
        let start = within * pc.batch_size;
        let end = (start + pc.batch_size).min(n);
        let flags = ViewFlags {
            augment: pc.flags.augment,
            zoom_in: pc.flags.zoom_in,
        };
        (start..end)
            .map(|pos| {
                let mut rng = sample_rng(self.cfg.seed, STREAM_VIEWS, epoch * n as u64 + pos as u64);
                build_views(
                    &corpus[order[pos]],
                    &self.cfg.scales,
                    &mut rng,
                    flags,
                    pc.mask_ratio,
                    self.cfg.encoder.channels,
                )
            })
            .collect()
    }

    /// Runs step number `self.step` (0-based) and advances.
    pub fn train_step(&mut self, corpus: &[TextSample], plan: &StepPlan) -> Result<MetricsRow> {
        let pc: &PretrainConfig = &self.cfg.pretrain;
        let lr = lr_schedule(self.step, plan.total_steps, plan.warmup_steps, pc.base_lr)?;
        let bundles = self.batch_views(corpus, plan, self.step)?;
        let mut result = pretrain_step(&bundles, &self.model, &self.online, &self.teacher, pc)?;
        let norm = clip_grad_norm(&mut result.grads, pc.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Numerical(diagnostic(&result.losses, &result.grads, &self.online)));
        }
        self.optimizer.step(&mut self.online, &result.grads, lr);
        self.step += 1;
        if pc.teacher_mode == TeacherMode::WarmupSnapshot && self.step == plan.warmup_steps {
            log::info!("warm-up finished at step {}; snapshotting teacher", self.step);
            self.teacher = self.online.clone();
        }
        Ok(MetricsRow {
            step: self.step,
            lr,
            losses: result.losses,
        })
    }
}

fn open_metrics(out: &Path, resume_step: u64) -> Result<fs::File> {
    let path = out.join(METRICS_FILE);
    let mut kept = vec![METRICS_HEADER.to_string()];
    if resume_step > 0 {
        if let Ok(text) = fs::read_to_string(&path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| {
                        l.split(',')
                            .next()
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s <= resume_step)
                    })
                    .map(str::to_string),
            );
        }
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(f)
}

/// Trains on `corpus` per `cfg`, optionally resuming from a checkpoint.
pub fn run_pretraining(corpus: &[TextSample], cfg: &RunConfig, opts: RunOptions) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Input("pretraining corpus is empty".into()));
    }
    let plan = cfg.pretrain.plan(corpus.len())?;
    let mut trainer = match &opts.resume {
        Some(ckpt) => Trainer::from_checkpoint(cfg, ckpt)?,
        None => Trainer::new(cfg)?,
    };
    let mut metrics_file = match opts.out_dir {
        Some(out) => {
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            Some(open_metrics(out, trainer.step)?)
        }
        None => None,
    };
    let end = opts.stop_after.unwrap_or(plan.total_steps).min(plan.total_steps);
    let dtype = cfg.checkpoint_dtype;
    let mut rows = Vec::new();
    log::info!(
        "pretraining: {} samples, {} steps ({} warm-up), starting at {}",
        corpus.len(),
        plan.total_steps,
        plan.warmup_steps,
        trainer.step
    );
    while trainer.step < end {
        let row = match trainer.train_step(corpus, &plan) {
            Ok(r) => r,
            Err(e @ Error::Numerical(_)) => {
                if let Some(out) = opts.out_dir {
                    let dir = out.join(EMERGENCY_DIR);
                    trainer.checkpoint().save(&dir, dtype)?;
                    log::error!("non-finite loss; emergency checkpoint at {}", dir.display());
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let (Some(f), Some(out)) = (metrics_file.as_mut(), opts.out_dir) {
            writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(out.join(METRICS_FILE), e))?;
        }
        log::debug!("{}", row.csv_line());
        rows.push(row);
        let every = cfg.pretrain.checkpoint_every;
        if let Some(out) = opts.out_dir {
            if every > 0 && trainer.step % every == 0 && trainer.step < end {
                trainer.checkpoint().save(&out.join(CHECKPOINT_DIR), dtype)?;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(out) = opts.out_dir {
        checkpoint.save(&out.join(CHECKPOINT_DIR), dtype)?;
    }
    Ok(PretrainOutcome {
        checkpoint,
        metrics: rows,
        plan,
    })
}

/// Parses a metrics log written by [`run_pretraining`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format(path, "missing metrics header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format(path, format!("line {}: {line:?}", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad())?,
                lr: num(f[1])?,
                losses: LossBreakdown {
                    nsp: num(f[2])?,
                    mim: num(f[3])?,
                    mla: num(f[4])?,
                    total: num(f[5])?,
                },
            })
        })
        .collect()
}
