//! Cross-entropy fine-tuning, greedy decoding and word accuracy.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::autograd::Tape;
use crate::config::RunConfig;
use crate::data::augment::augment;
use crate::data::image::Image;
use crate::data::TextSample;
use crate::error::{config_err, contract_err, input_err, Error, Result};
use crate::params::{Matrix, ParamGrads, ParamStore};
use crate::pretrain::checkpoint::Checkpoint;
use crate::pretrain::optim::{clip_grad_norm, AdamW};
use crate::pretrain::schedule::lr_schedule;
use crate::pretrain::step::ENCODER_PREFIX;
use crate::recognizer::model::{Recognizer, DECODER_PREFIX};
use crate::rng::{mix_str, sample_rng};

pub const FINETUNE_METRICS_HEADER: &str = "step,lr,ce";
const STREAM_ORDER: u64 = 11;
const STREAM_AUGMENT: u64 = 12;

/// Summed CE over rows whose target is not `pad`, and the number of such
/// rows. PAD rows do not influence the result, whatever their logits.
pub fn sequence_cross_entropy(logits: &Matrix, targets: &[usize], pad: usize) -> Result<(f64, usize)> {
    if logits.nrows() != targets.len() {
        return Err(contract_err!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        ));
    }
    let mut t = Tape::detached();
    let l = t.constant(logits.clone());
    let ce = t.cross_entropy_sum(l, targets.to_vec(), Some(pad));
    Ok((t.scalar(ce), targets.iter().filter(|&&x| x != pad).count()))
}

#[derive(Clone, Debug)]
pub struct FinetuneStep {
    /// Mean CE per non-PAD target position over the batch.
    pub loss: f64,
    pub tokens: usize,
    pub grads: ParamGrads,
}

fn label_of(sample: &TextSample) -> Result<&str> {
    sample
        .label
        .as_deref()
        .ok_or_else(|| contract_err!("fine-tuning sample {:?} has no label", sample.name))
}

/// Teacher-forced CE over a batch with gradients for encoder and decoder.
/// `images` may replace the samples' images (e.g. augmented copies).
pub fn finetune_step(
    batch: &[TextSample],
    images: Option<&[Image]>,
    model: &Recognizer,
    store: &ParamStore,
) -> Result<FinetuneStep> {
    if batch.is_empty() {
        return Err(contract_err!("fine-tuning step over an empty batch"));
    }
    let cs = &model.charset;
    let mut grads = ParamGrads::zeros_like(store);
    let mut sum = 0.0;
    let mut tokens = 0;
    for (i, sample) in batch.iter().enumerate() {
        let label = label_of(sample)?;
        let (input, target) = cs.teacher_forcing(label, None)?;
        if target.len() > model.cfg.max_len + 1 {
            return Err(input_err!("label {label:?} exceeds {} symbols", model.cfg.max_len));
        }
        let image = images.map_or(&sample.image, |im| &im[i]);
        let mut t = Tape::new(store);
        let memory = model.memory(&mut t, &model.prepare(image))?;
        let logits = model.logits(&mut t, memory, &input)?;
        let ce = t.cross_entropy_sum(logits, target.clone(), Some(cs.pad()));
        sum += t.scalar(ce);
        tokens += target.len();
        grads.accumulate(t.backward(ce).params());
    }
    grads.scale(1.0 / tokens as f64);
    let loss = sum / tokens as f64;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Numerical(format!(
            "fine-tuning ce={loss} grad_norm={}",
            grads.global_norm()
        )));
    }
    Ok(FinetuneStep { loss, tokens, grads })
}

/// Argmax decoding from BOS until EOS or `max_len` symbols. BOS and PAD are
/// never emitted.
pub fn greedy_decode(model: &Recognizer, store: &ParamStore, image: &Image) -> Result<String> {
    let cs = &model.charset;
    let memory = {
        let mut t = Tape::new(store);
        let m = model.memory(&mut t, &model.prepare(image))?;
        t.value(m).clone()
    };
    let mut ids = vec![cs.bos()];
    let mut out = String::new();
    while out.chars().count() < model.cfg.max_len {
        let mut t = Tape::new(store);
        let mem = t.constant(memory.clone());
        let logits = model.logits(&mut t, mem, &ids)?;
        let row = t.value(logits).row(ids.len() - 1).to_owned();
        let mut best = cs.eos();
        for c in (0..cs.symbol_count()).chain([cs.eos()]) {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == cs.eos() {
            break;
        }
        out.push(cs.symbol(best).expect("symbol class"));
        ids.push(best);
    }
    Ok(out.to_lowercase())
}

pub fn recognize_all(model: &Recognizer, store: &ParamStore, images: &[Image]) -> Result<Vec<String>> {
    images.iter().map(|im| greedy_decode(model, store, im)).collect()
}

/// Lowercase, alphanumerics only.
pub fn normalize_for_match(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Fraction of exact matches after [`normalize_for_match`].
pub fn word_accuracy<P: AsRef<str>, L: AsRef<str>>(preds: &[P], labels: &[L]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(contract_err!(
            "word accuracy over {} predictions and {} labels",
            preds.len(),
            labels.len()
        ));
    }
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| normalize_for_match(p.as_ref()) == normalize_for_match(l.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Where the recognizer's initial weights come from.
pub enum FinetuneInit<'a> {
    Scratch,
    /// Encoder arrays from a pretraining (or recognizer) checkpoint.
    Pretrained(&'a Checkpoint),
    /// Continue a recognizer checkpoint, optimizer state included.
    Resume(&'a Checkpoint),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneRow {
    pub step: u64,
    pub lr: f64,
    pub ce: f64,
}

impl FinetuneRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.step, self.lr, self.ce)
    }
}

pub struct FinetuneTrainer {
    pub cfg: RunConfig,
    pub model: Recognizer,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
}

impl FinetuneTrainer {
    pub fn new(cfg: &RunConfig, init: FinetuneInit) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(mix_str(cfg.seed, "recognizer"));
        let model = Recognizer::new(&mut store, &cfg.encoder, &cfg.recognizer, cfg.scales.largest())?;
        let mut optimizer = AdamW::new(&store, cfg.recognizer.optimizer);
        let mut step = 0;
        match init {
            FinetuneInit::Scratch => {}
            FinetuneInit::Pretrained(ckpt) => {
                let n = store.copy_prefix_from(ENCODER_PREFIX, &ckpt.param_store(), ENCODER_PREFIX)?;
                log::info!("initialized {n} encoder arrays from a {} checkpoint", ckpt.kind);
            }
            FinetuneInit::Resume(ckpt) => {
                if ckpt.kind != "recognizer" {
                    return Err(config_err!("cannot resume fine-tuning from a {:?} checkpoint", ckpt.kind));
                }
                let src = ckpt.param_store();
                store.copy_prefix_from(ENCODER_PREFIX, &src, ENCODER_PREFIX)?;
                store.copy_prefix_from(DECODER_PREFIX, &src, DECODER_PREFIX)?;
                optimizer.load_state(&store, &ckpt.optimizer)?;
                step = ckpt.step;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            optimizer,
            step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: "recognizer".into(),
            step: self.step,
            params: self.store.iter().map(|(_, n, v)| (n.to_string(), v.clone())).collect(),
            optimizer: self.optimizer.state_arrays(&self.store),
            config: self.cfg.snapshot(),
        }
    }

    fn plan(&self, n: usize) -> Result<(u64, u64, u64)> {
        let rc = &self.cfg.recognizer;
        let per_epoch = n.div_ceil(rc.batch_size) as u64;
        let total = per_epoch * rc.epochs as u64;
        let warmup = per_epoch * rc.warmup_epochs as u64;
        if total <= warmup {
            return Err(config_err!("{total} fine-tuning steps do not exceed {warmup} warm-up steps"));
        }
        Ok((per_epoch, total, warmup))
    }

    pub fn total_steps(&self, corpus_len: usize) -> Result<u64> {
        Ok(self.plan(corpus_len)?.1)
    }

    pub fn train_step(&mut self, corpus: &[TextSample]) -> Result<FinetuneRow> {
        let n = corpus.len();
        let (per_epoch, total, warmup) = self.plan(n)?;
        let rc = &self.cfg.recognizer;
        let lr = lr_schedule(self.step, total, warmup, rc.lr)?;
        let epoch = self.step / per_epoch;
        let within = (self.step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut sample_rng(self.cfg.seed, STREAM_ORDER, epoch));
        let start = within * rc.batch_size;
        let end = (start + rc.batch_size).min(n);
        let batch: Vec<TextSample> = order[start..end].iter().map(|&i| corpus[i].clone()).collect();
        let images: Vec<Image> = (start..end)
            .zip(&batch)
            .map(|(pos, s)| {
                let mut rng = sample_rng(self.cfg.seed, STREAM_AUGMENT, epoch * n as u64 + pos as u64);
                augment(&s.image, &mut rng, rc.augment)
            })
            .collect();
        let mut out = finetune_step(&batch, Some(&images), &self.model, &self.store)?;
        clip_grad_norm(&mut out.grads, rc.grad_clip);
        self.optimizer.step(&mut self.store, &out.grads, lr);
        self.step += 1;
        Ok(FinetuneRow {
            step: self.step,
            lr,
            ce: out.loss,
        })
    }
}

pub struct FinetuneOptions<'a> {
    pub out_dir: Option<&'a Path>,
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<FinetuneRow>,
}

pub fn run_finetune(
    corpus: &[TextSample],
    cfg: &RunConfig,
    init: FinetuneInit,
    opts: FinetuneOptions,
) -> Result<FinetuneOutcome> {
    if corpus.is_empty() {
        return Err(Error::Input("fine-tuning corpus is empty".into()));
    }
    for s in corpus {
        label_of(s)?;
    }
    let mut tr = FinetuneTrainer::new(cfg, init)?;
    let total = tr.total_steps(corpus.len())?;
    let end = opts.stop_after.unwrap_or(total).min(total);
    let mut file = match opts.out_dir {
        Some(out) => {
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let path = out.join(crate::pretrain::engine::METRICS_FILE);
            let mut kept = vec![FINETUNE_METRICS_HEADER.to_string()];
            if tr.step > 0 {
                if let Ok(text) = fs::read_to_string(&path) {
                    kept.extend(
                        text.lines()
                            .skip(1)
                            .filter(|l| {
                                l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= tr.step)
                            })
                            .map(str::to_string),
                    );
                }
            }
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            for l in kept {
                writeln!(f, "{l}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let mut rows = Vec::new();
    while tr.step < end {
        let row = match tr.train_step(corpus) {
            Ok(r) => r,
            Err(e @ Error::Numerical(_)) => {
                if let Some(out) = opts.out_dir {
                    tr.checkpoint()
                        .save(&out.join(crate::pretrain::engine::EMERGENCY_DIR), cfg.checkpoint_dtype)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some((f, path)) = file.as_mut() {
            writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(&*path, e))?;
        }
        rows.push(row);
        let every = cfg.recognizer.checkpoint_every;
        if let Some(out) = opts.out_dir {
            if every > 0 && tr.step % every == 0 && tr.step < end {
                tr.checkpoint()
                    .save(&out.join(crate::pretrain::engine::CHECKPOINT_DIR), cfg.checkpoint_dtype)?;
            }
        }
    }
    let checkpoint = tr.checkpoint();
    if let Some(out) = opts.out_dir {
        checkpoint.save(&out.join(crate::pretrain::engine::CHECKPOINT_DIR), cfg.checkpoint_dtype)?;
    }
    Ok(FinetuneOutcome {
        checkpoint,
        metrics: rows,
    })
}

/// Rebuilds a recognizer from a `recognizer` checkpoint, using the config
/// embedded in it.
pub fn load_recognizer(ckpt: &Checkpoint) -> Result<(RunConfig, Recognizer, ParamStore)> {
    if ckpt.kind != "recognizer" {
        return Err(config_err!("expected a recognizer checkpoint, found kind {:?}", ckpt.kind));
    }
    let cfg = RunConfig::from_snapshot(&ckpt.config)?;
    let mut store = ParamStore::new(0);
    let model = Recognizer::new(&mut store, &cfg.encoder, &cfg.recognizer, cfg.scales.largest())?;
    let src = ckpt.param_store();
    store.copy_prefix_from(ENCODER_PREFIX, &src, ENCODER_PREFIX)?;
    store.copy_prefix_from(DECODER_PREFIX, &src, DECODER_PREFIX)?;
    Ok((cfg, model, store))
}
