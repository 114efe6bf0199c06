//! One function per subcommand. Each returns the process outcome; printing
//! of results goes to stdout, progress to the log.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mnsp_core::data::image::read_image;
use mnsp_core::data::{ingest_folder, synth_corpus, write_corpus};
use mnsp_core::eval::{attention_map, diffusion_metrics, emit_heatmap, run_protocol, LoadedRecognizer};
use mnsp_core::gradcheck::{run_gradcheck, GradcheckOptions};
use mnsp_core::pretrain::engine::CHECKPOINT_DIR;
use mnsp_core::pretrain::step::ENCODER_PREFIX;
use mnsp_core::pretrain::{run_pretraining, RunOptions};
use mnsp_core::recognizer::{load_recognizer, run_finetune, FinetuneInit, FinetuneOptions};
use mnsp_core::{Checkpoint, Encoder, Error, ParamStore, Result, RunConfig, TextBox, TextSample, FORMAT_VERSION};
use serde_json::json;

/// Sidecar written next to training outputs: the config snapshot and a summary.
pub const RUN_FILE: &str = "run.json";

/// Statistics file written into a synthetic corpus directory.
pub const SYNTH_FILE: &str = "synth.json";

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_corpus(dir: &Path, manifest: Option<&Path>, require_labels: bool) -> Result<Vec<TextSample>> {
    let (samples, skipped) = ingest_folder(dir, manifest, require_labels)?.collect_all()?;
    if skipped > 0 {
        log::warn!("skipped {skipped} undecodable images in {}", dir.display());
    }
    log::info!("loaded {} samples from {}", samples.len(), dir.display());
    Ok(samples)
}

fn data_dir(explicit: Option<&Path>, configured: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| configured.cloned())
        .ok_or_else(|| Error::Config(format!("no {what} data: pass --data or set data.{what} in the config")))
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    // Accept both a run directory and the checkpoint directory inside it.
    let nested = path.join(CHECKPOINT_DIR);
    if nested.is_dir() && !path.join(mnsp_core::pretrain::checkpoint::MANIFEST).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(&checkpoint_dir(path))
}

// ------------------------------------------------------------------ synth

#[derive(Debug, PartialEq)]
pub struct CorpusStats {
    pub count: usize,
    pub label_lengths: BTreeMap<usize, usize>,
    pub height_range: Option<(usize, usize)>,
    pub width_range: Option<(usize, usize)>,
}

impl CorpusStats {
    pub fn of(samples: &[TextSample]) -> Self {
        let mut label_lengths = BTreeMap::new();
        for s in samples {
            *label_lengths.entry(s.label_str().chars().count()).or_insert(0) += 1;
        }
        let range = |f: fn(&TextSample) -> usize| {
            let lo = samples.iter().map(f).min()?;
            let hi = samples.iter().map(f).max()?;
            Some((lo, hi))
        };
        Self {
            count: samples.len(),
            label_lengths,
            height_range: range(|s| s.image.height),
            width_range: range(|s| s.image.width),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("images: {}\n", self.count);
        let span = |r: Option<(usize, usize)>| r.map_or("-".to_string(), |(a, b)| format!("{a}..={b}"));
        out.push_str(&format!("height: {}\nwidth:  {}\n", span(self.height_range), span(self.width_range)));
        out.push_str("label length histogram:\n");
        let peak = self.label_lengths.values().copied().max().unwrap_or(0).max(1);
        for (len, n) in &self.label_lengths {
            let bar = "#".repeat((n * 40).div_ceil(peak));
            out.push_str(&format!("  {len:>2} {n:>6} {bar}\n"));
        }
        out
    }

    fn to_json(&self) -> serde_json::Value {
        json!({
            "count": self.count,
            "label_lengths": self.label_lengths,
            "height_range": self.height_range,
            "width_range": self.width_range,
        })
    }
}

pub fn synth(cfg: &RunConfig, count: usize, out: &Path, force: bool) -> Result<CorpusStats> {
    let occupied = out.is_dir()
        && fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
    if occupied && !force {
        return Err(Error::Config(format!(
            "{} exists and is not empty; pass --force to write into it",
            out.display()
        )));
    }
    let samples = synth_corpus(count, cfg.seed, &cfg.render)?;
    write_corpus(out, &samples)?;
    let stats = CorpusStats::of(&samples);
    let mut doc = cfg.snapshot();
    doc["stats"] = stats.to_json();
    write_json(&out.join(SYNTH_FILE), &doc)?;
    Ok(stats)
}

// --------------------------------------------------------------- pretrain

pub struct PretrainArgs<'a> {
    pub data: Option<&'a Path>,
    pub out: &'a Path,
    pub resume: Option<&'a Path>,
    pub max_steps: Option<u64>,
}

pub fn pretrain(cfg: &RunConfig, args: PretrainArgs) -> Result<()> {
    let dir = data_dir(args.data, cfg.data.train.as_ref(), "train")?;
    // Load everything that can fail before the output directory is touched.
    let corpus = load_corpus(&dir, cfg.data.manifest.as_deref(), false)?;
    if corpus.is_empty() {
        return Err(Error::Input(format!("no images in {}", dir.display())));
    }
    let resume = args.resume.map(load_checkpoint).transpose()?;
    let outcome = run_pretraining(
        &corpus,
        cfg,
        RunOptions {
            out_dir: Some(args.out),
            resume,
            stop_after: args.max_steps,
        },
    )?;
    let last = outcome.metrics.last();
    let mut doc = cfg.snapshot();
    doc["command"] = json!("pretrain");
    doc["samples"] = json!(corpus.len());
    doc["total_steps"] = json!(outcome.plan.total_steps);
    doc["step"] = json!(outcome.checkpoint.step);
    doc["final_losses"] = json!(last.map(|r| &r.losses));
    write_json(&args.out.join(RUN_FILE), &doc)?;
    match last {
        Some(r) => println!(
            "pretrained {} steps (of {}); last step {}: nsp {:.6} mim {:.6} mla {:.6} total {:.6}",
            outcome.metrics.len(),
            outcome.plan.total_steps,
            r.step,
            r.losses.nsp,
            r.losses.mim,
            r.losses.mla,
            r.losses.total
        ),
        None => println!("nothing to do: checkpoint already at step {}", outcome.checkpoint.step),
    }
    println!("checkpoint: {}", args.out.join(CHECKPOINT_DIR).display());
    Ok(())
}

// --------------------------------------------------------------- finetune

pub enum InitSource<'a> {
    Scratch,
    Pretrained(&'a Path),
    Resume(&'a Path),
}

pub struct FinetuneArgs<'a> {
    pub data: Option<&'a Path>,
    pub out: &'a Path,
    pub init: InitSource<'a>,
    pub max_steps: Option<u64>,
}

pub fn finetune(cfg: &RunConfig, args: FinetuneArgs) -> Result<()> {
    let dir = data_dir(args.data, cfg.data.train.as_ref(), "train")?;
    let corpus = load_corpus(&dir, cfg.data.manifest.as_deref(), true)?;
    if corpus.is_empty() {
        return Err(Error::Input(format!("no labeled images in {}", dir.display())));
    }
    let ckpt = match args.init {
        InitSource::Scratch => None,
        InitSource::Pretrained(p) | InitSource::Resume(p) => Some(load_checkpoint(p)?),
    };
    let init = match (&args.init, &ckpt) {
        (InitSource::Pretrained(_), Some(c)) => FinetuneInit::Pretrained(c),
        (InitSource::Resume(_), Some(c)) => FinetuneInit::Resume(c),
        _ => FinetuneInit::Scratch,
    };
    let outcome = run_finetune(
        &corpus,
        cfg,
        init,
        FinetuneOptions {
            out_dir: Some(args.out),
            stop_after: args.max_steps,
        },
    )?;
    let mut doc = cfg.snapshot();
    doc["command"] = json!("finetune");
    doc["samples"] = json!(corpus.len());
    doc["step"] = json!(outcome.checkpoint.step);
    doc["init"] = json!(match args.init {
        InitSource::Scratch => "scratch".to_string(),
        InitSource::Pretrained(p) => format!("pretrained:{}", p.display()),
        InitSource::Resume(p) => format!("resume:{}", p.display()),
    });
    doc["final_ce"] = json!(outcome.metrics.last().map(|r| r.ce));
    write_json(&args.out.join(RUN_FILE), &doc)?;
    match outcome.metrics.last() {
        Some(r) => println!("fine-tuned {} steps; last step {}: ce {:.6}", outcome.metrics.len(), r.step, r.ce),
        None => println!("nothing to do: checkpoint already at step {}", outcome.checkpoint.step),
    }
    println!("checkpoint: {}", args.out.join(CHECKPOINT_DIR).display());
    Ok(())
}

// ------------------------------------------------------------------- eval

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub protocol: &'a str,
    pub factor: f64,
    pub out: Option<&'a Path>,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    // Reject a bad protocol name before any loading work.
    if !mnsp_core::eval::PROTOCOLS.contains(&args.protocol) {
        return Err(Error::Config(format!(
            "unknown protocol {:?}; valid protocols: {}",
            args.protocol,
            mnsp_core::eval::PROTOCOLS.join(", ")
        )));
    }
    let ckpt = load_checkpoint(args.checkpoint)?;
    let (cfg, model, store) = load_recognizer(&ckpt)?;
    let dir = data_dir(args.data, cfg.data.eval.as_ref(), "eval")?;
    let corpus = load_corpus(&dir, None, true)?;
    let rec = LoadedRecognizer {
        model: &model,
        store: &store,
    };
    let mut report = run_protocol(args.protocol, &corpus, &rec, cfg.scales.largest(), args.factor)?;
    report.config = cfg.snapshot();
    print!("{}", report.summary());
    if let Some(out) = args.out {
        let (json, txt) = report.write(out)?;
        println!("report: {} {}", json.display(), txt.display());
    }
    Ok(())
}

// -------------------------------------------------------------- visualize

pub struct VisualizeArgs<'a> {
    pub checkpoint: &'a Path,
    pub image: &'a Path,
    pub query: (usize, usize),
    pub layer: Option<usize>,
    pub text_box: Option<TextBox>,
    pub out: &'a Path,
}

/// Encoder weights from either a pretraining or a recognizer checkpoint.
fn load_encoder(ckpt: &Checkpoint) -> Result<(RunConfig, Encoder, ParamStore)> {
    let cfg = RunConfig::from_snapshot(&ckpt.config)?;
    let mut store = ParamStore::new(0);
    let encoder = Encoder::new(&mut store, "encoder", &cfg.encoder)?;
    store.copy_prefix_from(ENCODER_PREFIX, &ckpt.param_store(), ENCODER_PREFIX)?;
    Ok((cfg, encoder, store))
}

pub fn visualize(args: VisualizeArgs) -> Result<()> {
    let ckpt = load_checkpoint(args.checkpoint)?;
    let (cfg, encoder, store) = load_encoder(&ckpt)?;
    let source = read_image(args.image)?;
    let size = cfg.scales.largest();
    let image = source.with_channels(cfg.encoder.channels).resize(size.height, size.width);
    let map = attention_map(&encoder, &store, &image, args.query, args.layer)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let files = emit_heatmap(&map, args.out)?;

    let whole = TextBox {
        top: 0,
        left: 0,
        bottom: map.weights.nrows(),
        right: map.weights.ncols(),
    };
    let entropy = diffusion_metrics(&map, &whole).entropy;
    println!(
        "query ({}, {}) layer {}: entropy {:.6} nats (uniform {:.6})",
        map.query.0,
        map.query.1,
        map.layer,
        entropy,
        (map.weights.len() as f64).ln()
    );
    let mut doc = cfg.snapshot();
    doc["command"] = json!("visualize-attention");
    doc["image"] = json!(args.image.display().to_string());
    doc["query"] = json!([map.query.0, map.query.1]);
    doc["layer"] = json!(map.layer);
    doc["entropy"] = json!(entropy);
    if let Some(b) = args.text_box {
        if b.is_empty() || !b.within(source.height, source.width) {
            return Err(Error::Input(format!(
                "text box {b:?} is not inside the {}x{} image",
                source.height, source.width
            )));
        }
        let cells = b.rescaled(source.dims(), (size.height, size.width)).to_patch_box(cfg.encoder.patch);
        let mass = diffusion_metrics(&map, &cells).in_box_mass;
        println!("in-box attention mass {mass:.6} over patch cells {cells:?}");
        doc["text_box"] = json!(b);
        doc["in_box_mass"] = json!(mass);
    }
    let meta = args.out.with_extension("json");
    write_json(&meta, &doc)?;
    println!("wrote {} {} {}", files.csv.display(), files.pgm.display(), meta.display());
    Ok(())
}

// -------------------------------------------------------------- gradcheck

/// Returns whether every check passed.
pub fn gradcheck(cfg: &RunConfig, inject_fault: bool) -> Result<bool> {
    let report = run_gradcheck(
        cfg,
        GradcheckOptions {
            seed: cfg.seed,
            inject_fault,
            ..GradcheckOptions::default()
        },
    )?;
    println!("format {FORMAT_VERSION}");
    print!("{}", report.table());
    Ok(report.all_passed())
}
