//! `mnsp`: synthesize corpora, pretrain, fine-tune, evaluate and inspect.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure (including a failed gradient check).

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mnsp_core::{Error, TextBox};

use commands::{EvalArgs, FinetuneArgs, InitSource, PretrainArgs, VisualizeArgs};

#[derive(Parser)]
#[command(
    name = "mnsp",
    version,
    about = "Multi-scale next-scale-prediction pretraining for scene-text recognition",
    after_help = "Any configuration key can be overridden with a dotted flag, e.g. \
                  --flags.mla=false or --pretrain.epochs 3. MNSP_SEED supplies the seed \
                  when neither --seed nor the config file sets one."
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; omitted keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in starting point when no --config is given: `default` or `tiny`.
    #[arg(long, default_value = "default", conflicts_with = "config")]
    profile: String,
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` override; same as `--key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic labeled corpus (PGM images + manifest.tsv).
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain the encoder; writes metrics.csv, checkpoint/ and run.json.
    Pretrain {
        /// Corpus directory (defaults to data.train).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (with a checkpoint) once this many total steps are done.
        #[arg(long)]
        max_steps: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the recognizer from a pretrained encoder or from scratch.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Pretraining checkpoint whose encoder initializes the recognizer.
        #[arg(long, group = "init_source")]
        init: Option<PathBuf>,
        /// Random initialization (baseline).
        #[arg(long, group = "init_source")]
        from_scratch: bool,
        /// Continue a recognizer checkpoint.
        #[arg(long, group = "init_source")]
        resume: Option<PathBuf>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a recognizer checkpoint under an evaluation protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled corpus directory (defaults to data.eval of the checkpoint's config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// standard, shrink-pad or size-split.
        #[arg(long, default_value = "standard")]
        protocol: String,
        /// Shrink factor for shrink-pad.
        #[arg(long, default_value_t = 0.5)]
        factor: f64,
        /// Directory for report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the attention map of one query patch as CSV + PGM.
    VisualizeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Patch coordinate `row,col` in the encoder grid.
        #[arg(long, value_parser = parse_pair)]
        query: (usize, usize),
        /// Encoder layer (0-based); defaults to the last.
        #[arg(long)]
        layer: Option<usize>,
        /// Text box `top,left,bottom,right` in source-image pixels.
        #[arg(long = "box", value_parser = parse_box)]
        text_box: Option<TextBox>,
        /// Output stem; `.csv`, `.pgm` and `.json` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Corrupt one backward rule to confirm failures are reported.
        #[arg(long, hide = true)]
        inject_fault: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn parse_numbers(s: &str, n: usize) -> Result<Vec<usize>, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != n {
        return Err(format!("expected {n} comma-separated integers, got {s:?}"));
    }
    parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|_| format!("{p:?} is not a non-negative integer")))
        .collect()
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let v = parse_numbers(s, 2)?;
    Ok((v[0], v[1]))
}

fn parse_box(s: &str) -> Result<TextBox, String> {
    let v = parse_numbers(s, 4)?;
    Ok(TextBox {
        top: v[0],
        left: v[1],
        bottom: v[2],
        right: v[3],
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 1,
        Error::Input(_) | Error::Io { .. } | Error::Format { .. } => 2,
        Error::Numerical(_) => 3,
    }
}

impl ConfigArgs {
    fn resolve(&self, dotted: &[(String, String)], profile_override: Option<&str>) -> mnsp_core::Result<mnsp_core::RunConfig> {
        let mut all = Vec::with_capacity(self.set.len() + dotted.len());
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            all.push((k.to_string(), v.to_string()));
        }
        all.extend(dotted.iter().cloned());
        let profile = profile_override.unwrap_or(&self.profile);
        overrides::resolve_config(self.config.as_deref(), profile, &all, self.seed)
    }
}

fn reject_overrides(dotted: &[(String, String)], command: &str) -> mnsp_core::Result<()> {
    match dotted.first() {
        Some((k, _)) => Err(Error::Config(format!(
            "{command} takes its configuration from the checkpoint; override --{k} is not accepted"
        ))),
        None => Ok(()),
    }
}

fn run(cli: Cli, dotted: &[(String, String)]) -> mnsp_core::Result<bool> {
    match cli.command {
        Command::Synth {
            count,
            out,
            force,
            cfg,
        } => {
            let cfg = cfg.resolve(dotted, None)?;
            let stats = commands::synth(&cfg, count, &out, force)?;
            print!("{}", stats.render());
            println!("seed {}; written to {}", cfg.seed, out.display());
        }
        Command::Pretrain {
            data,
            out,
            resume,
            max_steps,
            cfg,
        } => {
            let cfg = cfg.resolve(dotted, None)?;
            commands::pretrain(
                &cfg,
                PretrainArgs {
                    data: data.as_deref(),
                    out: &out,
                    resume: resume.as_deref(),
                    max_steps,
                },
            )?;
        }
        Command::Finetune {
            data,
            out,
            init,
            from_scratch,
            resume,
            max_steps,
            cfg,
        } => {
            let source = match (init.as_deref(), resume.as_deref(), from_scratch) {
                (Some(p), _, _) => InitSource::Pretrained(p),
                (_, Some(p), _) => InitSource::Resume(p),
                (_, _, true) => InitSource::Scratch,
                _ => {
                    return Err(Error::Config(
                        "finetune needs one of --init <checkpoint>, --resume <checkpoint> or --from-scratch".into(),
                    ))
                }
            };
            let cfg = cfg.resolve(dotted, None)?;
            commands::finetune(
                &cfg,
                FinetuneArgs {
                    data: data.as_deref(),
                    out: &out,
                    init: source,
                    max_steps,
                },
            )?;
        }
        Command::Eval {
            checkpoint,
            data,
            protocol,
            factor,
            out,
        } => {
            reject_overrides(dotted, "eval")?;
            commands::eval(EvalArgs {
                checkpoint: &checkpoint,
                data: data.as_deref(),
                protocol: &protocol,
                factor,
                out: out.as_deref(),
            })?;
        }
        Command::VisualizeAttention {
            checkpoint,
            image,
            query,
            layer,
            text_box,
            out,
        } => {
            reject_overrides(dotted, "visualize-attention")?;
            commands::visualize(VisualizeArgs {
                checkpoint: &checkpoint,
                image: &image,
                query,
                layer,
                text_box,
                out: &out,
            })?;
        }
        Command::Gradcheck { inject_fault, cfg } => {
            // The suite is sized for the tiny profile unless told otherwise.
            let profile = (cfg.config.is_none() && cfg.profile == "default").then_some("tiny");
            let cfg = cfg.resolve(dotted, profile)?;
            return commands::gradcheck(&cfg, inject_fault);
        }
    }
    Ok(true)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let (args, dotted) = match overrides::split_overrides(std::env::args_os().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    init_logging(cli.verbose);
    match run(cli, &dotted) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
