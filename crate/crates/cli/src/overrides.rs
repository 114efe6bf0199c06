//! Dotted `--section.key=value` arguments and config/seed resolution.

use std::ffi::OsString;
use std::path::Path;

use mnsp_core::{Error, Result, RunConfig};

pub const SEED_ENV: &str = "MNSP_SEED";

/// Splits dotted overrides (`--flags.mla=false`, `--pretrain.epochs 3`) from
/// the arguments clap understands. Only long options whose name contains a
/// dot are taken; everything else is passed through untouched.
pub fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(text) = arg.to_str() else {
            rest.push(arg);
            continue;
        };
        if text == "--" {
            rest.push(arg);
            rest.extend(iter.by_ref());
            break;
        }
        let Some(body) = text.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => iter
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| Error::Config(format!("override --{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Builds the run configuration: the config file (or the named profile),
/// then `--set`/dotted overrides in order, then the seed.
///
/// Seed precedence: `--seed`, then a `seed` key in the config file, then
/// `MNSP_SEED`, then 0.
pub fn resolve_config(
    config_path: Option<&Path>,
    profile: &str,
    overrides: &[(String, String)],
    seed_flag: Option<u64>,
) -> Result<RunConfig> {
    let (mut cfg, file_has_seed) = match config_path {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let has_seed = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .is_some_and(|v| v.get("seed").is_some());
            (cfg, has_seed)
        }
        None => (profile_config(profile)?, false),
    };
    let mut override_has_seed = false;
    for (k, v) in overrides {
        cfg.apply_override(k, v)?;
        override_has_seed |= k == "seed";
    }
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    } else if !file_has_seed && !override_has_seed {
        if let Some(seed) = env_seed()? {
            cfg.seed = seed;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn profile_config(name: &str) -> Result<RunConfig> {
    match name {
        "default" => Ok(RunConfig::default()),
        "tiny" => Ok(RunConfig::tiny()),
        other => Err(Error::Config(format!("unknown profile {other:?}; valid profiles: default, tiny"))),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn dotted_flags_are_pulled_out() {
        let (rest, ov) = split_overrides(os(&[
            "mnsp",
            "pretrain",
            "--flags.mla=false",
            "--out",
            "o",
            "--pretrain.epochs",
            "3",
            "--seed=4",
        ]))
        .unwrap();
        assert_eq!(rest, os(&["mnsp", "pretrain", "--out", "o", "--seed=4"]));
        assert_eq!(
            ov,
            vec![("flags.mla".into(), "false".into()), ("pretrain.epochs".into(), "3".into())]
        );
    }

    #[test]
    fn dangling_override_is_an_error() {
        assert!(split_overrides(os(&["mnsp", "--flags.mla"])).is_err());
    }

    #[test]
    fn arguments_after_double_dash_are_untouched() {
        let (rest, ov) = split_overrides(os(&["mnsp", "--", "--a.b=1"])).unwrap();
        assert!(ov.is_empty());
        assert_eq!(rest.len(), 3);
    }
}
