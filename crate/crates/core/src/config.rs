//! The run configuration document: one JSON object covering every module,
//! with defaults for omitted keys, rejection of unknown ones, and flat
//! dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::render::RenderStyle;
use crate::error::{config_err, Error, Result};
use crate::model::EncoderConfig;
use crate::pretrain::{Dtype, PretrainConfig};
use crate::recognizer::RecognizerConfig;
use crate::scale::ScaleSequence;

/// Version tag embedded in every artifact next to the config snapshot.
pub const FORMAT_VERSION: &str = "mnsp/1";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Explicit manifest; defaults to `manifest.tsv` inside the folder.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub scales: ScaleSequence,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub recognizer: RecognizerConfig,
    pub render: RenderStyle,
    pub data: DataPaths,
    pub checkpoint_dtype: Dtype,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scales: ScaleSequence::default(),
            encoder: EncoderConfig::desk(),
            pretrain: PretrainConfig::default(),
            recognizer: RecognizerConfig::default(),
            render: RenderStyle::default(),
            data: DataPaths::default(),
            checkpoint_dtype: Dtype::F64,
        }
    }
}

impl RunConfig {
    /// Small encoder and recognizer for tests and quick runs.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            recognizer: RecognizerConfig::tiny(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pretrain.validate()?;
        self.recognizer.validate()?;
        if self.scales.patch() != self.encoder.patch {
            return Err(config_err!(
                "scales.patch = {} but encoder.patch = {}",
                self.scales.patch(),
                self.encoder.patch
            ));
        }
        let g = self.scales.largest().grid();
        if g.0 > self.encoder.max_grid[0] || g.1 > self.encoder.max_grid[1] {
            log::warn!(
                "largest scale grid {:?} exceeds encoder.max_grid {:?}; positional table will be upsampled",
                g,
                self.encoder.max_grid
            );
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err!("{e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => config_err!("{}: {m}", path.display()),
            other => other,
        })
    }

    /// Applies `key=value` with a dotted key such as `pretrain.flags.mla`.
    /// Keys that do not start with a top-level section are looked up under
    /// `pretrain` (so `flags.mla` works). Values parse as JSON, falling back
    /// to a plain string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let segments: Vec<&str> = key.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(config_err!("malformed override key {key:?}"));
        }
        let path: Vec<&str> = if doc.get(segments[0]).is_some() {
            segments
        } else if doc["pretrain"].get(segments[0]).is_some() {
            std::iter::once("pretrain").chain(segments).collect()
        } else {
            return Err(config_err!("unknown configuration key {key:?}"));
        };
        let parsed: Value =
            serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let mut node = &mut doc;
        for (i, seg) in path.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| config_err!("unknown configuration key {key:?}"))?;
            // Optional fields serialize as null; they may be set but not descended into.
            let last = i + 1 == path.len();
            if !obj.contains_key(*seg) {
                return Err(config_err!("unknown configuration key {key:?}"));
            }
            if last {
                obj.insert((*seg).to_string(), parsed.clone());
                break;
            }
            node = obj.get_mut(*seg).expect("checked above");
        }
        *self = serde_json::from_value(doc)
            .map_err(|e| config_err!("override {key}={value}: {e}"))?;
        Ok(())
    }

    /// The document embedded in artifacts.
    pub fn snapshot(&self) -> Value {
        serde_json::json!({
            "format_version": FORMAT_VERSION,
            "config": self,
        })
    }

    /// Inverse of [`RunConfig::snapshot`].
    pub fn from_snapshot(v: &Value) -> Result<Self> {
        let cfg = v
            .get("config")
            .ok_or_else(|| config_err!("snapshot has no config"))?;
        serde_json::from_value(cfg.clone()).map_err(|e| config_err!("embedded config: {e}"))
    }
}
