//! Scale-shift stress tests and size-split grouping over a recognizer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::FORMAT_VERSION;
use crate::data::image::Image;
use crate::data::TextSample;
use crate::error::{config_err, input_err, Error, Result};
use crate::params::ParamStore;
use crate::recognizer::{greedy_decode, word_accuracy, Recognizer};
use crate::scale::ScaleSpec;

/// Anything that maps an image to a string.
pub trait Recognize {
    fn recognize(&self, image: &Image) -> Result<String>;
}

impl<F: Fn(&Image) -> Result<String>> Recognize for F {
    fn recognize(&self, image: &Image) -> Result<String> {
        self(image)
    }
}

/// A recognizer with its parameters.
pub struct LoadedRecognizer<'a> {
    pub model: &'a Recognizer,
    pub store: &'a ParamStore,
}

impl Recognize for LoadedRecognizer<'_> {
    fn recognize(&self, image: &Image) -> Result<String> {
        greedy_decode(self.model, self.store, image)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub format_version: String,
    pub protocol: String,
    pub accuracy: BTreeMap<String, f64>,
    pub deltas: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    /// Run configuration the report was produced under.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl ProtocolReport {
    fn new(protocol: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION.into(),
            protocol: protocol.into(),
            accuracy: BTreeMap::new(),
            deltas: BTreeMap::new(),
            counts: BTreeMap::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn summary(&self) -> String {
        let mut s = format!("protocol: {}\n", self.protocol);
        for (g, acc) in &self.accuracy {
            let n = self.counts.get(g).copied().unwrap_or(0);
            let _ = writeln!(s, "  {g:<10} accuracy {:>7.2}%  (n = {n})", acc * 100.0);
        }
        for (d, v) in &self.deltas {
            let _ = writeln!(s, "  delta {d:<16} {:+.2} pts", v * 100.0);
        }
        s
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.summary()).map_err(|e| Error::io(&txt, e))?;
        Ok((json, txt))
    }
}

fn labels(corpus: &[&TextSample]) -> Result<Vec<String>> {
    corpus
        .iter()
        .map(|s| {
            s.label
                .clone()
                .ok_or_else(|| input_err!("evaluation sample {:?} has no label", s.name))
        })
        .collect()
}

fn accuracy_on(samples: &[&TextSample], images: &[Image], rec: &impl Recognize) -> Result<f64> {
    let preds = images
        .iter()
        .map(|im| rec.recognize(im))
        .collect::<Result<Vec<_>>>()?;
    word_accuracy(&preds, &labels(samples)?)
}

fn at_size(s: &TextSample, size: ScaleSpec) -> Image {
    s.image.resize(size.height, size.width)
}

/// Plain accuracy at the evaluation size.
pub fn standard_protocol(corpus: &[TextSample], rec: &impl Recognize, size: ScaleSpec) -> Result<ProtocolReport> {
    if corpus.is_empty() {
        return Err(input_err!("empty evaluation corpus"));
    }
    let samples: Vec<&TextSample> = corpus.iter().collect();
    let images: Vec<Image> = corpus.iter().map(|s| at_size(s, size)).collect();
    let mut r = ProtocolReport::new("standard");
    r.accuracy.insert("standard".into(), accuracy_on(&samples, &images, rec)?);
    r.counts.insert("standard".into(), corpus.len());
    Ok(r)
}

/// Scales `image` by `factor` per side and centers it on a black canvas of
/// the original size. `factor == 1` returns the image unchanged.
pub fn shrink_pad(image: &Image, factor: f64) -> Result<Image> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(config_err!("shrink factor must lie in (0, 1], got {factor}"));
    }
    if factor == 1.0 {
        return Ok(image.clone());
    }
    let (h, w) = image.dims();
    let sh = ((h as f64 * factor).round() as usize).clamp(1, h);
    let sw = ((w as f64 * factor).round() as usize).clamp(1, w);
    let small = image.resize(sh, sw);
    let (top, left) = ((h - sh) / 2, (w - sw) / 2);
    let mut out = Image::new(h, w, image.channels);
    for y in 0..sh {
        for x in 0..sw {
            for c in 0..image.channels {
                out.set(top + y, left + x, c, small.get(y, x, c));
            }
        }
    }
    Ok(out)
}

pub fn shrink_pad_protocol(
    corpus: &[TextSample],
    rec: &impl Recognize,
    factor: f64,
    size: ScaleSpec,
) -> Result<ProtocolReport> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(config_err!("shrink factor must lie in (0, 1], got {factor}"));
    }
    if corpus.is_empty() {
        return Err(input_err!("empty evaluation corpus"));
    }
    let samples: Vec<&TextSample> = corpus.iter().collect();
    let standard: Vec<Image> = corpus.iter().map(|s| at_size(s, size)).collect();
    let shrunk = standard
        .iter()
        .map(|im| shrink_pad(im, factor))
        .collect::<Result<Vec<_>>>()?;
    let a_std = accuracy_on(&samples, &standard, rec)?;
    let a_shr = accuracy_on(&samples, &shrunk, rec)?;
    let mut r = ProtocolReport::new("shrink-pad");
    r.accuracy.insert("standard".into(), a_std);
    r.accuracy.insert("shrunk".into(), a_shr);
    r.deltas.insert("shrunk".into(), a_shr - a_std);
    r.counts.insert("standard".into(), corpus.len());
    r.counts.insert("shrunk".into(), corpus.len());
    Ok(r)
}

/// Indices of the smaller-area and larger-area halves. Sorting is stable,
/// so equal areas keep ingestion order; an odd sample goes to the large half.
pub fn size_split(corpus: &[TextSample]) -> Result<(Vec<usize>, Vec<usize>)> {
    if corpus.len() < 2 {
        return Err(input_err!("size split needs at least 2 samples, got {}", corpus.len()));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.sort_by_key(|&i| {
        let (h, w) = corpus[i].source_size;
        h * w
    });
    let half = corpus.len() / 2;
    Ok((order[..half].to_vec(), order[half..].to_vec()))
}

pub fn size_split_protocol(corpus: &[TextSample], rec: &impl Recognize, size: ScaleSpec) -> Result<ProtocolReport> {
    let (small, large) = size_split(corpus)?;
    let mut r = ProtocolReport::new("size-split");
    for (group, idx) in [("small", &small), ("large", &large)] {
        let samples: Vec<&TextSample> = idx.iter().map(|&i| &corpus[i]).collect();
        let images: Vec<Image> = samples.iter().map(|s| at_size(s, size)).collect();
        r.accuracy.insert(group.into(), accuracy_on(&samples, &images, rec)?);
        r.counts.insert(group.into(), idx.len());
    }
    r.deltas
        .insert("large_minus_small".into(), r.accuracy["large"] - r.accuracy["small"]);
    Ok(r)
}

/// Protocol names accepted by [`run_protocol`].
pub const PROTOCOLS: [&str; 3] = ["standard", "shrink-pad", "size-split"];

pub fn run_protocol(
    name: &str,
    corpus: &[TextSample],
    rec: &impl Recognize,
    size: ScaleSpec,
    shrink_factor: f64,
) -> Result<ProtocolReport> {
    match name {
        "standard" => standard_protocol(corpus, rec, size),
        "shrink-pad" => shrink_pad_protocol(corpus, rec, shrink_factor, size),
        "size-split" => size_split_protocol(corpus, rec, size),
        other => Err(config_err!(
            "unknown protocol {other:?}; valid protocols: {}",
            PROTOCOLS.join(", ")
        )),
    }
}
