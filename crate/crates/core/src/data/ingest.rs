//! Corpus directories: images plus a `filename<TAB>label` manifest.
//!
//! Synthetic corpora also carry `boxes.tsv` (`filename<TAB>top<TAB>left<TAB>bottom<TAB>right`)
//! so attention diagnostics can score text regions.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::image::read_image;
use super::{TextBox, TextSample, MAX_LABEL_LEN};
use crate::error::{input_err, Error, Result};
use crate::recognizer::Charset;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const BOXES_FILE: &str = "boxes.tsv";

const IMAGE_EXTENSIONS: [&str; 4] = ["pgm", "ppm", "pnm", "png"];

/// Lazily decodes the images listed by a corpus directory. Undecodable files
/// are skipped and counted.
pub struct FolderStream {
    dir: PathBuf,
    entries: std::vec::IntoIter<(String, Option<String>)>,
    boxes: HashMap<String, TextBox>,
    skipped: usize,
}

impl FolderStream {
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn remaining(&self) -> usize {
        self.entries.len()
    }

    /// Drains the stream, returning the samples and the skip count.
    pub fn collect_all(mut self) -> Result<(Vec<TextSample>, usize)> {
        let mut out = Vec::with_capacity(self.remaining());
        for s in self.by_ref() {
            out.push(s?);
        }
        Ok((out, self.skipped))
    }
}

impl Iterator for FolderStream {
    type Item = Result<TextSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (name, label) = self.entries.next()?;
            let path = self.dir.join(&name);
            match read_image(&path) {
                Ok(image) => {
                    return Some(Ok(TextSample {
                        source_size: image.dims(),
                        text_box: self.boxes.get(&name).copied(),
                        image,
                        label,
                        name: Some(name),
                    }))
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    self.skipped += 1;
                }
            }
        }
    }
}

/// Validates and normalizes (lowercases) a label.
pub fn normalize_label(label: &str, charset: &Charset) -> Result<String> {
    let lower = label.to_lowercase();
    let len = lower.chars().count();
    if len == 0 || len > MAX_LABEL_LEN {
        return Err(input_err!("label {label:?} length {len} outside 1..={MAX_LABEL_LEN}"));
    }
    if let Some(c) = lower.chars().find(|&c| !charset.contains(c)) {
        return Err(input_err!("label {label:?} contains unsupported symbol {c:?}"));
    }
    Ok(lower)
}

pub fn read_manifest(path: &Path, charset: &Charset) -> Result<Vec<(String, Option<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let name = parts.next().unwrap_or_default().to_string();
        let label = match parts.next() {
            Some(l) if !l.is_empty() => Some(
                normalize_label(l, charset)
                    .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?,
            ),
            _ => None,
        };
        out.push((name, label));
    }
    Ok(out)
}

fn read_boxes(path: &Path) -> Result<HashMap<String, TextBox>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (lineno, line) in text.lines().enumerate() {
        let fields: Vec<_> = line.split('\t').collect();
        let bad = || Error::format(path, format!("line {}: expected 5 fields", lineno + 1));
        if fields.len() != 5 {
            return Err(bad());
        }
        let n = |i: usize| fields[i].parse::<usize>().map_err(|_| bad());
        out.insert(
            fields[0].to_string(),
            TextBox { top: n(1)?, left: n(2)?, bottom: n(3)?, right: n(4)? },
        );
    }
    Ok(out)
}

/// Opens a corpus directory. `manifest` defaults to `<dir>/manifest.tsv`;
/// without a manifest all image files are listed in name order, which is
/// only allowed when labels are not required.
pub fn ingest_folder(dir: &Path, manifest: Option<&Path>, require_labels: bool) -> Result<FolderStream> {
    if !dir.is_dir() {
        return Err(input_err!("corpus directory {} does not exist", dir.display()));
    }
    let charset = Charset::default();
    let default_manifest = dir.join(MANIFEST_FILE);
    let manifest = manifest.map(Path::to_path_buf).or_else(|| default_manifest.exists().then_some(default_manifest));
    let entries = match manifest {
        Some(path) => {
            let entries = read_manifest(&path, &charset)?;
            if require_labels {
                if let Some((name, _)) = entries.iter().find(|(_, l)| l.is_none()) {
                    return Err(input_err!("{name} has no label in {}", path.display()));
                }
            }
            entries
        }
        None => {
            let mut names: Vec<String> = fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| {
                    Path::new(n)
                        .extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            names.sort();
            if require_labels && !names.is_empty() {
                return Err(input_err!("{} has images but no {MANIFEST_FILE}", dir.display()));
            }
            names.into_iter().map(|n| (n, None)).collect()
        }
    };
    Ok(FolderStream {
        dir: dir.to_path_buf(),
        entries: entries.into_iter(),
        boxes: read_boxes(&dir.join(BOXES_FILE))?,
        skipped: 0,
    })
}

/// Writes samples as PGM/PPM files plus manifest (and boxes when known).
/// Unnamed samples get `img_<index>.pgm`.
pub fn write_corpus(dir: &Path, samples: &[TextSample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut boxes = String::new();
    for (i, s) in samples.iter().enumerate() {
        let ext = if s.image.channels == 3 { "ppm" } else { "pgm" };
        let name = s.name.clone().unwrap_or_else(|| format!("img_{i:06}.{ext}"));
        s.image.write_pnm(&dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\t');
        manifest.push_str(s.label_str());
        manifest.push('\n');
        if let Some(b) = s.text_box {
            boxes.push_str(&format!("{name}\t{}\t{}\t{}\t{}\n", b.top, b.left, b.bottom, b.right));
        }
    }
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    if !boxes.is_empty() {
        let bpath = dir.join(BOXES_FILE);
        fs::write(&bpath, boxes).map_err(|e| Error::io(&bpath, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render::{synth_corpus, RenderStyle};

    #[test]
    fn corrupt_files_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_corpus(3, 5, &RenderStyle::default()).unwrap();
        write_corpus(dir.path(), &samples).unwrap();
        fs::write(dir.path().join("broken.pgm"), b"P5\n10 10\n255\nshort").unwrap();
        let mut manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        manifest.push_str("broken.pgm\tabc\n");
        fs::write(dir.path().join(MANIFEST_FILE), manifest).unwrap();

        let (got, skipped) = ingest_folder(dir.path(), None, true).unwrap().collect_all().unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(skipped, 1);
        for (a, b) in got.iter().zip(&samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.source_size, b.image.dims());
            assert_eq!(a.text_box, b.text_box);
        }
    }

    #[test]
    fn empty_directory_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let (got, skipped) = ingest_folder(dir.path(), None, true).unwrap().collect_all().unwrap();
        assert!(got.is_empty());
        assert_eq!(skipped, 0);
    }

    #[test]
    fn missing_manifest_with_required_labels_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_corpus(2, 1, &RenderStyle::default()).unwrap();
        write_corpus(dir.path(), &samples).unwrap();
        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(ingest_folder(dir.path(), None, true).is_err());
        let (got, _) = ingest_folder(dir.path(), None, false).unwrap().collect_all().unwrap();
        assert_eq!(got.len(), 2);
        assert!(got.iter().all(|s| s.label.is_none()));
    }

    #[test]
    fn bad_labels_are_input_errors() {
        let charset = Charset::default();
        assert_eq!(normalize_label("HeLLo", &charset).unwrap(), "hello");
        assert!(normalize_label("a-b", &charset).is_err());
        assert!(normalize_label(&"a".repeat(26), &charset).is_err());
    }
}
