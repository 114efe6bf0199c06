//! On-disk checkpoints: a directory holding `manifest.json` plus raw
//! little-endian `params.bin` / `optim.bin`. Directories are written next to
//! the destination first and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Matrix, ParamStore};

pub const CHECKPOINT_FORMAT: &str = "mnsp-checkpoint/1";
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS_BIN: &str = "params.bin";
pub const OPTIM_BIN: &str = "optim.bin";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    file: String,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    kind: String,
    step: u64,
    dtype: Dtype,
    config: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `"pretrain"` or `"recognizer"`.
    pub kind: String,
    pub step: u64,
    pub params: Vec<(String, Matrix)>,
    pub optimizer: Vec<(String, Matrix)>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Parameters as a store, in saved order.
    pub fn param_store(&self) -> ParamStore {
        let mut s = ParamStore::new(0);
        for (n, m) in &self.params {
            s.insert(n, m.clone());
        }
        s
    }

    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let leaf = dir
            .file_name()
            .ok_or_else(|| Error::format(dir, "checkpoint path has no final component"))?
            .to_string_lossy()
            .into_owned();
        let tmp = parent.join(format!(".{leaf}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;

        let mut arrays = Vec::new();
        for (file, list) in [(PARAMS_BIN, &self.params), (OPTIM_BIN, &self.optimizer)] {
            let mut bytes = Vec::new();
            for (name, m) in list.iter() {
                arrays.push(ArrayEntry {
                    name: name.clone(),
                    shape: [m.nrows(), m.ncols()],
                    file: file.into(),
                    offset: bytes.len() as u64,
                });
                for &v in m.iter() {
                    match dtype {
                        Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                        Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
            let path = tmp.join(file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_FORMAT.into(),
            kind: self.kind.clone(),
            step: self.step,
            dtype,
            config: self.config.clone(),
            arrays,
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format(dir, e.to_string()))?;
        let path = tmp.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        if dir.exists() {
            let old = parent.join(format!(".{leaf}.old-{}", std::process::id()));
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
            fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        } else {
            fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format_version != CHECKPOINT_FORMAT {
            return Err(Error::format(
                &mpath,
                format!("unsupported format version {:?}", manifest.format_version),
            ));
        }
        let width = manifest.dtype.width();
        let mut blobs: Vec<(String, Vec<u8>)> = Vec::new();
        let mut params = Vec::new();
        let mut optimizer = Vec::new();
        for entry in &manifest.arrays {
            if !blobs.iter().any(|(f, _)| *f == entry.file) {
                if entry.file != PARAMS_BIN && entry.file != OPTIM_BIN {
                    return Err(Error::format(&mpath, format!("unknown data file {}", entry.file)));
                }
                let p: PathBuf = dir.join(&entry.file);
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                blobs.push((entry.file.clone(), bytes));
            }
            let bytes = &blobs.iter().find(|(f, _)| *f == entry.file).unwrap().1;
            let n = entry.shape[0] * entry.shape[1];
            let start = entry.offset as usize;
            let end = start + n * width;
            if end > bytes.len() {
                return Err(Error::format(
                    dir.join(&entry.file),
                    format!("array {} runs past the end of the file", entry.name),
                ));
            }
            let values: Vec<f64> = bytes[start..end]
                .chunks_exact(width)
                .map(|c| match manifest.dtype {
                    Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            let m = Matrix::from_shape_vec((entry.shape[0], entry.shape[1]), values)
                .expect("length checked above");
            if entry.file == PARAMS_BIN {
                params.push((entry.name.clone(), m));
            } else {
                optimizer.push((entry.name.clone(), m));
            }
        }
        Ok(Self {
            kind: manifest.kind,
            step: manifest.step,
            params,
            optimizer,
            config: manifest.config,
        })
    }
}
