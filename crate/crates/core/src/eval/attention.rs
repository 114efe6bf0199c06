//! Query-based attention maps over the encoder and simple diffusion metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::image::{write_pnm_bytes, Image};
use crate::data::TextBox;
use crate::error::{input_err, Error, Result};
use crate::model::Encoder;
use crate::params::{Matrix, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// Patch coordinate `(row, col)` of the query token.
    pub query: (usize, usize),
    /// Grid of weights over patch tokens, summing to 1.
    pub weights: Matrix,
    pub layer: usize,
    /// Pixel size of the encoded image.
    pub image_size: (usize, usize),
}

/// Head-averaged attention of the query patch token at `layer` (default:
/// last), with the `[CLS]` column dropped and the rest renormalized.
pub fn attention_map(
    encoder: &Encoder,
    store: &ParamStore,
    image: &Image,
    query: (usize, usize),
    layer: Option<usize>,
) -> Result<AttentionMap> {
    let p = encoder.cfg.patch;
    let grid = (image.height / p, image.width / p);
    if query.0 >= grid.0 || query.1 >= grid.1 {
        return Err(input_err!(
            "query ({}, {}) outside the {}x{} patch grid",
            query.0,
            query.1,
            grid.0,
            grid.1
        ));
    }
    let depth = encoder.blocks.len();
    let layer = layer.unwrap_or(depth - 1);
    if layer >= depth {
        return Err(input_err!("layer {layer} out of range; encoder has {depth} layers"));
    }
    let mut t = Tape::new(store);
    let out = encoder.forward(&mut t, image, None)?;
    let row = 1 + query.0 * grid.1 + query.1;
    let heads = &out.attention[layer];
    let n = grid.0 * grid.1;
    let mut w = vec![0.0; n];
    for &h in heads {
        let probs = t.attention_probs(h).expect("attention node");
        for (j, wj) in w.iter_mut().enumerate() {
            *wj += probs[[row, j + 1]];
        }
    }
    let total: f64 = w.iter().sum();
    let weights = Matrix::from_shape_vec(grid, w.into_iter().map(|v| v / total).collect())
        .expect("grid-sized buffer");
    Ok(AttentionMap {
        query,
        weights,
        layer,
        image_size: image.dims(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMetrics {
    /// Shannon entropy in nats.
    pub entropy: f64,
    /// Weight falling inside the text box.
    pub in_box_mass: f64,
}

/// `text_box` is in patch-grid coordinates (half-open).
pub fn diffusion_metrics(map: &AttentionMap, text_box: &TextBox) -> DiffusionMetrics {
    let mut entropy = 0.0;
    let mut mass = 0.0;
    for ((r, c), &w) in map.weights.indexed_iter() {
        if w > 0.0 {
            entropy -= w * w.ln();
        }
        if r >= text_box.top && r < text_box.bottom && c >= text_box.left && c < text_box.right {
            mass += w;
        }
    }
    DiffusionMetrics {
        entropy,
        in_box_mass: mass,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapFiles {
    pub csv: PathBuf,
    pub pgm: PathBuf,
}

/// Intensity of the query cell in the PGM; other cells use 0..=254.
pub const QUERY_MARKER: u8 = 255;

/// Renders the map at the source image size: min-max normalized,
/// nearest-neighbour upscaled, the query cell at [`QUERY_MARKER`]. A
/// constant map renders mid-gray.
pub fn heatmap_pixels(map: &AttentionMap) -> (usize, usize, Vec<u8>) {
    let (gh, gw) = map.weights.dim();
    let (h, w) = map.image_size;
    let min = map.weights.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: f64| -> u8 {
        if max - min <= 0.0 {
            127
        } else {
            ((v - min) / (max - min) * 254.0).round() as u8
        }
    };
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        let r = y * gh / h;
        for x in 0..w {
            let c = x * gw / w;
            px.push(if (r, c) == map.query {
                QUERY_MARKER
            } else {
                level(map.weights[[r, c]])
            });
        }
    }
    (h, w, px)
}

/// Writes `<stem>.csv` (row-major weights, one grid row per line) and
/// `<stem>.pgm`.
pub fn emit_heatmap(map: &AttentionMap, stem: &Path) -> Result<HeatmapFiles> {
    let csv = stem.with_extension("csv");
    let pgm = stem.with_extension("pgm");
    let mut text = String::new();
    for row in map.weights.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(text, "{}", cells.join(","));
    }
    std::fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;
    let (h, w, px) = heatmap_pixels(map);
    write_pnm_bytes(&pgm, "P5", w, h, &px)?;
    Ok(HeatmapFiles { csv, pgm })
}

/// Parses a heatmap CSV back into a grid.
pub fn read_heatmap_csv(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::format(path, format!("bad value {v:?}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::format(path, "ragged rows"));
    }
    Ok(Matrix::from_shape_vec((rows.len(), cols), rows.concat()).expect("rectangular"))
}
