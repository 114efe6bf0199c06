//! Synthetic text rendering, folder ingestion, scale-pair sampling and the
//! construction of the three training views.

pub mod augment;
pub mod font;
pub mod image;
pub mod ingest;
pub mod render;
pub mod views;

use serde::{Deserialize, Serialize};

pub use self::augment::augment;
pub use self::image::Image;
pub use self::ingest::{ingest_folder, write_corpus, FolderStream};
pub use self::render::{render_synthetic, synth_corpus, RenderStyle};
pub use self::views::{build_views, random_mask, sample_scale_pair, zoom_in, ScalePair, ViewBundle, ViewFlags};

pub const MAX_LABEL_LEN: usize = 25;

/// Tight text bounds in pixels, half-open: rows `top..bottom`, cols `left..right`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl TextBox {
    pub fn is_empty(&self) -> bool {
        self.bottom <= self.top || self.right <= self.left
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.top <= self.bottom && self.left <= self.right && self.bottom <= height && self.right <= width
    }

    /// Maps the box through a resize from `from` to `to` (both `(h, w)`),
    /// rounding outward.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> TextBox {
        let fy = to.0 as f64 / from.0 as f64;
        let fx = to.1 as f64 / from.1 as f64;
        TextBox {
            top: ((self.top as f64 * fy).floor() as usize).min(to.0),
            left: ((self.left as f64 * fx).floor() as usize).min(to.1),
            bottom: ((self.bottom as f64 * fy).ceil() as usize).min(to.0),
            right: ((self.right as f64 * fx).ceil() as usize).min(to.1),
        }
    }

    /// Patch cells touched by the box.
    pub fn to_patch_box(&self, patch: usize) -> TextBox {
        TextBox {
            top: self.top / patch,
            left: self.left / patch,
            bottom: self.bottom.div_ceil(patch),
            right: self.right.div_ceil(patch),
        }
    }
}

/// One text image. Synthetic samples know their text box; ingested ones may
/// lack a label (pretraining-only corpora).
#[derive(Clone, Debug, PartialEq)]
pub struct TextSample {
    pub image: Image,
    pub label: Option<String>,
    pub text_box: Option<TextBox>,
    /// `(h, w)` of the image before any resize.
    pub source_size: (usize, usize),
    pub name: Option<String>,
}

impl TextSample {
    pub fn label_str(&self) -> &str {
        self.label.as_deref().unwrap_or("")
    }
}
