//! Dependency-free synthetic word images from the built-in bitmap font.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::font::{glyph, ink, GLYPH_H, GLYPH_W};
use super::{Image, TextBox, TextSample, MAX_LABEL_LEN};
use crate::error::{input_err, Result};
use crate::recognizer::Charset;
use crate::rng::{mix, mix_str, rng_from, sample_rng};

/// Ranges the renderer draws from; the seed picks concrete values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderStyle {
    /// Integer glyph magnification, inclusive range.
    pub glyph_scale: [u32; 2],
    pub max_rotation_deg: f64,
    /// Minimum |foreground − background|.
    pub min_contrast: f32,
    pub max_noise_sigma: f64,
    /// Final resize factor range applied to the rendered canvas.
    pub source_scale: [f64; 2],
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self {
            glyph_scale: [1, 4],
            max_rotation_deg: 15.0,
            min_contrast: 0.35,
            max_noise_sigma: 0.1,
            source_scale: [0.6, 1.6],
        }
    }
}

const SUPERSAMPLE: usize = 3;

/// Renders `text` deterministically from `(text, seed, style)`.
pub fn render_synthetic(text: &str, seed: u64, style: &RenderStyle) -> Result<TextSample> {
    let charset = Charset::default();
    let len = text.chars().count();
    if len == 0 || len > MAX_LABEL_LEN {
        return Err(input_err!("text length {len} outside 1..={MAX_LABEL_LEN}"));
    }
    if let Some(bad) = text.chars().find(|&c| glyph(c).is_none() || !charset.contains(c)) {
        return Err(input_err!("unsupported character {bad:?} in {text:?}"));
    }
    let mut rng = rng_from(mix_str(seed, text));

    let scale = rng.random_range(style.glyph_scale[0]..=style.glyph_scale[1].max(style.glyph_scale[0])) as f64;
    let angle = if style.max_rotation_deg > 0.0 {
        rng.random_range(-style.max_rotation_deg..=style.max_rotation_deg).to_radians()
    } else {
        0.0
    };
    let bg: f32 = rng.random_range(0.0..=1.0);
    let contrast: f32 = rng.random_range(style.min_contrast..=1.0f32.max(style.min_contrast));
    let fg = if bg > 0.5 { (bg - contrast).max(0.0) } else { (bg + contrast).min(1.0) };
    let sigma = rng.random_range(0.0..=style.max_noise_sigma.max(0.0));

    // text-space extent in unscaled font pixels
    let text_w = (len * (GLYPH_W + 1) - 1) as f64;
    let text_h = GLYPH_H as f64;
    let (sin, cos) = angle.sin_cos();
    let rot_w = (text_w * cos.abs() + text_h * sin.abs()) * scale;
    let rot_h = (text_w * sin.abs() + text_h * cos.abs()) * scale;
    let margin = |rng: &mut crate::rng::Rng| rng.random_range(1.0..=(1.0 + 2.0 * scale));
    let (ml, mr, mt, mb) = (margin(&mut rng), margin(&mut rng), margin(&mut rng), margin(&mut rng));
    let width = (rot_w + ml + mr).ceil() as usize;
    let height = (rot_h + mt + mb).ceil() as usize;
    let cx = ml + rot_w / 2.0;
    let cy = mt + rot_h / 2.0;

    let glyphs: Vec<_> = text.chars().map(|c| glyph(c).expect("checked")).collect();
    let coverage_at = |px: f64, py: f64| -> bool {
        // inverse-rotate into text space (unscaled font units, origin top-left)
        let dx = (px - cx) / scale;
        let dy = (py - cy) / scale;
        let tx = dx * cos + dy * sin + text_w / 2.0;
        let ty = -dx * sin + dy * cos + text_h / 2.0;
        if tx < 0.0 || ty < 0.0 {
            return false;
        }
        let (col, row) = (tx.floor() as usize, ty.floor() as usize);
        let cell = col / (GLYPH_W + 1);
        let inner = col % (GLYPH_W + 1);
        cell < glyphs.len() && inner < GLYPH_W && ink(glyphs[cell], row, inner)
    };

    let mut canvas = Image::filled(height, width, 1, bg);
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..height {
        for x in 0..width {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    hits += usize::from(coverage_at(px, py));
                }
            }
            if hits > 0 {
                let cov = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                canvas.set(y, x, 0, bg + (fg - bg) * cov);
                top = top.min(y);
                left = left.min(x);
                bottom = bottom.max(y + 1);
                right = right.max(x + 1);
            }
        }
    }
    let text_box = if top == usize::MAX {
        TextBox { top: 0, left: 0, bottom: height, right: width }
    } else {
        TextBox { top, left, bottom, right }
    };

    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for v in &mut canvas.data {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    canvas.clamp01();

    let f = rng.random_range(style.source_scale[0]..=style.source_scale[1].max(style.source_scale[0]));
    let src_h = ((height as f64 * f).round() as usize).max(4);
    let src_w = ((width as f64 * f).round() as usize).max(4);
    let mut image = canvas.resize(src_h, src_w);
    image.clamp01();
    let text_box = text_box.rescaled((height, width), (src_h, src_w));

    Ok(TextSample {
        image,
        label: Some(text.to_string()),
        text_box: Some(text_box),
        source_size: (src_h, src_w),
        name: None,
    })
}

const TEXT_STREAM: u64 = 0x7465_7874;

/// A random lowercase alphanumeric string with length in `len_range`.
pub fn random_word(rng: &mut crate::rng::Rng, len_range: (usize, usize)) -> String {
    let symbols = Charset::default();
    let len = rng.random_range(len_range.0..=len_range.1);
    (0..len)
        .map(|_| symbols.symbol(rng.random_range(0..symbols.symbol_count())).expect("in range"))
        .collect()
}

/// `count` rendered words of 1–10 characters, named `img_000000.pgm`, ….
pub fn synth_corpus(count: usize, seed: u64, style: &RenderStyle) -> Result<Vec<TextSample>> {
    synth_corpus_with_lengths(count, seed, style, (1, 10))
}

pub fn synth_corpus_with_lengths(
    count: usize,
    seed: u64,
    style: &RenderStyle,
    len_range: (usize, usize),
) -> Result<Vec<TextSample>> {
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, TEXT_STREAM, i as u64);
            let word = random_word(&mut rng, len_range);
            let mut sample = render_synthetic(&word, mix(seed, i as u64), style)?;
            sample.name = Some(format!("img_{i:06}.pgm"));
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_char_has_nonempty_box() {
        let s = render_synthetic("a", 0, &RenderStyle::default()).unwrap();
        assert_eq!(s.label.as_deref(), Some("a"));
        let b = s.text_box.unwrap();
        assert!(!b.is_empty());
        assert!(b.within(s.image.height, s.image.width));
        assert_eq!(s.source_size, s.image.dims());
    }

    #[test]
    fn rendering_is_deterministic() {
        let style = RenderStyle::default();
        let a = render_synthetic("hello42", 9, &style).unwrap();
        let b = render_synthetic("hello42", 9, &style).unwrap();
        assert_eq!(a.image.to_u8(), b.image.to_u8());
        let c = render_synthetic("hello42", 10, &style).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn invalid_text_is_rejected() {
        let style = RenderStyle::default();
        assert!(render_synthetic("", 0, &style).is_err());
        assert!(render_synthetic("Hello", 0, &style).is_err());
        assert!(render_synthetic("a b", 0, &style).is_err());
        assert!(render_synthetic(&"x".repeat(26), 0, &style).is_err());
        assert!(render_synthetic(&"x".repeat(25), 0, &style).is_ok());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let s = render_synthetic("zz9", 3, &RenderStyle::default()).unwrap();
        assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
