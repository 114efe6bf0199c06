//! Scale-pair sampling and the three training views of one image.

use rand::Rng as _;

use super::{augment, Image, TextSample};
use crate::error::Result;
use crate::model::MaskPattern;
use crate::rng::Rng;
use crate::scale::{ScaleSequence, ScaleSpec, SCALE_COUNT};

pub const ZOOM_MIN: f64 = 0.6;
pub const ZOOM_MAX: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScalePair {
    /// `k` in `1..=3`.
    pub k: usize,
    pub small: ScaleSpec,
    pub large: ScaleSpec,
}

/// Draws an adjacent pair `(s_k, s_{k+1})` with `k` uniform over `1..=3`.
pub fn sample_scale_pair(seq: &ScaleSequence, rng: &mut Rng) -> ScalePair {
    let k = rng.random_range(1..SCALE_COUNT);
    let (small, large) = seq.pair(k);
    ScalePair { k, small, large }
}

/// Crop rectangle `(top, left, height, width)` in source pixels.
pub type CropRect = (usize, usize, usize, usize);

/// Random crop covering 60–90% of each side, resized to `target`. When
/// disabled this is a plain resize and `rng` is untouched.
pub fn zoom_in(image: &Image, rng: &mut Rng, enabled: bool, target: ScaleSpec) -> (Image, CropRect) {
    if !enabled {
        let full = (0, 0, image.height, image.width);
        return (image.resize(target.height, target.width), full);
    }
    let fh = rng.random_range(ZOOM_MIN..=ZOOM_MAX);
    let fw = rng.random_range(ZOOM_MIN..=ZOOM_MAX);
    let ch = ((image.height as f64 * fh).round() as usize).clamp(1, image.height);
    let cw = ((image.width as f64 * fw).round() as usize).clamp(1, image.width);
    let top = rng.random_range(0..=image.height - ch);
    let left = rng.random_range(0..=image.width - cw);
    let crop = image.crop(top, left, ch, cw);
    let mut out = crop.resize(target.height, target.width);
    out.clamp01();
    (out, (top, left, ch, cw))
}

pub fn random_mask(n_tokens: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPattern> {
    MaskPattern::random(n_tokens, ratio, rng)
}

/// Toggles for view construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewFlags {
    pub augment: bool,
    pub zoom_in: bool,
}

impl Default for ViewFlags {
    fn default() -> Self {
        Self {
            augment: true,
            zoom_in: true,
        }
    }
}

/// The views one pretraining step consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBundle {
    pub pair: ScalePair,
    pub view_small: Image,
    pub view_large: Image,
    /// Zoom-in view at the largest scale; the encoder only sees its
    /// unmasked patches.
    pub view_masked: Image,
    /// Clean copy of `view_masked`, fed to the teacher.
    pub target_view: Image,
    pub mask: MaskPattern,
}

impl ViewBundle {
    pub fn pair_index(&self) -> usize {
        self.pair.k
    }
}

/// Builds the small, large and masked zoom-in views of `sample`.
/// Randomness is consumed in a fixed order: pair, small-view augmentation,
/// large-view augmentation, zoom crop, mask.
pub fn build_views(
    sample: &TextSample,
    seq: &ScaleSequence,
    rng: &mut Rng,
    flags: ViewFlags,
    mask_ratio: f64,
    channels: usize,
) -> Result<ViewBundle> {
    let image = sample.image.with_channels(channels);
    let pair = sample_scale_pair(seq, rng);
    let small = image.resize(pair.small.height, pair.small.width);
    let large = image.resize(pair.large.height, pair.large.width);
    let view_small = augment(&small, rng, flags.augment);
    let view_large = augment(&large, rng, flags.augment);
    let s4 = seq.largest();
    let (view_masked, _) = zoom_in(&image, rng, flags.zoom_in, s4);
    let mask = random_mask(s4.token_count(), mask_ratio, rng)?;
    Ok(ViewBundle {
        pair,
        view_small,
        view_large,
        target_view: view_masked.clone(),
        view_masked,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn pairs_double() {
        let seq = ScaleSequence::default();
        let mut rng = rng_from(3);
        for _ in 0..200 {
            let p = sample_scale_pair(&seq, &mut rng);
            assert_eq!(p.large.height, 2 * p.small.height);
            assert_eq!(p.large.width, 2 * p.small.width);
            assert_eq!(p.large.token_count(), 4 * p.small.token_count());
        }
    }

    #[test]
    fn zoom_disabled_on_target_size_is_identity() {
        let img = Image::from_fn(32, 128, 1, |y, x, _| ((x + y) % 7) as f32 / 7.0);
        let (out, _) = zoom_in(&img, &mut rng_from(0), false, ScaleSequence::default().largest());
        assert_eq!(out, img);
    }

    #[test]
    fn zoom_enabled_hits_target_size() {
        let img = Image::from_fn(20, 90, 1, |y, x, _| ((x * y) % 5) as f32 / 5.0);
        let (out, _) = zoom_in(&img, &mut rng_from(8), true, ScaleSequence::default().largest());
        assert_eq!(out.dims(), (32, 128));
    }
}
