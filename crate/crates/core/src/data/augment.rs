//! Photometric and small geometric jitter applied to the scale-pair views.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::Image;
use crate::rng::Rng;

const APPLY_PROB: f64 = 0.5;
pub const MAX_JITTER: f32 = 0.2;
pub const MAX_BLUR_SIGMA: f64 = 1.0;
pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_NOISE_SIGMA: f64 = 0.05;

/// Applies an independent random subset of {brightness/contrast jitter,
/// Gaussian blur, small rotation, additive noise}, then clamps to `[0, 1]`.
/// When `enabled` is false the image is returned unchanged and `rng` is not
/// touched.
pub fn augment(image: &Image, rng: &mut Rng, enabled: bool) -> Image {
    if !enabled {
        return image.clone();
    }
    let mut out = image.clone();
    if rng.random_bool(APPLY_PROB) {
        let brightness = rng.random_range(1.0 - MAX_JITTER..=1.0 + MAX_JITTER);
        let contrast = rng.random_range(1.0 - MAX_JITTER..=1.0 + MAX_JITTER);
        let mean = out.data.iter().sum::<f32>() / out.data.len().max(1) as f32;
        for v in &mut out.data {
            *v = ((*v - mean) * contrast + mean) * brightness;
        }
    }
    if rng.random_bool(APPLY_PROB) {
        let sigma = rng.random_range(0.1..=MAX_BLUR_SIGMA);
        out = gaussian_blur(&out, sigma);
    }
    if rng.random_bool(APPLY_PROB) {
        let deg = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        out = rotate(&out, deg.to_radians());
    }
    if rng.random_bool(APPLY_PROB) {
        let sigma = rng.random_range(0.0..=MAX_NOISE_SIGMA);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            for v in &mut out.data {
                *v += noise.sample(rng) as f32;
            }
        }
    }
    out.clamp01();
    out
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, c) = (image.height as i64, image.width as i64, image.channels);
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(src.height, src.width, c, |y, x, ch| {
            let mut acc = 0.0;
            for (k, i) in kernel.iter().zip(-radius..=radius) {
                let (yy, xx) = if horizontal {
                    (y as i64, (x as i64 + i).clamp(0, w - 1))
                } else {
                    ((y as i64 + i).clamp(0, h - 1), x as i64)
                };
                acc += k * src.get(yy as usize, xx as usize, ch) as f64;
            }
            acc as f32
        })
    };
    let tmp = pass(image, true);
    pass(&tmp, false)
}

/// Bilinear rotation about the image center, sampling clamped to the edge.
pub fn rotate(image: &Image, angle: f64) -> Image {
    let (sin, cos) = angle.sin_cos();
    let cy = image.height as f64 / 2.0;
    let cx = image.width as f64 / 2.0;
    Image::from_fn(image.height, image.width, image.channels, |y, x, c| {
        let dx = x as f64 + 0.5 - cx;
        let dy = y as f64 + 0.5 - cy;
        let sx = dx * cos + dy * sin + cx - 0.5;
        let sy = -dx * sin + dy * cos + cy - 0.5;
        sample_bilinear(image, sy, sx, c)
    })
}

fn sample_bilinear(image: &Image, y: f64, x: f64, c: usize) -> f32 {
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let y = clamp(y, image.height);
    let x = clamp(x, image.width);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(image.height - 1), (x0 + 1).min(image.width - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = image.get(y0, x0, c) * (1.0 - fx) + image.get(y0, x1, c) * fx;
    let bot = image.get(y1, x0, c) * (1.0 - fx) + image.get(y1, x1, c) * fx;
    top * (1.0 - fy) + bot * fy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn sample_image() -> Image {
        Image::from_fn(16, 40, 1, |y, x, _| ((y * 3 + x * 7) % 11) as f32 / 10.0)
    }

    #[test]
    fn disabled_is_identity() {
        let img = sample_image();
        let mut rng = rng_from(1);
        assert_eq!(augment(&img, &mut rng, false), img);
    }

    #[test]
    fn enabled_is_deterministic_and_clamped() {
        let img = sample_image();
        for seed in 0..20 {
            let a = augment(&img, &mut rng_from(seed), true);
            let b = augment(&img, &mut rng_from(seed), true);
            assert_eq!(a, b);
            assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = sample_image();
        let r = rotate(&img, 0.0);
        for (a, b) in r.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
