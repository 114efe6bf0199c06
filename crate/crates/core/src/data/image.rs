//! Interleaved `f32` images with values in `[0, 1]`, plus PGM/PPM output.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{input_err, Error, Result};
use crate::interp::resize_plane;
use crate::params::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Antialiased bicubic resize; identity when the size is unchanged.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        Image {
            height,
            width,
            channels: self.channels,
            data: resize_plane(
                &self.data,
                self.height,
                self.width,
                self.channels,
                height,
                width,
            ),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        assert!(top + height <= self.height && left + width <= self.width);
        Image::from_fn(height, width, self.channels, |y, x, c| {
            self.get(top + y, left + x, c)
        })
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Channel-averaged single-channel copy.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, 1, |y, x, _| {
            (0..self.channels).map(|c| self.get(y, x, c)).sum::<f32>() / self.channels as f32
        })
    }

    /// Converts to `channels` channels (1 ↔ 3).
    pub fn with_channels(&self, channels: usize) -> Image {
        match (self.channels, channels) {
            (a, b) if a == b => self.clone(),
            (_, 1) => self.to_gray(),
            (1, n) => Image::from_fn(self.height, self.width, n, |y, x, _| self.get(y, x, 0)),
            (a, b) => panic!("unsupported channel conversion {a} -> {b}"),
        }
    }

    /// Non-overlapping `p × p` patches, row-major over the grid; each row is
    /// the patch flattened in (row, col, channel) order.
    pub fn patches(&self, p: usize) -> Result<Matrix> {
        if p == 0 || self.height % p != 0 || self.width % p != 0 {
            return Err(input_err!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.height,
                self.width
            ));
        }
        let (rows, cols) = (self.height / p, self.width / p);
        let dim = p * p * self.channels;
        let mut out = Matrix::zeros((rows * cols, dim));
        for gr in 0..rows {
            for gc in 0..cols {
                let mut row = out.row_mut(gr * cols + gc);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..self.channels {
                            row[k] = self.get(gr * p + dy, gc * p + dx, c) as f64;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Image {
        Image {
            height,
            width,
            channels,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    /// Writes binary PGM (1 channel) or PPM (3 channels).
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(input_err!("cannot write a {c}-channel image as PNM")),
        };
        write_pnm_bytes(path, magic, self.width, self.height, &self.to_u8())
    }
}

/// Writes `P5`/`P6` with the exact header `<magic>\n<w> <h>\n255\n`.
pub fn write_pnm_bytes(
    path: &Path,
    magic: &str,
    width: usize,
    height: usize,
    bytes: &[u8],
) -> Result<()> {
    let mut buf = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(bytes);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Decodes PGM, PPM or PNG into a 1- or 3-channel image.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let color = img.color();
    if color.has_color() {
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Image::from_u8(h as usize, w as usize, 3, rgb.as_raw()))
    } else {
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Ok(Image::from_u8(h as usize, w as usize, 1, gray.as_raw()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_are_row_major() {
        let img = Image::from_fn(4, 8, 1, |y, x, _| (y * 8 + x) as f32);
        let p = img.patches(4).unwrap();
        assert_eq!(p.dim(), (2, 16));
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[1, 0]], 4.0);
        assert_eq!(p[[0, 5]], 9.0);
        assert!(img.patches(3).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = Image::from_fn(3, 5, 1, |y, x, _| ((y * 5 + x) * 17) as f32 / 255.0);
        img.write_pnm(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n255\n"));
        let back = read_image(&path).unwrap();
        assert_eq!(back, img);
    }
}
