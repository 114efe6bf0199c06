//! Cubic-convolution resampling. Token fields and images share the same
//! separable weight matrices: sample centers sit at `(i + 0.5) / n`
//! (align-corners false) and out-of-range taps clamp to the edge.

use crate::params::Matrix;

/// Keys cubic-convolution parameter. -0.5 reproduces polynomials up to degree two.
pub const CUBIC_A: f64 = -0.5;

pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// `n_out × n_in` matrix of 1-D bicubic weights.
///
/// With `antialias` set and `n_out < n_in`, the kernel is stretched by the
/// downscale factor so each output averages its whole footprint.
pub fn weights_1d(n_in: usize, n_out: usize, antialias: bool) -> Matrix {
    assert!(n_in > 0 && n_out > 0, "empty interpolation axis");
    let mut w = Matrix::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    let clamp = |i: i64| i.clamp(0, n_in as i64 - 1) as usize;
    if antialias && scale > 1.0 {
        let support = 2.0 * scale;
        for o in 0..n_out {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut total = 0.0;
            for i in lo..=hi {
                let k = cubic_kernel((i as f64 - center) / scale);
                if k != 0.0 {
                    w[[o, clamp(i)]] += k;
                    total += k;
                }
            }
            w.row_mut(o).mapv_inplace(|v| v / total);
        }
    } else {
        for o in 0..n_out {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as i64;
            for (off, dist) in [(-1i64, 1.0 + t), (0, t), (1, 1.0 - t), (2, 2.0 - t)] {
                w[[o, clamp(base + off)]] += cubic_kernel(dist);
            }
        }
    }
    w
}

/// Row-major grid resampling matrix (`rows_out·cols_out × rows_in·cols_in`),
/// the Kronecker product of the two 1-D weight matrices.
pub fn grid_weights(from: (usize, usize), to: (usize, usize), antialias: bool) -> Matrix {
    let wr = weights_1d(from.0, to.0, antialias);
    let wc = weights_1d(from.1, to.1, antialias);
    let mut out = Matrix::zeros((to.0 * to.1, from.0 * from.1));
    for ro in 0..to.0 {
        for co in 0..to.1 {
            let o = ro * to.1 + co;
            for ri in 0..from.0 {
                let a = wr[[ro, ri]];
                if a == 0.0 {
                    continue;
                }
                for ci in 0..from.1 {
                    out[[o, ri * from.1 + ci]] = a * wc[[co, ci]];
                }
            }
        }
    }
    out
}

/// Resamples an interleaved `h × w × c` plane with separable antialiased
/// bicubic filtering. Same-size requests return the input unchanged.
pub fn resize_plane(
    data: &[f32],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    if h == out_h && w == out_w {
        return data.to_vec();
    }
    let wr = weights_1d(h, out_h, true);
    let wc = weights_1d(w, out_w, true);
    // horizontal pass
    let mut tmp = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for xo in 0..out_w {
            for xi in 0..w {
                let k = wc[[xo, xi]];
                if k == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    tmp[(y * out_w + xo) * c + ch] += k * data[(y * w + xi) * c + ch] as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f32; out_h * out_w * c];
    for yo in 0..out_h {
        for yi in 0..h {
            let k = wr[[yo, yi]];
            if k == 0.0 {
                continue;
            }
            for xo in 0..out_w {
                for ch in 0..c {
                    let idx = (yo * out_w + xo) * c + ch;
                    out[idx] += (k * tmp[(yi * out_w + xo) * c + ch]) as f32;
                }
            }
        }
    }
    out
}
