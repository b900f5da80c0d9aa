//! Bicubic resampling compatible with MATLAB `imresize(..., 'bicubic')`:
//! Keys cubic with `a = -0.5`, half-pixel aligned sampling grid, kernel
//! stretched by `1/scale` when shrinking (antialiasing), and symmetric
//! reflection at the borders.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::Image;

/// Positive rational resize factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Factor {
    pub num: usize,
    pub den: usize,
}

impl Factor {
    pub fn new(num: usize, den: usize) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidArgument(format!("resize factor {num}/{den} must be positive")));
        }
        Ok(Factor { num, den })
    }

    pub fn up(r: usize) -> Self {
        Factor { num: r.max(1), den: 1 }
    }

    pub fn down(r: usize) -> Self {
        Factor { num: 1, den: r.max(1) }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `ceil(len * factor)`, in exact integer arithmetic.
    pub fn output_len(&self, len: usize) -> usize {
        (len * self.num).div_ceil(self.den)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    let ax2 = ax * ax;
    let ax3 = ax2 * ax;
    if ax <= 1.0 {
        1.5 * ax3 - 2.5 * ax2 + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Source taps and normalized weights for each output sample along one
/// axis.
#[derive(Clone, Debug)]
pub struct Contributions {
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl Contributions {
    pub fn new(in_len: usize, out_len: usize, scale: f64) -> Self {
        let shrink = scale < 1.0;
        let width = if shrink { 4.0 / scale } else { 4.0 };
        let kernel = |x: f64| if shrink { scale * cubic(scale * x) } else { cubic(x) };
        let span = width.ceil() as i64 + 2;
        let mirror = |i: i64| -> usize {
            // Half-sample symmetric extension: ..., 1, 0 | 0, 1, ... | n-1, n-1, n-2, ...
            let n = in_len as i64;
            let period = 2 * n;
            let m = i.rem_euclid(period);
            (if m < n { m } else { period - 1 - m }) as usize
        };
        let taps = (1..=out_len)
            .map(|x| {
                // 1-based coordinates, as in the reference implementation.
                let u = x as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
                let left = (u - width / 2.0).floor() as i64;
                let raw: Vec<(i64, f64)> = (0..span).map(|j| (left + j, kernel(u - (left + j) as f64))).collect();
                let total: f64 = raw.iter().map(|(_, w)| w).sum();
                raw.into_iter()
                    .filter(|&(_, w)| w != 0.0)
                    .map(|(i, w)| (mirror(i - 1), w / total))
                    .collect()
            })
            .collect();
        Contributions { taps }
    }
}

fn resize_rows(img: &Image, contrib: &Contributions) -> Image {
    let (c, _, w) = img.dims();
    let out_h = contrib.taps.len();
    let mut out = Image::new(c, out_h, w);
    for ch in 0..c {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        let mut acc = vec![0.0f64; w];
        for (y, taps) in contrib.taps.iter().enumerate() {
            acc.fill(0.0);
            for &(sy, wt) in taps {
                for (a, &v) in acc.iter_mut().zip(&src[sy * w..(sy + 1) * w]) {
                    *a += wt * v as f64;
                }
            }
            for (d, a) in dst[y * w..(y + 1) * w].iter_mut().zip(&acc) {
                *d = *a as f32;
            }
        }
    }
    out
}

fn resize_cols(img: &Image, contrib: &Contributions) -> Image {
    let (c, h, w) = img.dims();
    let out_w = contrib.taps.len();
    let mut out = Image::new(c, h, out_w);
    for ch in 0..c {
        let src = img.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (x, taps) in contrib.taps.iter().enumerate() {
                let v: f64 = taps.iter().map(|&(sx, wt)| wt * row[sx] as f64).sum();
                dst[y * out_w + x] = v as f32;
            }
        }
    }
    out
}

/// Resizes by `factor` along both axes; output size is
/// `ceil(input * factor)`. Height is resampled first, then width.
pub fn resize_bicubic(img: &Image, factor: Factor) -> Result<Image> {
    let (_, h, w) = img.dims();
    let (oh, ow) = (factor.output_len(h), factor.output_len(w));
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!(
            "resizing {h}x{w} by {factor} gives an empty image"
        )));
    }
    let scale = factor.as_f64();
    let rows = resize_rows(img, &Contributions::new(h, oh, scale));
    Ok(resize_cols(&rows, &Contributions::new(w, ow, scale)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_partition_unity() {
        for (n, f) in [(17, Factor::down(2)), (17, Factor::down(3)), (16, Factor::down(4)), (9, Factor::up(3))] {
            let c = Contributions::new(n, f.output_len(n), f.as_f64());
            for taps in &c.taps {
                let s: f64 = taps.iter().map(|t| t.1).sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(taps.iter().all(|t| t.0 < n));
            }
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let img = Image::from_fn(3, 7, 5, |c, y, x| ((c * 11 + y * 5 + x * 3) % 13) as f32 / 13.0);
        let out = resize_bicubic(&img, Factor::new(1, 1).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_is_preserved() {
        let img = Image::filled(1, 12, 9, 0.37);
        for f in [Factor::down(2), Factor::down(3), Factor::down(4), Factor::up(2), Factor::new(2, 3).unwrap()] {
            let out = resize_bicubic(&img, f).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-6), "{f}");
        }
    }

    #[test]
    fn output_size_is_ceiling() {
        let img = Image::filled(1, 10, 7, 0.0);
        let out = resize_bicubic(&img, Factor::down(3)).unwrap();
        assert_eq!((out.height(), out.width()), (4, 3));
        assert!(resize_bicubic(&Image::filled(1, 0, 3, 0.0), Factor::down(2)).is_err());
    }

    #[test]
    fn cubic_kernel_values() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        assert_eq!(cubic(0.5), 0.5625);
        assert_eq!(cubic(1.5), -0.0625);
    }
}
