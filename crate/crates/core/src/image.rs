//! Planar float images with 8-bit PNG I/O.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

/// Planar (channel-major) image. In memory values live in `[0, 1]`; on
/// disk they are 8-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn clipped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Rounds to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        self.map(|v| quantize(v) as f32 / 255.0)
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    /// Crops the bottom/right edges so both sides are multiples of `r`.
    pub fn mod_crop(&self, r: usize) -> Image {
        let (h, w) = (self.height - self.height % r, self.width - self.width % r);
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        self.crop(0, 0, h, w).expect("mod crop stays in bounds")
    }

    /// Removes `s` pixels from every border.
    pub fn shave(&self, s: usize) -> Result<Image> {
        if 2 * s >= self.height || 2 * s >= self.width {
            return Err(Error::InvalidArgument(format!(
                "cannot shave {s} pixels from a {}x{} image",
                self.height, self.width
            )));
        }
        self.crop(s, s, self.height - 2 * s, self.width - 2 * s)
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(Shape::new(1, self.channels, self.height, self.width), self.data.clone())
            .expect("image and tensor sizes agree")
    }

    /// Batch item `n` of a tensor.
    pub fn from_tensor(t: &Tensor4, n: usize) -> Result<Image> {
        let s = t.shape();
        if n >= s.n {
            return Err(Error::InvalidArgument(format!("batch index {n} out of range {}", s.n)));
        }
        let len = s.c * s.plane();
        Image::from_vec(s.c, s.h, s.w, t.data()[n * len..(n + 1) * len].to_vec())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: DynamicImage) -> Image {
        let gray = matches!(
            img,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
        );
        if gray {
            let g = img.to_luma8();
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            return Image::from_vec(1, h, w, data).expect("sizes agree");
        }
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.into_raw();
        Image::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0)
    }

    /// Interleaved 8-bit samples (`L` or `RGB`), rounded and clipped.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    out.push(quantize(self.get(c, y, x)));
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        let raw = self.to_u8_interleaved();
        let res = match self.channels {
            1 => GrayImage::from_raw(w, h, raw).map(|i| i.save(path)),
            3 => RgbImage::from_raw(w, h, raw).map(|i| i.save(path)),
            c => {
                return Err(Error::InvalidArgument(format!(
                    "cannot save a {c}-channel image as PNG"
                )))
            }
        };
        res.expect("buffer matches dimensions")
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Nearest 8-bit level of a unit-range value.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
