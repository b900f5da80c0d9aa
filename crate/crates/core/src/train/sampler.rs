use rand::Rng;

use crate::degrade::Degradation;
use crate::ensemble::DihedralTransform;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Shape, Tensor4};

/// An aligned LR/HR training or validation pair.
#[derive(Clone, Debug)]
pub struct Pair {
    pub name: String,
    pub lr: Image,
    pub hr: Image,
}

impl Pair {
    pub fn new(name: impl Into<String>, lr: Image, hr: Image, scale: usize) -> Result<Self> {
        let name = name.into();
        let (lc, lh, lw) = lr.dims();
        let (hc, hh, hw) = hr.dims();
        if lc != hc || lh * scale != hh || lw * scale != hw {
            return Err(Error::shape(
                "training pair",
                format!("HR {}x{} for LR {lh}x{lw} at x{scale}", lh * scale, lw * scale),
                format!("{name}: HR {hh}x{hw}"),
            ));
        }
        Ok(Pair { name, lr, hr })
    }

    /// Degrades `hr` (cropped to a multiple of the scale) and rounds the
    /// LR image to 8-bit levels, as if it had been written to disk.
    pub fn degrade(name: impl Into<String>, hr: &Image, degradation: &dyn Degradation, stream: u64) -> Result<Self> {
        let r = degradation.scale();
        let hr = hr.mod_crop(r);
        let lr = degradation.apply(&hr, stream)?.quantized();
        Pair::new(name, lr, hr, r)
    }
}

#[derive(Clone, Debug)]
pub struct PairDataset {
    pub scale: usize,
    pub pairs: Vec<Pair>,
}

impl PairDataset {
    pub fn new(scale: usize, pairs: Vec<Pair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("dataset has no image pairs".into()));
        }
        Ok(PairDataset { scale, pairs })
    }

    /// One LR image per HR image; image `i` uses noise stream `i`.
    pub fn from_hr(images: &[(String, Image)], degradation: &dyn Degradation) -> Result<Self> {
        let pairs = images
            .iter()
            .enumerate()
            .map(|(i, (name, hr))| Pair::degrade(name.clone(), hr, degradation, i as u64))
            .collect::<Result<Vec<_>>>()?;
        Self::new(degradation.scale(), pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Fails with the first image whose LR side is below `patch`.
    pub fn check_patch_size(&self, patch: usize) -> Result<()> {
        for p in &self.pairs {
            check_size(p, patch)?;
        }
        Ok(())
    }
}

fn check_size(pair: &Pair, patch: usize) -> Result<()> {
    let (_, h, w) = pair.lr.dims();
    if h < patch || w < patch {
        return Err(Error::ImageTooSmall {
            path: pair.name.clone(),
            height: h,
            width: w,
            required: patch,
        });
    }
    Ok(())
}

/// Where one batch item came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchDraw {
    pub image: usize,
    pub y: usize,
    pub x: usize,
    pub transform: DihedralTransform,
}

/// Draws one patch location: image uniformly, then top-left corner
/// uniformly over valid positions, then a transform (identity when
/// augmentation is off).
pub fn draw_patch(data: &PairDataset, patch: usize, augment: bool, rng: &mut impl Rng) -> Result<PatchDraw> {
    let image = rng.gen_range(0..data.pairs.len());
    let pair = &data.pairs[image];
    check_size(pair, patch)?;
    let y = rng.gen_range(0..=pair.lr.height() - patch);
    let x = rng.gen_range(0..=pair.lr.width() - patch);
    let transform = if augment {
        DihedralTransform::from_index(rng.gen_range(0..8))
    } else {
        DihedralTransform::IDENTITY
    };
    Ok(PatchDraw {
        image,
        y,
        x,
        transform,
    })
}

/// The LR and HR crops for `draw`, with its transform applied to both.
pub fn extract_pair(data: &PairDataset, patch: usize, draw: &PatchDraw) -> Result<(Image, Image)> {
    let r = data.scale;
    let pair = &data.pairs[draw.image];
    let lr = pair.lr.crop(draw.y, draw.x, patch, patch)?;
    let hr = pair.hr.crop(draw.y * r, draw.x * r, patch * r, patch * r)?;
    Ok((draw.transform.apply(&lr), draw.transform.apply(&hr)))
}

/// A batch of `batch` aligned, independently augmented patch pairs as
/// `(N, C, p, p)` and `(N, C, r*p, r*p)` tensors.
pub fn sample_batch(
    data: &PairDataset,
    batch: usize,
    patch: usize,
    augment: bool,
    rng: &mut impl Rng,
) -> Result<(Tensor4, Tensor4)> {
    let r = data.scale;
    let c = data.pairs[0].lr.channels();
    let mut lr = Vec::with_capacity(batch * c * patch * patch);
    let mut hr = Vec::with_capacity(batch * c * patch * patch * r * r);
    for _ in 0..batch {
        let draw = draw_patch(data, patch, augment, rng)?;
        let (l, h) = extract_pair(data, patch, &draw)?;
        if l.channels() != c {
            return Err(Error::ChannelMismatch {
                op: "sample_batch",
                expected: c,
                actual: l.channels(),
            });
        }
        lr.extend_from_slice(l.data());
        hr.extend_from_slice(h.data());
    }
    Ok((
        Tensor4::from_vec(Shape::new(batch, c, patch, patch), lr)?,
        Tensor4::from_vec(Shape::new(batch, c, patch * r, patch * r), hr)?,
    ))
}
