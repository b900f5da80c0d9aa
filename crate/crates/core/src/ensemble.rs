//! Geometric self-ensemble over the eight flip/rotation symmetries of the
//! square.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Shape, Tensor4};
use crate::upscale::Upscaler;

/// Optional horizontal flip followed by `quarter_turns` counter-clockwise
/// 90 degree rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DihedralTransform {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl DihedralTransform {
    pub const IDENTITY: DihedralTransform = DihedralTransform {
        flip: false,
        quarter_turns: 0,
    };

    /// All eight group elements; index 0 is the identity.
    pub fn all() -> [DihedralTransform; 8] {
        std::array::from_fn(|i| Self::from_index(i))
    }

    pub fn from_index(i: usize) -> Self {
        DihedralTransform {
            flip: i >= 4,
            quarter_turns: (i % 4) as u8,
        }
    }

    pub fn index(&self) -> usize {
        self.flip as usize * 4 + self.quarter_turns as usize
    }

    pub fn inverse(&self) -> Self {
        if self.flip {
            // (R^k F)^-1 = F R^-k = R^k F
            *self
        } else {
            DihedralTransform {
                flip: false,
                quarter_turns: (4 - self.quarter_turns) % 4,
            }
        }
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Self) -> Self {
        // R^a F^f R^b F^g = R^(a + (-1)^f b) F^(f xor g)
        let b = if self.flip { (4 - first.quarter_turns) % 4 } else { first.quarter_turns };
        DihedralTransform {
            flip: self.flip ^ first.flip,
            quarter_turns: (self.quarter_turns + b) % 4,
        }
    }

    pub fn swaps_axes(&self) -> bool {
        self.quarter_turns % 2 == 1
    }

    /// Where input pixel `(y, x)` of an `h x w` image lands.
    #[inline]
    fn destination(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut y, mut x, mut h, mut w) = (y, if self.flip { w - 1 - x } else { x }, h, w);
        for _ in 0..self.quarter_turns {
            // A counter-clockwise turn sends (y, x) to (w - 1 - x, y).
            (y, x) = (w - 1 - x, y);
            (h, w) = (w, h);
        }
        (y, x)
    }

    /// Applies the transform to `channels` planes of `h x w` values.
    pub fn apply_planes(&self, data: &[f32], channels: usize, h: usize, w: usize) -> Vec<f32> {
        let ow = if self.swaps_axes() { h } else { w };
        let mut out = vec![0.0; data.len()];
        for c in 0..channels {
            let plane = &data[c * h * w..(c + 1) * h * w];
            let dst = &mut out[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (oy, ox) = self.destination(y, x, h, w);
                    dst[oy * ow + ox] = plane[y * w + x];
                }
            }
        }
        out
    }

    pub fn apply(&self, img: &Image) -> Image {
        let (c, h, w) = img.dims();
        let (oh, ow) = if self.swaps_axes() { (w, h) } else { (h, w) };
        Image::from_vec(c, oh, ow, self.apply_planes(img.data(), c, h, w)).expect("permutation keeps size")
    }

    pub fn apply_tensor(&self, t: &Tensor4) -> Tensor4 {
        let s = t.shape();
        let (oh, ow) = if self.swaps_axes() { (s.w, s.h) } else { (s.h, s.w) };
        let per = s.c * s.plane();
        let mut data = Vec::with_capacity(t.numel());
        for n in 0..s.n {
            data.extend(self.apply_planes(&t.data()[n * per..(n + 1) * per], s.c, s.h, s.w));
        }
        Tensor4::from_vec(Shape::new(s.n, s.c, oh, ow), data).expect("permutation keeps size")
    }
}

/// `t.inverse()(t(img))`.
pub fn transform_roundtrip(img: &Image, t: DihedralTransform) -> Image {
    t.inverse().apply(&t.apply(img))
}

/// Average of `inverse(upscale(t(lr)))` over all eight transforms,
/// accumulated in `f64`.
pub fn self_ensemble(model: &dyn Upscaler, lr: &Image) -> Result<Image> {
    let mut acc: Option<(usize, usize, usize, Vec<f64>)> = None;
    for t in DihedralTransform::all() {
        let sr = t.inverse().apply(&model.upscale(&t.apply(lr))?);
        match &mut acc {
            None => acc = Some((sr.channels(), sr.height(), sr.width(), sr.data().iter().map(|&v| v as f64).collect())),
            Some((c, h, w, sum)) => {
                if sr.dims() != (*c, *h, *w) {
                    return Err(Error::shape("self_ensemble", format!("{:?}", (*c, *h, *w)), format!("{:?}", sr.dims())));
                }
                sum.iter_mut().zip(sr.data()).for_each(|(a, &v)| *a += v as f64);
            }
        }
    }
    let (c, h, w, sum) = acc.expect("eight transforms");
    Image::from_vec(c, h, w, sum.into_iter().map(|v| (v / 8.0) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> Image {
        Image::from_fn(2, h, w, |c, y, x| (c * 100 + y * 10 + x) as f32)
    }

    #[test]
    fn rotation_direction() {
        // [[0, 1], [10, 11]] turned counter-clockwise is [[1, 11], [0, 10]].
        let img = Image::from_fn(1, 2, 2, |_, y, x| (y * 10 + x) as f32);
        let r = DihedralTransform { flip: false, quarter_turns: 1 }.apply(&img);
        assert_eq!(r.data(), &[1.0, 11.0, 0.0, 10.0]);
        let f = DihedralTransform { flip: true, quarter_turns: 0 }.apply(&img);
        assert_eq!(f.data(), &[1.0, 0.0, 11.0, 10.0]);
    }

    #[test]
    fn roundtrips_are_exact() {
        let img = sample(3, 5);
        for t in DihedralTransform::all() {
            assert_eq!(transform_roundtrip(&img, t), img, "{t:?}");
        }
        let r = DihedralTransform { flip: false, quarter_turns: 1 };
        let four = (0..4).fold(img.clone(), |acc, _| r.apply(&acc));
        assert_eq!(four, img);
    }

    #[test]
    fn group_closure_and_composition() {
        let img = sample(4, 3);
        for a in DihedralTransform::all() {
            for b in DihedralTransform::all() {
                let c = a.compose(&b);
                assert_eq!(c.apply(&img), a.apply(&b.apply(&img)), "{a:?} after {b:?}");
            }
            assert_eq!(a.compose(&a.inverse()), DihedralTransform::IDENTITY);
        }
        let distinct: std::collections::HashSet<Vec<u32>> = DihedralTransform::all()
            .iter()
            .map(|t| t.apply(&sample(3, 3)).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 8);
    }

    #[test]
    fn tensor_matches_image() {
        let img = sample(3, 4);
        for t in DihedralTransform::all() {
            let via_tensor = Image::from_tensor(&t.apply_tensor(&img.to_tensor()), 0).unwrap();
            assert_eq!(via_tensor, t.apply(&img));
        }
    }
}
