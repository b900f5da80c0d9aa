//! LR image synthesis. Each degradation model is a [`Degradation`]
//! strategy; a [`DegradationRegistry`] maps names (`bi`, `bd`, `dn`) to
//! factories so callers can select one from configuration at runtime.

mod resize;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;

pub use resize::{cubic, resize_bicubic, Contributions, Factor};

pub const BLUR_SIZE: usize = 7;
pub const BLUR_SIGMA: f64 = 1.6;
/// Noise level on the 8-bit scale.
pub const NOISE_LEVEL: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationKind {
    Bi,
    Bd,
    Dn,
}

impl DegradationKind {
    pub fn name(&self) -> &'static str {
        match self {
            DegradationKind::Bi => "bi",
            DegradationKind::Bd => "bd",
            DegradationKind::Dn => "dn",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bi" => Ok(DegradationKind::Bi),
            "bd" => Ok(DegradationKind::Bd),
            "dn" => Ok(DegradationKind::Dn),
            other => Err(Error::InvalidArgument(format!(
                "unknown degradation `{other}` (expected bi, bd or dn)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub scale: usize,
    /// Gaussian noise standard deviation on the 0-255 scale (DN only).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn bi(scale: usize) -> Self {
        DegradationSpec {
            kind: DegradationKind::Bi,
            scale,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn bd() -> Self {
        DegradationSpec {
            kind: DegradationKind::Bd,
            scale: 3,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn dn(seed: u64) -> Self {
        DegradationSpec {
            kind: DegradationKind::Dn,
            scale: 3,
            noise_sigma: NOISE_LEVEL,
            seed,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.kind {
            DegradationKind::Bi if !(2..=4).contains(&self.scale) => {
                out.push(format!("bi degradation needs scale 2, 3 or 4, got {}", self.scale))
            }
            DegradationKind::Bd | DegradationKind::Dn if self.scale != 3 => {
                out.push(format!("{} degradation needs scale 3, got {}", self.kind, self.scale))
            }
            _ => {}
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            out.push(format!("noise sigma must be a finite value >= 0, got {}", self.noise_sigma));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} x{}", self.kind, self.scale)?;
        if self.kind == DegradationKind::Dn {
            write!(f, " sigma={} seed={}", self.noise_sigma, self.seed)?;
        }
        Ok(())
    }
}

/// A way of producing an LR image from an HR image.
pub trait Degradation: Send + Sync {
    fn name(&self) -> &'static str;

    fn scale(&self) -> usize;

    /// Degrades `hr` after cropping it to a multiple of the scale.
    /// `stream` selects an independent noise stream (e.g. per image) for
    /// stochastic models and is ignored by deterministic ones.
    fn apply(&self, hr: &Image, stream: u64) -> Result<Image>;
}

pub type DegradationFactory = fn(&DegradationSpec) -> Result<Box<dyn Degradation>>;

/// Name-keyed degradation factories.
pub struct DegradationRegistry {
    factories: BTreeMap<&'static str, DegradationFactory>,
}

impl Default for DegradationRegistry {
    fn default() -> Self {
        let mut reg = DegradationRegistry {
            factories: BTreeMap::new(),
        };
        reg.register("bi", |s| Ok(Box::new(Bicubic { scale: s.scale })));
        reg.register("bd", |_| Ok(Box::new(BlurDown::standard())));
        reg.register("dn", |s| {
            Ok(Box::new(NoisyBicubic {
                scale: s.scale,
                sigma: s.noise_sigma / 255.0,
                seed: s.seed,
            }))
        });
        reg
    }
}

impl DegradationRegistry {
    pub fn register(&mut self, name: &'static str, factory: DegradationFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(&self, spec: &DegradationSpec) -> Result<Box<dyn Degradation>> {
        spec.validate()?;
        let name = spec.kind.name();
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no degradation registered as `{name}`")))?;
        factory(spec)
    }
}

/// Builds the degradation for `spec` from the default registry.
pub fn degradation_for(spec: &DegradationSpec) -> Result<Box<dyn Degradation>> {
    DegradationRegistry::default().create(spec)
}

pub struct Bicubic {
    pub scale: usize,
}

impl Degradation for Bicubic {
    fn name(&self) -> &'static str {
        "bi"
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn apply(&self, hr: &Image, _stream: u64) -> Result<Image> {
        degrade_bi(hr, self.scale)
    }
}

pub struct BlurDown {
    pub kernel: Vec<f64>,
    pub size: usize,
    pub scale: usize,
}

impl BlurDown {
    pub fn standard() -> Self {
        BlurDown {
            kernel: gaussian_kernel(BLUR_SIZE, BLUR_SIGMA),
            size: BLUR_SIZE,
            scale: 3,
        }
    }
}

impl Degradation for BlurDown {
    fn name(&self) -> &'static str {
        "bd"
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn apply(&self, hr: &Image, _stream: u64) -> Result<Image> {
        let hr = hr.mod_crop(self.scale);
        Ok(blur_decimate(&hr, &self.kernel, self.size, self.scale).clipped())
    }
}

pub struct NoisyBicubic {
    pub scale: usize,
    /// Standard deviation in unit-range units.
    pub sigma: f64,
    pub seed: u64,
}

impl Degradation for NoisyBicubic {
    fn name(&self) -> &'static str {
        "dn"
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn apply(&self, hr: &Image, stream: u64) -> Result<Image> {
        let lr = degrade_bi(hr, self.scale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Ok(add_gaussian_noise(&lr, self.sigma, &mut rng).clipped())
    }
}

/// Bicubic downsampling by `r` after cropping to a multiple of `r`.
pub fn degrade_bi(hr: &Image, r: usize) -> Result<Image> {
    let hr = hr.mod_crop(r);
    Ok(resize_bicubic(&hr, Factor::down(r))?.clipped())
}

/// 7x7 Gaussian blur (sigma 1.6, replicated borders), then x3 decimation.
pub fn degrade_bd(hr: &Image) -> Result<Image> {
    BlurDown::standard().apply(hr, 0)
}

/// Bicubic x3 downsampling plus Gaussian noise of level 30 (8-bit scale).
pub fn degrade_dn(hr: &Image, seed: u64) -> Result<Image> {
    degrade_dn_with_sigma(hr, NOISE_LEVEL, seed)
}

pub fn degrade_dn_with_sigma(hr: &Image, sigma_255: f64, seed: u64) -> Result<Image> {
    NoisyBicubic {
        scale: 3,
        sigma: sigma_255 / 255.0,
        seed,
    }
    .apply(hr, 0)
}

/// Normalized `size x size` Gaussian, row-major.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - half, (i % size) as f64 - half);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Blur with replicated borders, keeping samples at `(r*i, r*j)`. No
/// clipping.
pub fn blur_decimate(img: &Image, kernel: &[f64], size: usize, r: usize) -> Image {
    let (c, h, w) = img.dims();
    let half = (size / 2) as isize;
    let (oh, ow) = (h.div_ceil(r), w.div_ceil(r));
    Image::from_fn(c, oh, ow, |ch, oy, ox| {
        let (cy, cx) = ((oy * r) as isize, (ox * r) as isize);
        let mut acc = 0.0f64;
        for ky in 0..size {
            let sy = (cy + ky as isize - half).clamp(0, h as isize - 1) as usize;
            for kx in 0..size {
                let sx = (cx + kx as isize - half).clamp(0, w as isize - 1) as usize;
                acc += kernel[ky * size + kx] * img.get(ch, sy, sx) as f64;
            }
        }
        acc as f32
    })
}

/// Adds i.i.d. `N(0, sigma^2)` noise. No clipping.
pub fn add_gaussian_noise(img: &Image, sigma: f64, rng: &mut impl rand::Rng) -> Image {
    if sigma == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = (*v as f64 + sigma * z) as f32;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(3, h, w, |c, y, x| ((c * 17 + y * 5 + x * 3) % 29) as f32 / 28.0)
    }

    #[test]
    fn registry_has_the_three_models() {
        let reg = DegradationRegistry::default();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["bd", "bi", "dn"]);
        let d = reg.create(&DegradationSpec::bi(4)).unwrap();
        assert_eq!((d.name(), d.scale()), ("bi", 4));
        assert!(reg.create(&DegradationSpec { scale: 2, ..DegradationSpec::bd() }).is_err());
        assert!(reg.create(&DegradationSpec { noise_sigma: -1.0, ..DegradationSpec::dn(0) }).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("BD".parse::<DegradationKind>().unwrap(), DegradationKind::Bd);
        assert!("jpeg".parse::<DegradationKind>().is_err());
    }

    #[test]
    fn bi_shape_and_constant() {
        let lr = degrade_bi(&ramp(24, 18), 3).unwrap();
        assert_eq!(lr.dims(), (3, 8, 6));
        let lr = degrade_bi(&ramp(25, 19), 2).unwrap();
        assert_eq!(lr.dims(), (3, 12, 9));
        let lr = degrade_bi(&Image::filled(3, 12, 12, 0.25), 4).unwrap();
        assert!(lr.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_matches_closed_form() {
        let k = gaussian_kernel(7, 1.6);
        let total: f64 = k.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        let z: f64 = (-3i32..=3)
            .flat_map(|y| (-3i32..=3).map(move |x| (y, x)))
            .map(|(y, x)| (-((x * x + y * y) as f64) / (2.0 * 1.6 * 1.6)).exp())
            .sum();
        assert!((k[24] - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn bd_constant_and_shape() {
        let lr = degrade_bd(&Image::filled(3, 20, 16, 0.6)).unwrap();
        assert_eq!(lr.dims(), (3, 6, 5));
        assert!(lr.data().iter().all(|v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn dn_zero_sigma_equals_bi_and_seed_is_deterministic() {
        let hr = ramp(30, 27);
        assert_eq!(degrade_dn_with_sigma(&hr, 0.0, 9).unwrap(), degrade_bi(&hr, 3).unwrap());
        assert_eq!(degrade_dn(&hr, 9).unwrap(), degrade_dn(&hr, 9).unwrap());
        assert_ne!(degrade_dn(&hr, 9).unwrap(), degrade_dn(&hr, 10).unwrap());
        let d = degradation_for(&DegradationSpec::dn(9)).unwrap();
        assert_ne!(d.apply(&hr, 0).unwrap(), d.apply(&hr, 1).unwrap());
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let hr = Image::from_fn(3, 24, 24, |_, y, x| if (y / 3 + x / 3) % 2 == 0 { 1.0 } else { 0.0 });
        for spec in [DegradationSpec::bi(2), DegradationSpec::bi(4), DegradationSpec::bd(), DegradationSpec::dn(1)] {
            let lr = degradation_for(&spec).unwrap().apply(&hr, 0).unwrap();
            assert!(lr.data().iter().all(|v| (0.0..=1.0).contains(v)), "{spec}");
        }
    }
}
