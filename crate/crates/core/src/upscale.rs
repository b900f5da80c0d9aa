//! Interchangeable image upscalers, selectable by name.

use crate::degrade::{resize_bicubic, Factor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::RdnModel;

pub trait Upscaler {
    fn name(&self) -> &str;

    fn scale(&self) -> usize;

    /// Super-resolves a unit-range image; output is `scale` times larger
    /// and not clipped.
    fn upscale(&self, lr: &Image) -> Result<Image>;
}

impl Upscaler for RdnModel {
    fn name(&self) -> &str {
        "rdn"
    }

    fn scale(&self) -> usize {
        self.config().scale
    }

    fn upscale(&self, lr: &Image) -> Result<Image> {
        Image::from_tensor(&self.infer(&lr.to_tensor())?, 0)
    }
}

/// Plain bicubic interpolation, the usual baseline.
#[derive(Clone, Copy, Debug)]
pub struct BicubicUpscaler {
    pub scale: usize,
}

impl Upscaler for BicubicUpscaler {
    fn name(&self) -> &str {
        "bicubic"
    }

    fn scale(&self) -> usize {
        self.scale
    }

    fn upscale(&self, lr: &Image) -> Result<Image> {
        resize_bicubic(lr, Factor::up(self.scale))
    }
}

/// Names accepted by [`create_upscaler`].
pub const UPSCALERS: &[&str] = &["rdn", "bicubic"];

/// Selects an upscaler by name. `rdn` needs a model.
pub fn create_upscaler(name: &str, scale: usize, model: Option<RdnModel>) -> Result<Box<dyn Upscaler>> {
    match name {
        "rdn" => model
            .map(|m| Box::new(m) as Box<dyn Upscaler>)
            .ok_or_else(|| Error::InvalidArgument("the rdn upscaler needs a checkpoint".into())),
        "bicubic" => Ok(Box::new(BicubicUpscaler { scale })),
        other => Err(Error::InvalidArgument(format!(
            "unknown upscaler `{other}` (expected one of {})",
            UPSCALERS.join(", ")
        ))),
    }
}
