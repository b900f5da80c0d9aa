pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor4, Var};
pub mod config;
pub mod model;
pub mod train;
pub mod degrade;
pub mod image;
pub mod ensemble;
pub mod metrics;
pub mod upscale;
