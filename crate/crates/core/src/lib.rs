//! Pan-sharpening with three chained learnable lookup tables.
//!
//! A panchromatic band and a bicubic-upsampled 4-band multispectral image are
//! stacked into five channels and passed through a PAN-guided spectral LUT,
//! a spatial-details LUT over rotated 2x2 neighborhoods and an output LUT.
//! All three are trained with analytic gradients and Adam.

pub mod bench;
pub mod cli;
pub mod error;
pub mod formats;
pub mod interp;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod resample;
pub mod stages;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use pipeline::{sharpen, PanLutModel};
pub use raster::MultiBandImage;
