//! Spectral additivity analysis of generator artifacts and an orthogonal
//! decomposition head for generated-image detection, trained on synthetic
//! entangled features.

pub mod autodiff;
pub mod disentangle;
pub mod error;
pub mod formats;
pub mod grid_spectra;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
