//! Volumes, phantoms, metrics and the latent-interpolation pipeline.

pub mod error;
pub mod interp;
pub mod io;
pub mod metrics;
pub mod sr;
pub mod synth;
pub mod vae;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Spacing, Volume3D};
