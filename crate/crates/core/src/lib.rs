//! Snapshot spectral compressive imaging: the dispersive coded-aperture camera,
//! a deep unfolding reconstruction network with a learned latent prior, and the
//! training, metric and file-format utilities around them.

pub mod cassi;
pub mod colormap;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod gap;
pub mod io;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod scenes;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
