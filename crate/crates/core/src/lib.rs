//! Patch-based diffusion restoration of old film.
//!
//! The crate covers the whole pipeline: synthetic defect data
//! ([`synthdata`]), 3D patch tiling ([`patchgrid`]), the neural stack
//! ([`backbone`], [`fusion`], [`frequency`]), staged training ([`training`]),
//! patch-consistent restoration ([`inference`]) and evaluation ([`metrics`]).

pub mod backbone;
pub mod config;
pub mod error;
pub mod frequency;
pub mod fusion;
pub mod inference;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod patchgrid;
pub mod resample;
pub mod rng;
pub mod synthdata;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use latent::LatentVolume;
pub use volume::FrameVolume;
