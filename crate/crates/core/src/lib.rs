//! Simulated low-exposure CT: phantoms, parallel-beam projection with
//! photon noise, FBP/SIRT/CGLS reconstruction, image quality metrics and a
//! small CNN engine for learned denoising.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod real;
pub mod recon;
pub mod seed;
pub mod tomo;

pub use error::{Error, Result};
pub use image::{Image, ImagePair, NormMap, PairedDataset, Patch, Tile};
pub use metrics::{SsimParams, Window};
pub use phantom::RockPhantomSpec;
pub use real::Real;
pub use recon::{Algorithm, Filter, ReconConfig, Reconstruction};
pub use tomo::{ExposureModel, Geometry, Projector, Sinogram, Stage};
