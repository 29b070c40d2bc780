//! Physics and evaluation side of the linear-array photoacoustic toolkit.
//!
//! The pieces here are all plain numeric code with no learned parameters:
//!
//! - [`geometry`]: the imaging grid, the transducer row and delay arithmetic
//! - [`phantom`]: ground-truth initial-pressure maps (vessel composites, point targets)
//! - [`acoustic`]: the discrete forward projector, its exact adjoint, band-pass and noise
//! - [`beamform`]: delay-and-sum and universal back-projection
//! - [`metrics`]: SSIM / PSNR / SNR and line profiles
//! - [`tensor_file`] and [`image_io`]: on-disk formats

pub mod acoustic;
pub mod beamform;
mod error;
pub mod geometry;
pub mod image_io;
pub mod metrics;
pub mod phantom;
pub mod tensor_file;

pub use acoustic::{add_noise, adjoint_project, apply_bandpass, forward_project, Sinogram};
pub use beamform::{das_reconstruct, ubp_reconstruct, BeamformMethod};
pub use error::{PatError, Result};
pub use geometry::{ImagingGeometry, PressureImage};
