//! Non-learned reconstructions.
//!
//! Both beamformers work on the back-projection data term
//!
//! ```text
//! q(t) = 2 p(t) - 2 t dp/dt(t)
//! ```
//!
//! evaluated per channel with a centered time difference. The recorded
//! pressure is the time derivative of a delayed projection, so summing it
//! unfiltered cancels exactly at the source pixel; `q` turns the bipolar lobe
//! into a peaked one.
//!
//! - DAS sums `q` at the pixel delays with linear interpolation and no weights.
//! - UBP weights each term by `cos(theta0) / |r - r0|^2` times the element
//!   spacing and divides by the per-pixel solid angle
//!   `Omega0 = sum_s spacing * cos(theta0) / |r - r0|`.
//!
//! Public reconstructions are divided by their largest magnitude (signed
//! values kept); the `*_unnormalized` variants expose the linear maps.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustic::{forward_weight, Sinogram};
use crate::geometry::{ImagingGeometry, PressureImage};
use crate::{PatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamformMethod {
    Das,
    Ubp,
}

impl BeamformMethod {
    pub fn reconstruct(self, sino: &Sinogram, geom: &ImagingGeometry) -> Result<PressureImage> {
        match self {
            BeamformMethod::Das => das_reconstruct(sino, geom),
            BeamformMethod::Ubp => ubp_reconstruct(sino, geom),
        }
    }
}

impl fmt::Display for BeamformMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BeamformMethod::Das => "das",
            BeamformMethod::Ubp => "ubp",
        })
    }
}

impl FromStr for BeamformMethod {
    type Err = PatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "das" => Ok(BeamformMethod::Das),
            "ubp" => Ok(BeamformMethod::Ubp),
            other => Err(PatError::InvalidArgument(format!(
                "unknown beamforming method '{other}' (expected das or ubp)"
            ))),
        }
    }
}

/// `q[k] = 2 p[k] - k (p[k+1] - p[k-1])`, i.e. `2p - 2t dp/dt` with
/// `t = k / fs` and a centered difference for the derivative.
pub fn backprojection_term(channel: &[f64]) -> Vec<f64> {
    let n = channel.len();
    (0..n)
        .map(|k| {
            let next = if k + 1 < n { channel[k + 1] } else { 0.0 };
            let prev = if k > 0 { channel[k - 1] } else { 0.0 };
            2.0 * channel[k] - k as f64 * (next - prev)
        })
        .collect()
}

fn filtered_channels(sino: &Sinogram) -> Vec<Vec<f64>> {
    sino.channels()
        .par_iter()
        .map(|ch| backprojection_term(ch))
        .collect()
}

#[inline]
fn sample_at(channel: &[f64], sample: usize, frac: f64) -> f64 {
    (1.0 - frac) * channel[sample] + frac * channel[sample + 1]
}

fn per_pixel<F>(geom: &ImagingGeometry, f: F) -> Result<PressureImage>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let nx = geom.grid_nx;
    let rows: Vec<Vec<f64>> = (0..geom.grid_ny)
        .into_par_iter()
        .map(|row| (0..nx).map(|col| f(row, col)).collect())
        .collect();
    PressureImage::from_vec(geom.grid_ny, nx, rows.concat())
}

/// Delay-and-sum before max-abs normalization; linear in the sinogram.
pub fn das_unnormalized(sino: &Sinogram, geom: &ImagingGeometry) -> Result<PressureImage> {
    geom.validate()?;
    sino.check_matches(geom)?;
    let channels = filtered_channels(sino);
    per_pixel(geom, |row, col| {
        channels
            .iter()
            .enumerate()
            .map(|(s, ch)| {
                let w = forward_weight(geom, row, col, s);
                sample_at(ch, w.sample, w.frac)
            })
            .sum()
    })
}

/// Delay-and-sum image scaled to `[-1, 1]`; a zero record gives a zero image.
pub fn das_reconstruct(sino: &Sinogram, geom: &ImagingGeometry) -> Result<PressureImage> {
    let mut img = das_unnormalized(sino, geom)?;
    img.normalize_max_abs();
    Ok(img)
}

/// Universal back-projection before max-abs normalization; linear in the sinogram.
pub fn ubp_unnormalized(sino: &Sinogram, geom: &ImagingGeometry) -> Result<PressureImage> {
    geom.validate()?;
    sino.check_matches(geom)?;
    let channels = filtered_channels(sino);
    let spacing = geom.sensor_spacing();
    per_pixel(geom, |row, col| {
        let mut acc = 0.0;
        let mut solid_angle = 0.0;
        for (s, ch) in channels.iter().enumerate() {
            let w = forward_weight(geom, row, col, s);
            let cos = geom.obliquity(row, col, s);
            let inv_d = w.amplitude;
            acc += sample_at(ch, w.sample, w.frac) * cos * inv_d * inv_d * spacing;
            solid_angle += spacing * cos * inv_d;
        }
        acc / solid_angle
    })
}

pub fn ubp_reconstruct(sino: &Sinogram, geom: &ImagingGeometry) -> Result<PressureImage> {
    let mut img = ubp_unnormalized(sino, geom)?;
    img.normalize_max_abs();
    Ok(img)
}
