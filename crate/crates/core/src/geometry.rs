//! Imaging grid, transducer placement and time-of-flight arithmetic.
//!
//! Coordinates are in meters. `x` is lateral (along the array), `z` is depth.
//! The transducer row lies on the line `z = 0`, which is the top edge of the
//! region of interest. Pixel `(row, col)` is sampled at
//!
//! ```text
//! x = (col + 0.5 - nx / 2) * pitch
//! z = (row + 1) * pitch
//! ```
//!
//! so the first image row sits one pitch below the array and the last row at
//! the bottom edge of the region (38.4 mm for the default 128 x 128 grid).
//! Sensor `s` sits at `x = (s + 0.5 - n / 2) * sensor_spacing`, which puts the
//! 128 default elements directly above the 128 pixel columns.

use serde::{Deserialize, Serialize};

use crate::{PatError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImagingGeometry {
    /// Pixel count along x (lateral).
    pub grid_nx: usize,
    /// Pixel count along z (depth).
    pub grid_ny: usize,
    /// Pixel edge length in meters.
    pub pixel_pitch: f64,
    /// Speed of sound in m/s.
    pub sound_speed: f64,
    pub sensor_count: usize,
    /// Sampling rate in Hz.
    pub sample_rate: f64,
    /// Samples recorded per channel.
    pub sample_count: usize,
    /// Transducer center frequency in Hz.
    pub center_frequency: f64,
    /// Passband width divided by center frequency.
    pub fractional_bandwidth: f64,
}

impl Default for ImagingGeometry {
    fn default() -> Self {
        Self {
            grid_nx: 128,
            grid_ny: 128,
            pixel_pitch: 38.4e-3 / 128.0,
            sound_speed: 1500.0,
            sensor_count: 128,
            sample_rate: 4.0e7,
            sample_count: 2560,
            center_frequency: 7.0e6,
            fractional_bandwidth: 0.8,
        }
    }
}

impl ImagingGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PatError::Geometry(msg));
        if self.grid_nx == 0 || self.grid_ny == 0 {
            return bad(format!("empty grid {}x{}", self.grid_ny, self.grid_nx));
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return bad(format!("pixel_pitch must be positive, got {}", self.pixel_pitch));
        }
        if !(self.sound_speed > 0.0 && self.sound_speed.is_finite()) {
            return bad(format!("sound_speed must be positive, got {}", self.sound_speed));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return bad(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        if self.sensor_count == 0 {
            return bad("sensor_count must be at least 1".into());
        }
        if self.sample_count < 4 {
            return bad(format!("sample_count {} is too short", self.sample_count));
        }
        if [self.center_frequency, self.fractional_bandwidth].iter().any(|v| v.is_nan() || *v <= 0.0) {
            return bad("center_frequency and fractional_bandwidth must be positive".into());
        }
        if self.fractional_bandwidth >= 2.0 {
            return bad(format!(
                "fractional_bandwidth {} puts the lower band edge below 0 Hz",
                self.fractional_bandwidth
            ));
        }
        // every echo (plus the interpolation tap) must land inside the record
        let max_delay = self.max_delay_samples();
        if max_delay >= (self.sample_count - 1) as f64 {
            return bad(format!(
                "record of {} samples cannot hold the farthest echo at {:.1} samples",
                self.sample_count, max_delay
            ));
        }
        Ok(())
    }

    /// Width of the region of interest along the array, meters.
    pub fn aperture_width(&self) -> f64 {
        self.grid_nx as f64 * self.pixel_pitch
    }

    /// Center-to-center spacing of the transducer elements, meters.
    pub fn sensor_spacing(&self) -> f64 {
        self.aperture_width() / self.sensor_count as f64
    }

    pub fn pixel_position(&self, row: usize, col: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5 - self.grid_nx as f64 / 2.0) * self.pixel_pitch,
            (row as f64 + 1.0) * self.pixel_pitch,
        ]
    }

    pub fn sensor_position(&self, sensor: usize) -> [f64; 2] {
        [
            (sensor as f64 + 0.5 - self.sensor_count as f64 / 2.0) * self.sensor_spacing(),
            0.0,
        ]
    }

    pub fn sensor_positions(&self) -> Vec<[f64; 2]> {
        (0..self.sensor_count).map(|s| self.sensor_position(s)).collect()
    }

    /// Distance between pixel and sensor, meters.
    #[inline]
    pub fn distance(&self, row: usize, col: usize, sensor: usize) -> f64 {
        let [px, pz] = self.pixel_position(row, col);
        let [sx, sz] = self.sensor_position(sensor);
        let dx = px - sx;
        let dz = pz - sz;
        (dx * dx + dz * dz).sqrt()
    }

    /// Time of flight from pixel to sensor in (fractional) samples.
    #[inline]
    pub fn delay_samples(&self, row: usize, col: usize, sensor: usize) -> f64 {
        self.distance(row, col, sensor) * self.sample_rate / self.sound_speed
    }

    /// Cosine of the angle between the array normal at `sensor` and the
    /// direction to pixel `(row, col)`.
    pub fn obliquity(&self, row: usize, col: usize, sensor: usize) -> f64 {
        let [_, pz] = self.pixel_position(row, col);
        let [_, sz] = self.sensor_position(sensor);
        (pz - sz) / self.distance(row, col, sensor)
    }

    /// Largest pixel-to-sensor delay over the grid, in samples.
    pub fn max_delay_samples(&self) -> f64 {
        // the farthest pairs are a bottom corner and the opposite end sensor
        let corners = [(self.grid_ny - 1, 0), (self.grid_ny - 1, self.grid_nx - 1)];
        let ends = [0, self.sensor_count - 1];
        corners
            .iter()
            .flat_map(|&(r, c)| ends.iter().map(move |&s| (r, c, s)))
            .map(|(r, c, s)| self.delay_samples(r, c, s))
            .fold(0.0, f64::max)
    }

    pub fn pixel_count(&self) -> usize {
        self.grid_nx * self.grid_ny
    }

    /// Lower and upper band edges of the transducer passband, Hz.
    pub fn passband(&self) -> (f64, f64) {
        let half = self.fractional_bandwidth / 2.0;
        (
            self.center_frequency * (1.0 - half),
            self.center_frequency * (1.0 + half),
        )
    }
}

/// A single-channel image stored row-major, `values[row * width + col]`.
///
/// Rows run along depth, columns along the array.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl PressureImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(PatError::shape(
                format!("{} values for {height}x{width}", width * height),
                values.len(),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn for_geometry(geom: &ImagingGeometry) -> Self {
        Self::zeros(geom.grid_ny, geom.grid_nx)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_matches(&self, geom: &ImagingGeometry) -> Result<()> {
        if self.height != geom.grid_ny || self.width != geom.grid_nx {
            return Err(PatError::shape(
                format!("{}x{} image", geom.grid_ny, geom.grid_nx),
                format!("{}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }

    /// Divides by the largest magnitude, leaving an all-zero image untouched.
    pub fn normalize_max_abs(&mut self) {
        let m = self.max_abs();
        if m > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= m);
        }
    }

    /// Copy with every value clamped into `[lo, hi]`.
    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    /// Copy mirrored left-right.
    pub fn mirrored(&self) -> Self {
        let mut out = Self::zeros(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r, c, self.get(r, self.width - 1 - c));
            }
        }
        out
    }

    /// Location of the largest magnitude, first occurrence in row-major order.
    pub fn argmax_abs(&self) -> (usize, usize) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, v) in self.values.iter().enumerate() {
            if v.abs() > best.1 {
                best = (i, v.abs());
            }
        }
        (best.0 / self.width, best.0 % self.width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry_is_valid() {
        let g = ImagingGeometry::default();
        g.validate().unwrap();
        assert!((g.pixel_pitch - 3.0e-4).abs() < 1e-15);
        // the whole record covers far more than the grid diagonal
        let diag = (2.0f64).sqrt() * g.aperture_width();
        assert!(g.sample_count as f64 * g.sound_speed / g.sample_rate >= diag);
    }

    #[test]
    fn sensors_on_top_edge_strictly_increasing() {
        let g = ImagingGeometry::default();
        let pos = g.sensor_positions();
        assert_eq!(pos.len(), 128);
        for w in pos.windows(2) {
            assert!(w[1][0] > w[0][0]);
        }
        assert!(pos.iter().all(|p| p[1] == 0.0));
        let half = g.aperture_width() / 2.0;
        assert!(pos.iter().all(|p| p[0].abs() < half));
    }

    #[test]
    fn fifteen_mm_below_sensor_is_sample_400() {
        let g = ImagingGeometry::default();
        // row 49 sits at (49 + 1) * 0.3 mm = 15 mm
        let d = g.delay_samples(49, 20, 20);
        assert!((d - 400.0).abs() < 1e-9, "{d}");
        assert!((g.obliquity(49, 20, 20) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn short_record_rejected() {
        let g = ImagingGeometry {
            sample_count: 1000,
            ..Default::default()
        };
        assert!(matches!(g.validate(), Err(PatError::Geometry(_))));
    }

    #[test]
    fn nonpositive_pitch_rejected() {
        let g = ImagingGeometry {
            pixel_pitch: 0.0,
            ..Default::default()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn passband_edges() {
        let (lo, hi) = ImagingGeometry::default().passband();
        assert!((lo - 4.2e6).abs() < 1e-3);
        assert!((hi - 9.8e6).abs() < 1e-3);
    }
}
