//! Discrete acoustic forward model and its adjoint.
//!
//! Each pixel is treated as a point emitter. For sensor `s` and pixel `p` the
//! time of flight `tau = |r - r0| * fs / c` is split into an integer sample
//! `k = floor(tau)` and a fraction `a`, and the pixel value weighted by
//! `1 / |r - r0|` is spread onto samples `k` and `k + 1` with weights `1 - a`
//! and `a`. The per-channel accumulation `u` is then differentiated in time
//! with a centered difference scaled by the sample rate:
//!
//! ```text
//! y[t] = (u[t + 1] - u[t - 1]) * fs / 2,    u[-1] = u[T] = 0
//! ```
//!
//! The `1 / |r - r0|` weight absorbs the `t / 4pi` factor and solid-angle
//! element of the spherical-mean projection; the constant `1 / 4pi` is dropped.
//! Both steps are linear and have exact transposes, which [`adjoint_project`]
//! applies in reverse order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::geometry::{ImagingGeometry, PressureImage};
use crate::{PatError, Result};

/// Sensor record stored time-major: `values[t * sensor_count + s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub sample_count: usize,
    pub sensor_count: usize,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(sample_count: usize, sensor_count: usize) -> Self {
        Self {
            sample_count,
            sensor_count,
            values: vec![0.0; sample_count * sensor_count],
        }
    }

    pub fn for_geometry(geom: &ImagingGeometry) -> Self {
        Self::zeros(geom.sample_count, geom.sensor_count)
    }

    pub fn from_vec(sample_count: usize, sensor_count: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != sample_count * sensor_count {
            return Err(PatError::shape(
                format!("{} values", sample_count * sensor_count),
                values.len(),
            ));
        }
        Ok(Self {
            sample_count,
            sensor_count,
            values,
        })
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.values[t * self.sensor_count + s]
    }

    #[inline]
    pub fn set(&mut self, t: usize, s: usize, v: f64) {
        self.values[t * self.sensor_count + s] = v;
    }

    /// One channel as a contiguous time series.
    pub fn channel(&self, s: usize) -> Vec<f64> {
        (0..self.sample_count).map(|t| self.get(t, s)).collect()
    }

    pub fn channels(&self) -> Vec<Vec<f64>> {
        (0..self.sensor_count).map(|s| self.channel(s)).collect()
    }

    pub fn from_channels(channels: &[Vec<f64>]) -> Self {
        let sensor_count = channels.len();
        let sample_count = channels.first().map_or(0, Vec::len);
        let mut out = Self::zeros(sample_count, sensor_count);
        for (s, ch) in channels.iter().enumerate() {
            for (t, &v) in ch.iter().enumerate() {
                out.values[t * sensor_count + s] = v;
            }
        }
        out
    }

    /// Mean square over the whole record.
    pub fn power(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Channels reversed, i.e. the record mirrored across the array center.
    pub fn mirrored(&self) -> Self {
        let mut out = Self::zeros(self.sample_count, self.sensor_count);
        for t in 0..self.sample_count {
            for s in 0..self.sensor_count {
                out.set(t, s, self.get(t, self.sensor_count - 1 - s));
            }
        }
        out
    }

    pub(crate) fn check_matches(&self, geom: &ImagingGeometry) -> Result<()> {
        if self.sample_count != geom.sample_count || self.sensor_count != geom.sensor_count {
            return Err(PatError::shape(
                format!("{}x{} sinogram", geom.sample_count, geom.sensor_count),
                format!("{}x{}", self.sample_count, self.sensor_count),
            ));
        }
        Ok(())
    }
}

/// Integer sample, interpolation fraction and amplitude weight for one
/// pixel/sensor pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardWeight {
    pub sample: usize,
    pub frac: f64,
    pub amplitude: f64,
}

#[inline]
pub fn forward_weight(geom: &ImagingGeometry, row: usize, col: usize, sensor: usize) -> ForwardWeight {
    let d = geom.distance(row, col, sensor);
    let tau = d * geom.sample_rate / geom.sound_speed;
    let k = tau.floor();
    ForwardWeight {
        sample: k as usize,
        frac: tau - k,
        amplitude: 1.0 / d,
    }
}

/// `y[t] = (u[t+1] - u[t-1]) * scale` with zero extension.
pub(crate) fn centered_difference(u: &[f64], scale: f64) -> Vec<f64> {
    let n = u.len();
    (0..n)
        .map(|t| {
            let next = if t + 1 < n { u[t + 1] } else { 0.0 };
            let prev = if t > 0 { u[t - 1] } else { 0.0 };
            (next - prev) * scale
        })
        .collect()
}

/// Transpose of [`centered_difference`]: `v[t] = (y[t-1] - y[t+1]) * scale`.
pub(crate) fn centered_difference_transpose(y: &[f64], scale: f64) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|t| {
            let prev = if t > 0 { y[t - 1] } else { 0.0 };
            let next = if t + 1 < n { y[t + 1] } else { 0.0 };
            (prev - next) * scale
        })
        .collect()
}

/// Maps an initial-pressure image to the sensor record.
pub fn forward_project(p0: &PressureImage, geom: &ImagingGeometry) -> Result<Sinogram> {
    geom.validate()?;
    p0.check_matches(geom)?;
    if !p0.is_finite() {
        return Err(PatError::NonFinite("forward_project input"));
    }
    let t_len = geom.sample_count;
    let scale = geom.sample_rate / 2.0;
    let channels: Vec<Vec<f64>> = (0..geom.sensor_count)
        .into_par_iter()
        .map(|s| {
            let mut u = vec![0.0; t_len];
            for row in 0..geom.grid_ny {
                for col in 0..geom.grid_nx {
                    let v = p0.get(row, col);
                    if v == 0.0 {
                        continue;
                    }
                    let w = forward_weight(geom, row, col, s);
                    let a = w.amplitude * v;
                    u[w.sample] += a * (1.0 - w.frac);
                    u[w.sample + 1] += a * w.frac;
                }
            }
            centered_difference(&u, scale)
        })
        .collect();
    Ok(Sinogram::from_channels(&channels))
}

/// Exact transpose of [`forward_project`].
pub fn adjoint_project(sino: &Sinogram, geom: &ImagingGeometry) -> Result<PressureImage> {
    geom.validate()?;
    sino.check_matches(geom)?;
    let scale = geom.sample_rate / 2.0;
    let channels: Vec<Vec<f64>> = sino
        .channels()
        .iter()
        .map(|ch| centered_difference_transpose(ch, scale))
        .collect();
    let nx = geom.grid_nx;
    let rows: Vec<Vec<f64>> = (0..geom.grid_ny)
        .into_par_iter()
        .map(|row| {
            (0..nx)
                .map(|col| {
                    let mut acc = 0.0;
                    for (s, v) in channels.iter().enumerate() {
                        let w = forward_weight(geom, row, col, s);
                        acc += w.amplitude
                            * ((1.0 - w.frac) * v[w.sample] + w.frac * v[w.sample + 1]);
                    }
                    acc
                })
                .collect()
        })
        .collect();
    PressureImage::from_vec(geom.grid_ny, nx, rows.concat())
}

/// Half-length of the single-pass band-pass kernel; the kernel has
/// `2 * BANDPASS_HALF_TAPS + 1` taps.
pub const BANDPASS_HALF_TAPS: usize = 32;

/// Linear-phase band-pass FIR: difference of two windowed-sinc low-passes with
/// cutoffs at the band edges, Blackman window, scaled to unit gain at the
/// center frequency. Cutoffs are the half-amplitude points of a single pass.
pub fn bandpass_kernel(geom: &ImagingGeometry) -> Result<Vec<f64>> {
    let (lo, hi) = geom.passband();
    if geom.sample_rate <= 2.0 * hi {
        return Err(PatError::InvalidArgument(format!(
            "sample rate {} Hz cannot represent the {} Hz upper band edge",
            geom.sample_rate, hi
        )));
    }
    let m = BANDPASS_HALF_TAPS as isize;
    let n = (2 * m + 1) as f64;
    let f_lo = lo / geom.sample_rate;
    let f_hi = hi / geom.sample_rate;
    let sinc = |x: f64| {
        if x == 0.0 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        }
    };
    let mut h: Vec<f64> = (-m..=m)
        .map(|i| {
            let x = i as f64;
            let ideal = 2.0 * f_hi * sinc(2.0 * f_hi * x) - 2.0 * f_lo * sinc(2.0 * f_lo * x);
            let phase = 2.0 * std::f64::consts::PI * (i + m) as f64 / (n - 1.0);
            let window = 0.42 - 0.5 * phase.cos() + 0.08 * (2.0 * phase).cos();
            ideal * window
        })
        .collect();
    // symmetric kernel: response at f is sum h[i] cos(2 pi f i)
    let fc = geom.center_frequency / geom.sample_rate;
    let gain: f64 = (-m..=m)
        .zip(&h)
        .map(|(i, v)| v * (2.0 * std::f64::consts::PI * fc * i as f64).cos())
        .sum();
    h.iter_mut().for_each(|v| *v /= gain);
    Ok(h)
}

/// Zero-phase band-pass of every channel.
///
/// The kernel from [`bandpass_kernel`] is applied forward and then backward in
/// time with zero extension at both ends, which equals one centered pass of
/// its autocorrelation. The effective magnitude response is the square of the
/// single-pass response and the phase is zero.
pub fn apply_bandpass(sino: &Sinogram, geom: &ImagingGeometry) -> Result<Sinogram> {
    sino.check_matches(geom)?;
    let h = bandpass_kernel(geom)?;
    let taps = h.len();
    let g: Vec<f64> = (0..2 * taps - 1)
        .map(|lag| {
            // g[lag] = sum_i h[i] h[i + lag - (taps - 1)]
            let shift = lag as isize - (taps as isize - 1);
            (0..taps)
                .filter_map(|i| {
                    let j = i as isize + shift;
                    (0..taps as isize).contains(&j).then(|| h[i] * h[j as usize])
                })
                .sum()
        })
        .collect();
    let half = (g.len() / 2) as isize;
    let channels: Vec<Vec<f64>> = sino
        .channels()
        .par_iter()
        .map(|x| {
            let n = x.len() as isize;
            (0..n)
                .map(|t| {
                    let mut acc = 0.0;
                    for (k, gk) in g.iter().enumerate() {
                        let idx = t + half - k as isize;
                        if (0..n).contains(&idx) {
                            acc += gk * x[idx as usize];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    Ok(Sinogram::from_channels(&channels))
}

/// Adds white Gaussian noise so that `10 log10(P_signal / P_noise)` equals
/// `target_snr_db`, with `P_signal` the mean square over the whole record.
///
/// Noise samples are drawn in storage order from a ChaCha8 stream seeded
/// with `seed`.
pub fn add_noise(sino: &Sinogram, target_snr_db: f64, seed: u64) -> Result<Sinogram> {
    if !target_snr_db.is_finite() {
        return Err(PatError::InvalidArgument(format!(
            "target SNR must be finite, got {target_snr_db}"
        )));
    }
    let power = sino.power();
    if power == 0.0 {
        return Err(PatError::ZeroSignal);
    }
    let sigma = (power / 10f64.powf(target_snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| PatError::InvalidArgument(format!("noise level: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = sino
        .values
        .iter()
        .map(|v| v + normal.sample(&mut rng))
        .collect();
    Ok(Sinogram {
        sample_count: sino.sample_count,
        sensor_count: sino.sensor_count,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn small_geom() -> ImagingGeometry {
        ImagingGeometry {
            grid_nx: 24,
            grid_ny: 24,
            pixel_pitch: 3.0e-4,
            sensor_count: 24,
            sample_count: 512,
            ..Default::default()
        }
    }

    #[test]
    fn zero_image_gives_zero_sinogram() {
        let g = small_geom();
        let s = forward_project(&PressureImage::for_geometry(&g), &g).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
        let back = adjoint_project(&Sinogram::for_geometry(&g), &g).unwrap();
        assert!(back.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_below_sensor_arrives_at_sample_400() {
        let g = ImagingGeometry::default();
        let mut p = PressureImage::for_geometry(&g);
        p.set(49, 64, 1.0);
        let s = forward_project(&p, &g).unwrap();
        let ch = s.channel(64);
        let support: Vec<usize> = (0..ch.len()).filter(|&t| ch[t] != 0.0).collect();
        let center = (support[0] + support[support.len() - 1]) as f64 / 2.0;
        assert!((center - 400.0).abs() <= 1.0, "{support:?}");
        // bipolar lobe: rising half positive, falling half negative
        assert!(ch[support[0]] > 0.0);
        assert!(ch[*support.last().unwrap()] < 0.0);
    }

    #[test]
    fn one_pixel_deeper_is_eight_samples_later() {
        let g = ImagingGeometry::default();
        let arrival = |row: usize| {
            let mut p = PressureImage::for_geometry(&g);
            p.set(row, 64, 1.0);
            let ch = forward_project(&p, &g).unwrap().channel(64);
            let sup: Vec<usize> = (0..ch.len()).filter(|&t| ch[t] != 0.0).collect();
            (sup[0] + sup[sup.len() - 1]) as f64 / 2.0
        };
        for row in [10, 50, 90] {
            let step = arrival(row + 1) - arrival(row);
            assert!((step - 8.0).abs() <= 1.0, "row {row}: {step}");
        }
    }

    #[test]
    fn no_energy_past_max_delay() {
        let g = small_geom();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PressureImage::from_vec(24, 24, (0..576).map(|_| rng.random::<f64>()).collect())
            .unwrap();
        let s = forward_project(&p, &g).unwrap();
        let limit = g.max_delay_samples().floor() as usize + 2;
        for t in limit + 1..g.sample_count {
            for ch in 0..g.sensor_count {
                assert_eq!(s.get(t, ch), 0.0);
            }
        }
    }

    #[test]
    fn linearity() {
        let g = small_geom();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_img = || {
            PressureImage::from_vec(24, 24, (0..576).map(|_| rng.random::<f64>() - 0.5).collect())
                .unwrap()
        };
        let x = rand_img();
        let y = rand_img();
        let mut combo = PressureImage::zeros(24, 24);
        for i in 0..576 {
            combo.values[i] = 2.0 * x.values[i] - 3.0 * y.values[i];
        }
        let fx = forward_project(&x, &g).unwrap();
        let fy = forward_project(&y, &g).unwrap();
        let fc = forward_project(&combo, &g).unwrap();
        let expect: Vec<f64> = fx.values.iter().zip(&fy.values).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let num: f64 = fc.values.iter().zip(&expect).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = expect.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(num / den < 1e-10, "{}", num / den);
    }

    #[test]
    fn adjoint_dot_product() {
        let g = small_geom();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = PressureImage::from_vec(24, 24, (0..576).map(|_| rng.random::<f64>() - 0.5).collect())
            .unwrap();
        let b = Sinogram::from_vec(
            512,
            24,
            (0..512 * 24).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let af = forward_project(&f, &g).unwrap();
        let atb = adjoint_project(&b, &g).unwrap();
        let lhs = dot(&af.values, &b.values);
        let rhs = dot(&f.values, &atb.values);
        assert!((lhs - rhs).abs() / lhs.abs().max(rhs.abs()) < 1e-10);
    }

    #[test]
    fn impulse_back_projects_onto_arc() {
        let g = ImagingGeometry::default();
        let (sensor, sample) = (40usize, 600usize);
        let mut b = Sinogram::for_geometry(&g);
        b.set(sample, sensor, 1.0);
        let img = adjoint_project(&b, &g).unwrap();
        let mut hits = 0;
        for row in 0..g.grid_ny {
            for col in 0..g.grid_nx {
                let tau = g.delay_samples(row, col, sensor);
                if img.get(row, col) != 0.0 {
                    hits += 1;
                    // only the taps k-1 and k+1 of the transposed stencil are live
                    assert!((tau - sample as f64).abs() < 2.0, "({row},{col}) tau {tau}");
                }
            }
        }
        assert!(hits > 20, "arc too sparse: {hits}");
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let g = small_geom();
        assert!(forward_project(&PressureImage::zeros(10, 24), &g).is_err());
        assert!(adjoint_project(&Sinogram::zeros(100, 24), &g).is_err());
        assert!(apply_bandpass(&Sinogram::zeros(100, 24), &g).is_err());
    }

    fn tone(g: &ImagingGeometry, freq: f64, amp: f64) -> Sinogram {
        let mut s = Sinogram::for_geometry(g);
        for t in 0..g.sample_count {
            let v = amp * (2.0 * std::f64::consts::PI * freq * t as f64 / g.sample_rate).sin();
            for ch in 0..g.sensor_count {
                s.set(t, ch, v);
            }
        }
        s
    }

    #[test]
    fn bandpass_passes_center_frequency() {
        let g = small_geom();
        let out = apply_bandpass(&tone(&g, 7.0e6, 1.0), &g).unwrap();
        // amplitude over interior samples, away from the zero-extended edges
        let peak = (100..400).map(|t| out.get(t, 3).abs()).fold(0.0, f64::max);
        assert!((0.9..=1.1).contains(&peak), "gain {peak}");
    }

    #[test]
    fn bandpass_rejects_dc() {
        let g = small_geom();
        let mut s = Sinogram::for_geometry(&g);
        s.values.iter_mut().for_each(|v| *v = 2.0);
        let out = apply_bandpass(&s, &g).unwrap();
        let resid = (100..400).map(|t| out.get(t, 0).abs()).fold(0.0, f64::max);
        assert!(resid < 0.01 * 2.0, "residual {resid}");
    }

    #[test]
    fn bandpass_zero_and_nyquist() {
        let g = small_geom();
        let z = apply_bandpass(&Sinogram::for_geometry(&g), &g).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        let slow = ImagingGeometry {
            sample_rate: 1.9e7,
            sample_count: 4096,
            ..small_geom()
        };
        assert!(apply_bandpass(&Sinogram::for_geometry(&slow), &slow).is_err());
    }

    #[test]
    fn bandpass_is_zero_phase() {
        let g = small_geom();
        let mut s = Sinogram::for_geometry(&g);
        s.set(250, 0, 1.0);
        let out = apply_bandpass(&s, &g).unwrap().channel(0);
        for k in 1..60 {
            assert!((out[250 + k] - out[250 - k]).abs() < 1e-14);
        }
        assert_eq!(
            (0..512).max_by(|&a, &b| out[a].abs().total_cmp(&out[b].abs())),
            Some(250)
        );
    }

    fn random_sino(seed: u64) -> Sinogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sinogram::from_vec(256, 16, (0..4096).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
    }

    fn realized_snr(clean: &Sinogram, noisy: &Sinogram) -> f64 {
        let noise: f64 = clean.values.iter().zip(&noisy.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / clean.values.len() as f64;
        10.0 * (clean.power() / noise).log10()
    }

    #[test]
    fn noise_hits_target_snr() {
        let s = random_sino(1);
        let n = add_noise(&s, 60.0, 42).unwrap();
        let snr = realized_snr(&s, &n);
        assert!((snr - 60.0).abs() < 0.5, "{snr}");
    }

    #[test]
    fn noise_is_seeded() {
        let s = random_sino(2);
        assert_eq!(add_noise(&s, 60.0, 9).unwrap(), add_noise(&s, 60.0, 9).unwrap());
        assert_ne!(add_noise(&s, 60.0, 9).unwrap(), add_noise(&s, 60.0, 10).unwrap());
    }

    #[test]
    fn high_snr_is_nearly_clean() {
        let s = random_sino(3);
        let n = add_noise(&s, 120.0, 1).unwrap();
        let diff: f64 = s.values.iter().zip(&n.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = s.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 2e-6, "{}", diff / norm);
    }

    #[test]
    fn zero_signal_rejected() {
        assert!(matches!(
            add_noise(&Sinogram::zeros(10, 3), 60.0, 0),
            Err(PatError::ZeroSignal)
        ));
    }

    #[test]
    fn difference_stencil_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let lhs = dot(&centered_difference(&u, 3.0), &y);
        let rhs = dot(&u, &centered_difference_transpose(&y, 3.0));
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
