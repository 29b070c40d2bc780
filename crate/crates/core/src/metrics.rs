//! Image-quality metrics.
//!
//! SSIM follows the reference formulation of Wang et al.: an 11x11 Gaussian
//! window with sigma 1.5, `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` with `L = 1`,
//! evaluated at every position where the window fits inside the image and
//! averaged. Inputs are clamped to `[0, 1]` first.

use serde::{Deserialize, Serialize};

use crate::geometry::PressureImage;
use crate::{PatError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn check_same(a: &PressureImage, b: &PressureImage) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(PatError::Shape {
            expected: format!("{}x{}", b.height, b.width),
            got: format!("{}x{}", a.height, a.width),
        });
    }
    Ok(())
}

/// Separable valid-mode filtering with `taps` along both axes.
fn filter_valid(values: &[f64], height: usize, width: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let ow = width - k + 1;
    let oh = height - k + 1;
    let mut horiz = vec![0.0; height * ow];
    for r in 0..height {
        let row = &values[r * width..(r + 1) * width];
        for c in 0..ow {
            horiz[r * ow + c] = taps.iter().zip(&row[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * horiz[(r + i) * ow + c])
                .sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM between `f` and `gt` after clamping both to `[0, 1]`.
pub fn ssim(f: &PressureImage, gt: &PressureImage) -> Result<f64> {
    check_same(f, gt)?;
    if f.width < SSIM_WINDOW || f.height < SSIM_WINDOW {
        return Err(PatError::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            f.height, f.width
        )));
    }
    let x: Vec<f64> = f.values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let y: Vec<f64> = gt.values.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let (h, w) = (f.height, f.width);
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let (mx, oh, ow) = filter_valid(&x, h, w, &taps);
    let (my, ..) = filter_valid(&y, h, w, &taps);
    let (sxx, ..) = filter_valid(&xx, h, w, &taps);
    let (syy, ..) = filter_valid(&yy, h, w, &taps);
    let (sxy, ..) = filter_valid(&xy, h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..oh * ow)
        .map(|i| {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let var_x = sxx[i] - mu_x * mu_x;
            let var_y = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
        })
        .sum();
    Ok(total / (oh * ow) as f64)
}

/// `10 log10(i_max^2 / MSE)` with MSE the plain mean of squared differences.
/// Identical images give `f64::INFINITY`.
pub fn psnr(f: &PressureImage, gt: &PressureImage, i_max: f64) -> Result<f64> {
    check_same(f, gt)?;
    let mse = f
        .values
        .iter()
        .zip(&gt.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / f.values.len() as f64;
    Ok(psnr_from_mse(mse, i_max))
}

pub fn psnr_from_mse(mse: f64, i_max: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (i_max * i_max / mse).log10()
    }
}

/// `10 log10((peak / sigma_b)^2)`: peak over the whole image, population
/// standard deviation over the pixels where `background` is true.
pub fn snr(f: &PressureImage, background: &[bool]) -> Result<f64> {
    if background.len() != f.values.len() {
        return Err(PatError::shape(f.values.len(), background.len()));
    }
    let n = background.iter().filter(|&&b| b).count();
    if n == 0 {
        return Err(PatError::InvalidArgument("background mask is empty".into()));
    }
    if n == background.len() {
        return Err(PatError::InvalidArgument(
            "background mask covers the whole image".into(),
        ));
    }
    let bg: Vec<f64> = f
        .values
        .iter()
        .zip(background)
        .filter_map(|(v, &b)| b.then_some(*v))
        .collect();
    let mean = bg.iter().sum::<f64>() / n as f64;
    let sigma = (bg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sigma == 0.0 {
        return Err(PatError::InvalidArgument(
            "background standard deviation is zero, SNR is undefined".into(),
        ));
    }
    let peak = f.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(10.0 * (peak / sigma).powi(2).log10())
}

/// Background for synthetic data: ground-truth pixels below `threshold`.
pub fn background_from_ground_truth(gt: &PressureImage, threshold: f64) -> Vec<bool> {
    gt.values.iter().map(|&v| v < threshold).collect()
}

/// Background from a user rectangle `[row0, row1) x [col0, col1)`.
pub fn background_from_rect(
    height: usize,
    width: usize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Vec<bool> {
    let mut m = vec![false; height * width];
    for r in rows.start..rows.end.min(height) {
        for c in cols.start..cols.end.min(width) {
            m[r * width + c] = true;
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileLine {
    Row(usize),
    Column(usize),
}

pub fn line_profile(img: &PressureImage, line: ProfileLine) -> Result<Vec<f64>> {
    match line {
        ProfileLine::Row(r) if r < img.height => Ok((0..img.width).map(|c| img.get(r, c)).collect()),
        ProfileLine::Column(c) if c < img.width => {
            Ok((0..img.height).map(|r| img.get(r, c)).collect())
        }
        other => Err(PatError::InvalidArgument(format!(
            "{other:?} is outside the {}x{} image",
            img.height, img.width
        ))),
    }
}

/// Scores of one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub ssim: f64,
    /// `f64::INFINITY` for a perfect match.
    pub psnr_db: f64,
    /// `None` when the background deviation is zero.
    pub snr_db: Option<f64>,
}

/// Background threshold used for synthetic ground truth.
pub const BACKGROUND_THRESHOLD: f64 = 0.05;

/// SSIM, PSNR and SNR of `f` against `gt`, all on `f` clamped to `[0, 1]`.
pub fn score(f: &PressureImage, gt: &PressureImage) -> Result<ImageScores> {
    let fc = f.clamped(0.0, 1.0);
    let ssim_v = ssim(&fc, gt)?;
    let psnr_v = psnr(&fc, gt, 1.0)?;
    let bg = background_from_ground_truth(gt, BACKGROUND_THRESHOLD);
    let snr_v = snr(&fc, &bg).ok();
    Ok(ImageScores {
        ssim: ssim_v,
        psnr_db: psnr_v,
        snr_db: snr_v,
    })
}

/// Mean and population standard deviation of the finite entries, and how many
/// entries were left out.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let mut kept = Vec::new();
    let mut skipped = 0;
    for v in values {
        if v.is_finite() {
            kept.push(v);
        } else {
            skipped += 1;
        }
    }
    if kept.is_empty() {
        return (f64::NAN, f64::NAN, skipped);
    }
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt(), skipped)
}
