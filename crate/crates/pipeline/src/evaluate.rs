//! Scoring reconstructions of the test split.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pat_core::image_io::{write_preview, PreviewScale};
use pat_core::metrics::score;
use pat_core::{ubp_reconstruct, PressureImage};
use pat_nn::{Variant, YNet};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{PipelineError, Result};
use crate::train::network_batch;

/// Samples per inference batch.
const INFERENCE_BATCH: usize = 8;

/// A reconstruction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// The ground truth itself, a sanity reference.
    GroundTruth,
    Das,
    Ubp,
    Learned(Variant),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GroundTruth => "gt",
            Method::Das => "das",
            Method::Ubp => "ubp",
            Method::Learned(v) => v.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = PipelineError;

    /// Accepts `gt`, `das`, `ubp`, a variant name, and the aliases `ynet`
    /// (full variant) and `unet` (`unet_post`).
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gt" => Method::GroundTruth,
            "das" => Method::Das,
            "ubp" => Method::Ubp,
            "ynet" => Method::Learned(Variant::Full),
            "unet" => Method::Learned(Variant::UnetPost),
            other => Method::Learned(other.parse().map_err(|_| {
                PipelineError::Usage(format!(
                    "unknown method '{other}' (expected gt, das, ubp, ynet, unet or a variant name)"
                ))
            })?),
        })
    }
}

/// Parses a comma-separated method list.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let methods = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Method>>>()?;
    if methods.is_empty() {
        return Err(PipelineError::Usage("no methods given".into()));
    }
    Ok(methods)
}

/// Loads checkpoints and indexes them by variant.
pub fn load_models(paths: &[PathBuf]) -> Result<HashMap<Variant, YNet<f32>>> {
    let mut models = HashMap::new();
    for p in paths {
        let c = Checkpoint::load(p)?;
        let v = c.model.config.variant;
        if models.insert(v, c.model).is_some() {
            return Err(PipelineError::Usage(format!("two checkpoints for variant {v}")));
        }
    }
    Ok(models)
}

/// Reconstructs `samples` with a trained network, in inference batches.
pub fn predict_images(model: &YNet<f32>, samples: &[&Sample]) -> Result<Vec<PressureImage>> {
    let [h, w] = model.config.image_shape;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFERENCE_BATCH) {
        let batch = network_batch(chunk, &model.config)?;
        let pred = model.predict(batch.signals.as_ref(), batch.images.as_ref())?;
        for i in 0..chunk.len() {
            let values = pred.sample(i).iter().map(|&v| v as f64).collect();
            out.push(PressureImage::from_vec(h, w, values)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub sample_id: String,
    pub method: Method,
    pub ssim: f64,
    pub psnr_db: f64,
    /// NaN when the background deviation vanishes.
    pub snr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub method: Method,
    pub ssim: (f64, f64),
    pub psnr_db: (f64, f64),
    pub snr_db: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ScoreRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Mean and population deviation of the non-NaN values. An infinite value
/// makes the mean infinite.
fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v}")
    }
}

pub const AGGREGATE_MEAN: &str = "__mean__";
pub const AGGREGATE_STD: &str = "__std__";

impl EvalReport {
    pub fn aggregate(&self, method: Method) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.method == method)
    }

    /// Per-sample rows, then a mean row and a deviation row per method.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id,method,ssim,psnr_db,snr_db\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r.sample_id, r.method, num(r.ssim), num(r.psnr_db), num(r.snr_db)).unwrap();
        }
        for a in &self.aggregates {
            writeln!(s, "{AGGREGATE_MEAN},{},{},{},{}", a.method, num(a.ssim.0), num(a.psnr_db.0), num(a.snr_db.0)).unwrap();
            writeln!(s, "{AGGREGATE_STD},{},{},{},{}", a.method, num(a.ssim.1), num(a.psnr_db.1), num(a.snr_db.1)).unwrap();
        }
        s
    }
}

/// Scores every requested method on the test split. Learned methods take
/// their network from `models`; with `diff_dir`, `|gt - f|` images are
/// written there as PGM.
pub fn evaluate(
    data: &Dataset,
    methods: &[Method],
    models: &HashMap<Variant, YNet<f32>>,
    diff_dir: Option<&Path>,
) -> Result<EvalReport> {
    for m in methods {
        if let Method::Learned(v) = m {
            if !models.contains_key(v) {
                return Err(PipelineError::MissingCheckpoint(v.to_string()));
            }
        }
    }
    let entries = data.split(Split::Test);
    if entries.is_empty() {
        return Err(PipelineError::Dataset("the test split is empty".into()));
    }
    if let Some(d) = diff_dir {
        fs::create_dir_all(d).map_err(|e| PipelineError::io(d, e))?;
    }
    let samples = entries.iter().map(|e| data.load(e)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let geom = &data.manifest.geometry;
    let mut rows = Vec::new();
    for &method in methods {
        let images = match method {
            Method::GroundTruth => samples.iter().map(|s| s.phantom.clone()).collect(),
            Method::Das => samples.iter().map(|s| s.das.clone()).collect(),
            Method::Ubp => samples
                .iter()
                .map(|s| ubp_reconstruct(&s.sinogram, geom))
                .collect::<std::result::Result<Vec<_>, _>>()?,
            Method::Learned(v) => predict_images(&models[&v], &refs)?,
        };
        for (s, f) in samples.iter().zip(&images) {
            let sc = score(f, &s.phantom)?;
            if let Some(d) = diff_dir {
                let fc = f.clamped(0.0, 1.0);
                let values = fc.values.iter().zip(&s.phantom.values).map(|(a, b)| (a - b).abs()).collect();
                let diff = PressureImage::from_vec(f.height, f.width, values)?;
                write_preview(d.join(format!("{}_{method}.pgm", s.id)), &diff, PreviewScale::Unit)?;
            }
            rows.push(ScoreRow {
                sample_id: s.id.clone(),
                method,
                ssim: sc.ssim,
                psnr_db: sc.psnr_db,
                snr_db: sc.snr_db.unwrap_or(f64::NAN),
            });
        }
    }
    let aggregates = methods
        .iter()
        .map(|&m| {
            let of = |f: fn(&ScoreRow) -> f64| mean_std(rows.iter().filter(|r| r.method == m).map(f));
            Aggregate {
                method: m,
                ssim: of(|r| r.ssim),
                psnr_db: of(|r| r.psnr_db),
                snr_db: of(|r| r.snr_db),
            }
        })
        .collect();
    Ok(EvalReport { rows, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in [Method::GroundTruth, Method::Das, Method::Ubp]
            .into_iter()
            .chain(Variant::ALL.map(Method::Learned))
        {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("ynet".parse::<Method>().unwrap(), Method::Learned(Variant::Full));
        assert!("tr".parse::<Method>().is_err());
        assert!(parse_methods(" , ").is_err());
        assert_eq!(parse_methods("das, ubp").unwrap(), vec![Method::Das, Method::Ubp]);
    }

    #[test]
    fn aggregate_statistics() {
        assert_eq!(mean_std([1.0, 3.0].into_iter()), (2.0, 1.0));
        assert_eq!(mean_std([1.0, f64::NAN, 3.0].into_iter()), (2.0, 1.0));
        let (m, s) = mean_std([1.0, f64::INFINITY].into_iter());
        assert!(m.is_infinite() && s.is_nan());
        assert_eq!(num(f64::INFINITY), "inf");
        assert_eq!(num(0.25), "0.25");
    }
}
