//! Single-input reconstruction.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pat_core::image_io::{write_preview, PreviewScale};
use pat_core::tensor_file::TensorFile;
use pat_core::{das_reconstruct, ubp_reconstruct, ImagingGeometry, PressureImage, Sinogram};
use pat_nn::Variant;

use crate::checkpoint::Checkpoint;
use crate::dataset::Sample;
use crate::error::{PipelineError, Result};
use crate::evaluate::{predict_images, Method};

/// A record or a beamformed image, told apart by shape.
#[derive(Debug, Clone)]
pub enum ReconInput {
    Record(Sinogram),
    Image(PressureImage),
}

impl ReconInput {
    pub fn load(path: &Path, geom: &ImagingGeometry) -> Result<Self> {
        let t = TensorFile::load(path)?;
        match t.shape.as_slice() {
            &[a, b] if [a, b] == [geom.sample_count, geom.sensor_count] => Ok(ReconInput::Record(t.to_sinogram()?)),
            &[a, b] if [a, b] == [geom.grid_ny, geom.grid_nx] => Ok(ReconInput::Image(t.to_image()?)),
            other => Err(PipelineError::Usage(format!(
                "{} has shape {other:?}; the geometry expects a {}x{} record or a {}x{} image",
                path.display(),
                geom.sample_count,
                geom.sensor_count,
                geom.grid_ny,
                geom.grid_nx
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub method: Method,
    pub image: PressureImage,
    /// Wall-clock time of the reconstruction itself.
    pub seconds: f64,
}

/// Reconstructs one input. Learned methods need `checkpoint`; every method
/// except `unet_post` needs a record rather than an image.
pub fn reconstruct_single(
    input: &ReconInput,
    method: Method,
    checkpoint: Option<&Path>,
    geom: &ImagingGeometry,
) -> Result<Reconstruction> {
    let model = match method {
        Method::GroundTruth => return Err(PipelineError::Usage("'gt' is not a reconstruction method".into())),
        Method::Learned(v) => {
            let path = checkpoint.ok_or_else(|| PipelineError::MissingCheckpoint(v.to_string()))?;
            let c = Checkpoint::load(path)?;
            if c.model.config.variant != v {
                return Err(PipelineError::Usage(format!(
                    "{} holds a {} network, not {v}",
                    path.display(),
                    c.model.config.variant
                )));
            }
            if c.model.config.image_shape != [geom.grid_ny, geom.grid_nx]
                || c.model.config.signal_shape != [geom.sample_count, geom.sensor_count]
            {
                return Err(PipelineError::Usage(format!("{} was trained for another geometry", path.display())));
            }
            Some(c.model)
        }
        _ => None,
    };
    let started = Instant::now();
    let image = match (method, input) {
        (Method::Das, ReconInput::Record(s)) => das_reconstruct(s, geom)?,
        (Method::Ubp, ReconInput::Record(s)) => ubp_reconstruct(s, geom)?,
        (Method::Learned(v), _) => {
            let (sinogram, das) = match input {
                ReconInput::Record(s) => (s.clone(), das_reconstruct(s, geom)?),
                ReconInput::Image(im) if v == Variant::UnetPost => {
                    (Sinogram::for_geometry(geom), im.clone())
                }
                ReconInput::Image(_) => {
                    return Err(PipelineError::Usage(format!("{v} needs a sensor record as input")));
                }
            };
            let sample = Sample {
                id: "input".into(),
                phantom: PressureImage::for_geometry(geom),
                sinogram,
                das,
            };
            let model = model.expect("learned methods load a model");
            predict_images(&model, &[&sample])?.remove(0)
        }
        (m, ReconInput::Image(_)) => {
            return Err(PipelineError::Usage(format!("{m} needs a sensor record as input")));
        }
        (Method::GroundTruth, _) => unreachable!(),
    };
    Ok(Reconstruction {
        method,
        image,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Writes `out` (a PATN file) plus `.pgm` and `.png` previews next to it and
/// returns every path written.
pub fn write_reconstruction(rec: &Reconstruction, out: &Path) -> Result<Vec<PathBuf>> {
    let scale = match rec.method {
        Method::Learned(_) => PreviewScale::Unit,
        _ => PreviewScale::Symmetric,
    };
    TensorFile::from_image_f32(&rec.image).save(out)?;
    let mut written = vec![out.to_path_buf()];
    for ext in ["pgm", "png"] {
        let p = out.with_extension(ext);
        write_preview(&p, &rec.image, scale)?;
        written.push(p);
    }
    Ok(written)
}
