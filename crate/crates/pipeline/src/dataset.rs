//! Synthetic training pairs on disk.
//!
//! Each sample runs the chain vessel mask → composed phantom → forward
//! projection → band-pass → noise → delay-and-sum and stores the phantom, the
//! noisy record and the beamformed image as `f32` PATN files. The
//! beamformed image is computed from the stored (rounded) record, so
//! re-beamforming a stored record reproduces it bit for bit.
//!
//! Per-sample seeds come from stream `index` of a ChaCha8 generator keyed by
//! the dataset seed, which makes every sample independent of the others and
//! of the order in which they are produced.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use pat_core::image_io::{read_mask, write_preview, PreviewScale};
use pat_core::phantom::{compose_vessel_phantom, procedural_vessel_mask, BinaryMask};
use pat_core::tensor_file::TensorFile;
use pat_core::{add_noise, apply_bandpass, das_reconstruct, forward_project, ImagingGeometry, PressureImage, Sinogram};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{PipelineError, Result};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    /// Paths are relative to the manifest's directory.
    pub phantom: PathBuf,
    pub sinogram: PathBuf,
    pub das: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreviewScaling {
    pub phantom: String,
    pub das: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub snr_db: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub mask_source: String,
    pub geometry: ImagingGeometry,
    pub preview_scaling: PreviewScaling,
    pub samples: Vec<SampleEntry>,
}

/// One loaded training pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub phantom: PressureImage,
    pub sinogram: Sinogram,
    pub das: PressureImage,
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

enum MaskSource {
    Procedural,
    Files(Vec<(PathBuf, BinaryMask)>),
}

impl MaskSource {
    fn open(cfg: &DataConfig) -> Result<Self> {
        let Some(dir) = &cfg.mask_dir else {
            return Ok(MaskSource::Procedural);
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| PipelineError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(PipelineError::Dataset(format!("no .pgm or .png masks in {}", dir.display())));
        }
        let masks = paths
            .into_iter()
            .map(|p| read_mask(&p).map(|m| (p, m)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(MaskSource::Files(masks))
    }

    fn describe(&self) -> String {
        match self {
            MaskSource::Procedural => "procedural".into(),
            MaskSource::Files(m) => format!("{} mask files", m.len()),
        }
    }
}

fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// The seeds a sample draws from: mask, composition and noise.
fn sample_seeds(dataset_seed: u64, index: usize) -> (u64, [u64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index as u64);
    let base = rng.next_u64();
    (base, [rng.next_u64(), rng.next_u64(), rng.next_u64()])
}

/// Simulates one sample in memory.
pub fn simulate_sample(
    index: usize,
    cfg: &DataConfig,
    geom: &ImagingGeometry,
) -> Result<(u64, PressureImage, Sinogram, PressureImage)> {
    simulate_with(index, cfg, geom, &MaskSource::open(cfg)?)
}

fn simulate_with(
    index: usize,
    cfg: &DataConfig,
    geom: &ImagingGeometry,
    masks: &MaskSource,
) -> Result<(u64, PressureImage, Sinogram, PressureImage)> {
    if geom.grid_nx != geom.grid_ny {
        return Err(PipelineError::Config(format!(
            "vessel phantoms need a square grid, got {}x{}",
            geom.grid_ny, geom.grid_nx
        )));
    }
    let (base, [mask_seed, compose_seed, noise_seed]) = sample_seeds(cfg.seed, index);
    let phantom = draw_phantom(mask_seed, compose_seed, cfg, geom, masks)
        .map_err(|e| PipelineError::Dataset(format!("{}: {e}", sample_id(index))))?;
    let clean = apply_bandpass(&forward_project(&phantom, geom)?, geom)?;
    let noisy = add_noise(&clean, cfg.snr_db, noise_seed)?;
    // beamform what is stored, not the f64 original
    let stored = TensorFile::from_sinogram_f32(&noisy).to_sinogram()?;
    let das = das_reconstruct(&stored, geom)?;
    let das = TensorFile::from_image_f32(&das).to_image()?;
    let phantom = TensorFile::from_image_f32(&phantom).to_image()?;
    Ok((base, phantom, stored, das))
}

/// Redraws allowed when two drawn quadrants hold no vessel at all.
const PHANTOM_ATTEMPTS: usize = 32;

/// Composes a phantom that is not entirely empty. The first attempt uses the
/// given seeds; later ones draw fresh seeds from a generator keyed by them.
fn draw_phantom(
    mask_seed: u64,
    compose_seed: u64,
    cfg: &DataConfig,
    geom: &ImagingGeometry,
    masks: &MaskSource,
) -> Result<PressureImage> {
    let mut redraw = ChaCha8Rng::seed_from_u64(mask_seed ^ compose_seed.rotate_left(32));
    let (mut mask_seed, mut compose_seed) = (mask_seed, compose_seed);
    for _ in 0..PHANTOM_ATTEMPTS {
        let procedural;
        let mask = match masks {
            MaskSource::Procedural => {
                procedural = procedural_vessel_mask(mask_seed, &cfg.vessel)?;
                &procedural
            }
            MaskSource::Files(list) => {
                let pick = ChaCha8Rng::seed_from_u64(mask_seed).random_range(0..list.len());
                &list[pick].1
            }
        };
        let phantom = compose_vessel_phantom(mask, compose_seed, geom.grid_nx)?;
        if phantom.max_abs() > 0.0 {
            return Ok(phantom);
        }
        (mask_seed, compose_seed) = (redraw.next_u64(), redraw.next_u64());
    }
    Err(PipelineError::Dataset(format!(
        "{} draws in a row gave an empty phantom; the vessel source is too sparse",
        PHANTOM_ATTEMPTS
    )))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| PipelineError::io(path, e))
}

/// Generates `train_count + test_count` samples under `out` and writes the
/// manifest. The first `train_count` samples form the training split.
pub fn build_dataset(cfg: &DataConfig, geom: &ImagingGeometry, out: &Path) -> Result<Dataset> {
    let total = cfg.train_count + cfg.test_count;
    if total == 0 {
        return Err(PipelineError::Usage("the dataset needs at least one sample".into()));
    }
    geom.validate()?;
    let masks = MaskSource::open(cfg)?;
    create_dir(&out.join("samples"))?;
    create_dir(&out.join("previews"))?;
    let entries = (0..total)
        .into_par_iter()
        .map(|i| -> Result<SampleEntry> {
            let (seed, phantom, sino, das) = simulate_with(i, cfg, geom, &masks)?;
            let id = sample_id(i);
            let rel = |kind: &str| PathBuf::from("samples").join(format!("{id}_{kind}.patn"));
            let entry = SampleEntry {
                split: if i < cfg.train_count { Split::Train } else { Split::Test },
                seed,
                phantom: rel("gt"),
                sinogram: rel("sino"),
                das: rel("das"),
                id: id.clone(),
            };
            TensorFile::from_image_f32(&phantom).save(out.join(&entry.phantom))?;
            TensorFile::from_sinogram_f32(&sino).save(out.join(&entry.sinogram))?;
            TensorFile::from_image_f32(&das).save(out.join(&entry.das))?;
            for ext in ["pgm", "png"] {
                let p = out.join("previews");
                write_preview(p.join(format!("{id}_gt.{ext}")), &phantom, PreviewScale::Unit)?;
                write_preview(p.join(format!("{id}_das.{ext}")), &das, PreviewScale::Symmetric)?;
            }
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format: FORMAT,
        seed: cfg.seed,
        snr_db: cfg.snr_db,
        train_count: cfg.train_count,
        test_count: cfg.test_count,
        mask_source: masks.describe(),
        geometry: geom.clone(),
        preview_scaling: PreviewScaling {
            phantom: PreviewScale::Unit.describe().into(),
            das: PreviewScale::Symmetric.describe().into(),
        },
        samples: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    let path = out.join(MANIFEST);
    fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))?;
    Ok(Dataset {
        root: out.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    /// Opens `dir/manifest.json` and checks its consistency.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|source| PipelineError::Json { path: path.clone(), source })?;
        if manifest.format != FORMAT {
            return Err(PipelineError::Dataset(format!("unsupported manifest format {}", manifest.format)));
        }
        let mut ids = HashSet::new();
        for e in &manifest.samples {
            if !ids.insert(e.id.as_str()) {
                return Err(PipelineError::Dataset(format!("duplicate sample id {}", e.id)));
            }
            for p in [&e.phantom, &e.sinogram, &e.das] {
                if !root.join(p).is_file() {
                    return Err(PipelineError::Dataset(format!("{} lists missing file {}", e.id, p.display())));
                }
            }
        }
        let count = |s: Split| manifest.samples.iter().filter(|e| e.split == s).count();
        if count(Split::Train) != manifest.train_count || count(Split::Test) != manifest.test_count {
            return Err(PipelineError::Dataset("split counts disagree with the sample list".into()));
        }
        Ok(Self { root, manifest })
    }

    pub fn split(&self, split: Split) -> Vec<&SampleEntry> {
        self.manifest.samples.iter().filter(|e| e.split == split).collect()
    }

    pub fn load(&self, entry: &SampleEntry) -> Result<Sample> {
        let g = &self.manifest.geometry;
        let phantom = TensorFile::load(self.root.join(&entry.phantom))?.to_image()?;
        let sinogram = TensorFile::load(self.root.join(&entry.sinogram))?.to_sinogram()?;
        let das = TensorFile::load(self.root.join(&entry.das))?.to_image()?;
        let image_ok = |im: &PressureImage| im.height == g.grid_ny && im.width == g.grid_nx;
        if !image_ok(&phantom) || !image_ok(&das) || sinogram.sample_count != g.sample_count || sinogram.sensor_count != g.sensor_count
        {
            return Err(PipelineError::Dataset(format!("{} does not match the manifest geometry", entry.id)));
        }
        Ok(Sample {
            id: entry.id.clone(),
            phantom,
            sinogram,
            das,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_seeds_depend_only_on_index() {
        assert_eq!(sample_seeds(3, 7), sample_seeds(3, 7));
        assert_ne!(sample_seeds(3, 7).0, sample_seeds(3, 8).0);
        assert_ne!(sample_seeds(3, 7).0, sample_seeds(4, 7).0);
        let (_, s) = sample_seeds(3, 7);
        assert!(s[0] != s[1] && s[1] != s[2]);
    }

    #[test]
    fn phantoms_are_never_empty() {
        let cfg = DataConfig::default();
        let geom = ImagingGeometry::default();
        for i in 0..300 {
            let (_, [m, c, _]) = sample_seeds(cfg.seed, i);
            let p = draw_phantom(m, c, &cfg, &geom, &MaskSource::Procedural).unwrap();
            assert!(p.max_abs() > 0.0, "sample {i}");
        }
        // one vessel pixel in one quadrant: most draws are empty and get redrawn
        let mut sparse = BinaryMask::new(64, 64);
        sparse.data[5 * 64 + 7] = true;
        let sparse = MaskSource::Files(vec![(PathBuf::from("sparse.pgm"), sparse)]);
        for seed in 0..20 {
            assert!(draw_phantom(seed, seed + 1, &cfg, &geom, &sparse).unwrap().max_abs() > 0.0);
        }
    }

    #[test]
    fn ids_sort_in_index_order() {
        assert!(sample_id(9) < sample_id(10));
        assert_eq!(sample_id(42), "s00042");
    }
}
