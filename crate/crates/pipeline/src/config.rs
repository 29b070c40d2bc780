//! The JSON run configuration.
//!
//! Every section is optional and falls back to the desk-scale defaults;
//! unknown keys are rejected at any depth. The published schema lives in
//! `schema/run_config.schema.json` and is printed by `pat schema`.

use std::path::{Path, PathBuf};

use pat_core::phantom::VesselParams;
use pat_core::ImagingGeometry;
use pat_nn::YNetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

/// Channels of the first network level at desk scale.
pub const DESK_BASE_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    /// Measurement SNR of the simulated records, dB.
    pub snr_db: f64,
    /// Directory of binary vessel masks (PGM or PNG). Procedural masks are
    /// used when absent.
    pub mask_dir: Option<PathBuf>,
    pub vessel: VesselParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 256,
            test_count: 32,
            seed: 1,
            snr_db: 60.0,
            mask_dir: None,
            vessel: VesselParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds parameter initialization and the per-epoch shuffles.
    pub seed: u64,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            batch_size: 8,
            epochs: 60,
            seed: 0,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: ImagingGeometry,
    pub model: YNetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub dataset_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Keeps wall-clock measurements out of every written artifact so that
    /// reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: ImagingGeometry::default(),
            model: YNetConfig {
                base_channels: DESK_BASE_CHANNELS,
                ..YNetConfig::default()
            },
            train: TrainConfig::default(),
            data: DataConfig::default(),
            dataset_dir: None,
            output_dir: None,
            deterministic: true,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| PipelineError::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// The file at `path`, or the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.geometry
            .validate()
            .map_err(|e| PipelineError::Config(format!("geometry: {e}")))?;
        self.model
            .validate()
            .map_err(|e| PipelineError::Config(format!("model: {e}")))?;
        self.data
            .vessel
            .validate()
            .map_err(|e| PipelineError::Config(format!("data.vessel: {e}")))?;
        let g = &self.geometry;
        if self.model.signal_shape != [g.sample_count, g.sensor_count] {
            return bad(format!(
                "model.signal_shape {:?} does not match the geometry record {}x{}",
                self.model.signal_shape, g.sample_count, g.sensor_count
            ));
        }
        if self.model.image_shape != [g.grid_ny, g.grid_nx] {
            return bad(format!(
                "model.image_shape {:?} does not match the geometry grid {}x{}",
                self.model.image_shape, g.grid_ny, g.grid_nx
            ));
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", t.lr));
        }
        if t.batch_size == 0 || t.epochs == 0 {
            return bad("train.batch_size and train.epochs must be at least 1".into());
        }
        if !self.data.snr_db.is_finite() {
            return bad("data.snr_db must be finite".into());
        }
        if self.data.train_count + self.data.test_count == 0 {
            return bad("data.train_count + data.test_count must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json(&cfg.to_json(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_json("{}", Path::new("mem")).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        for doc in [r#"{"bogus": 1}"#, r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#, r#"{"data": {"vessel": {"x": 1}}}"#] {
            let err = RunConfig::from_json(doc, Path::new("mem")).unwrap_err().to_string();
            assert!(err.contains("unknown field"), "{err}");
        }
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let doc = r#"{"model": {"image_shape": [64, 64]}}"#;
        assert!(RunConfig::from_json(doc, Path::new("mem")).is_err());
        let doc = r#"{"train": {"batch_size": 0}}"#;
        assert!(RunConfig::from_json(doc, Path::new("mem")).is_err());
    }

    /// Every key the structs serialize appears in the schema and vice versa.
    #[test]
    fn schema_describes_the_structs() {
        fn walk(value: &Value, schema: &Value, root: &Value, path: &str) {
            let schema = match schema.get("$ref").and_then(Value::as_str) {
                Some(r) => &root["$defs"][r.trim_start_matches("#/$defs/")],
                None => schema,
            };
            if let Value::Object(fields) = value {
                let props = schema["properties"].as_object().unwrap_or_else(|| panic!("{path}: no properties"));
                assert_eq!(schema["additionalProperties"], Value::Bool(false), "{path}");
                let mut a: Vec<_> = fields.keys().collect();
                let mut b: Vec<_> = props.keys().collect();
                a.sort();
                b.sort();
                assert_eq!(a, b, "{path}");
                for (k, v) in fields {
                    walk(v, &props[k], root, &format!("{path}.{k}"));
                }
            }
        }
        let schema: Value = serde_json::from_str(SCHEMA).unwrap();
        let value = serde_json::to_value(RunConfig::default()).unwrap();
        walk(&value, &schema, &schema, "$");
    }
}
