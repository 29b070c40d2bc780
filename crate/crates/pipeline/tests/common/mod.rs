//! Small configurations shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pat_core::ImagingGeometry;
use pat_nn::YNetConfig;
use pat_pipeline::config::{DataConfig, TrainConfig};
use pat_pipeline::RunConfig;

/// A 32 x 32 grid under 32 sensors with a 384-sample record: the same
/// physics at a size where whole workflows take seconds.
pub fn small_run() -> RunConfig {
    let geometry = ImagingGeometry {
        grid_nx: 32,
        grid_ny: 32,
        sensor_count: 32,
        sample_count: 384,
        ..ImagingGeometry::default()
    };
    RunConfig {
        model: YNetConfig {
            base_channels: 2,
            signal_shape: [384, 32],
            image_shape: [32, 32],
            ..YNetConfig::default()
        },
        train: TrainConfig {
            batch_size: 2,
            epochs: 3,
            checkpoint_every: 1,
            ..TrainConfig::default()
        },
        data: DataConfig {
            train_count: 4,
            test_count: 2,
            ..DataConfig::default()
        },
        geometry,
        ..RunConfig::default()
    }
}

/// Relative path → contents of every file below `root`.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
