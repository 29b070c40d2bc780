//! The training loop.
//!
//! Parameters are initialized from `train.seed`; epoch `e` visits the
//! training split in the order of a shuffle drawn from stream `e + 1` of a
//! ChaCha8 generator keyed by the same seed, so a run resumed from an epoch
//! checkpoint sees exactly the batches an uninterrupted run would.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pat_nn::{AdamConfig, AdamState, Batch, NnError, Tensor, YNet, YNetConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{epoch_path, Checkpoint, FINAL};
use crate::config::RunConfig;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{PipelineError, Result};

pub const LOSS_LOG: &str = "loss.csv";
pub const SUMMARY: &str = "train_summary.json";
const LOG_HEADER: &str = "epoch,batch,l_rec,l_aux,total";

/// Network inputs of a batch: the record scaled to unit peak magnitude per
/// sample, the beamformed image and the phantom as target.
pub fn network_batch(samples: &[&Sample], cfg: &YNetConfig) -> Result<Batch<f32>> {
    let [sh, sw] = cfg.signal_shape;
    let [ih, iw] = cfg.image_shape;
    let b = samples.len();
    let mut signals = Vec::with_capacity(b * sh * sw);
    let mut images = Vec::with_capacity(b * ih * iw);
    let mut targets = Vec::with_capacity(b * ih * iw);
    for s in samples {
        let peak = s.sinogram.max_abs();
        let scale = if peak > 0.0 { 1.0 / peak } else { 0.0 };
        signals.extend(s.sinogram.values.iter().map(|&v| (v * scale) as f32));
        images.extend(s.das.values.iter().map(|&v| v as f32));
        targets.extend(s.phantom.values.iter().map(|&v| v as f32));
    }
    Ok(Batch {
        signals: cfg.uses_signal().then(|| Tensor::new(vec![b, 1, sh, sw], signals)).transpose()?,
        images: Some(Tensor::new(vec![b, 1, ih, iw], images)?),
        targets: Tensor::new(vec![b, 1, ih, iw], targets)?,
    })
}

/// Visiting order of the training split in `epoch` (0-based).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: String,
    pub base_channels: usize,
    pub epochs: usize,
    pub steps: usize,
    pub first_total: Option<f64>,
    pub last_total: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

/// Log rows of epochs up to `epochs_done` from an earlier run, so a resumed
/// log matches an uninterrupted one.
fn kept_log(path: &Path, epochs_done: usize) -> Result<String> {
    let mut out = format!("{LOG_HEADER}\n");
    if epochs_done == 0 || !path.exists() {
        return Ok(out);
    }
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    for line in text.lines().skip(1) {
        let epoch: usize = line
            .split(',')
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| PipelineError::Dataset(format!("malformed loss log line '{line}'")))?;
        if epoch <= epochs_done {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains the configured variant on the training split of `data`, writing
/// checkpoints, `loss.csv` and `train_summary.json` under `out`.
pub fn train(data: &Dataset, run: &RunConfig, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    run.validate()?;
    if data.manifest.geometry != run.geometry {
        return Err(PipelineError::Config("the dataset geometry differs from the configuration".into()));
    }
    let entries = data.split(Split::Train);
    if entries.is_empty() {
        return Err(PipelineError::Dataset("the training split is empty".into()));
    }
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let tc = &run.train;
    let mut state = match &opts.resume {
        Some(path) => {
            let c = Checkpoint::load(path)?;
            if c.model.config != run.model {
                return Err(PipelineError::Config(format!(
                    "{} was trained with a different model configuration",
                    path.display()
                )));
            }
            c
        }
        None => {
            let model = YNet::<f32>::init(run.model, tc.seed)?;
            let adam = AdamState::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, &model.params);
            Checkpoint {
                model,
                adam,
                train: tc.clone(),
                epochs_done: 0,
            }
        }
    };
    state.adam.config.lr = tc.lr;
    state.train = tc.clone();
    let log_path = out.join(LOSS_LOG);
    let mut log = kept_log(&log_path, state.epochs_done)?;
    let started = Instant::now();
    let mut steps = 0;
    let (mut first, mut last) = (None, None);
    for epoch in state.epochs_done..tc.epochs {
        let order = epoch_order(tc.seed, epoch, entries.len());
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&i| data.load(entries[i]))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let batch = network_batch(&refs, &run.model)?;
            let non_finite = || PipelineError::NonFiniteLoss {
                epoch: epoch + 1,
                batch: b + 1,
                samples: samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(" "),
            };
            let step = match state.model.step(&batch) {
                Err(NnError::NonFinite(_)) => return Err(non_finite()),
                other => other?,
            };
            let l = step.loss;
            if !(l.total.is_finite() && l.reconstruction.is_finite() && l.auxiliary.is_finite()) {
                return Err(non_finite());
            }
            state.adam.update(&mut state.model.params, &step.grads)?;
            state.model.apply_bn_updates(&step.bn_updates)?;
            writeln!(log, "{},{},{},{},{}", epoch + 1, b + 1, l.reconstruction, l.auxiliary, l.total).unwrap();
            first.get_or_insert(l.total);
            last = Some(l.total);
            epoch_sum += l.total;
            batches += 1;
            steps += 1;
        }
        state.epochs_done = epoch + 1;
        write(&log_path, &log)?;
        if tc.checkpoint_every > 0 && state.epochs_done % tc.checkpoint_every == 0 && state.epochs_done < tc.epochs {
            state.save(epoch_path(out, state.epochs_done))?;
        }
        if opts.progress {
            eprintln!(
                "epoch {}/{}: mean total loss {:.6e} over {batches} batches ({:.0} s)",
                state.epochs_done,
                tc.epochs,
                epoch_sum / batches as f64,
                started.elapsed().as_secs_f64()
            );
        }
    }
    write(&log_path, &log)?;
    state.save(out.join(FINAL))?;
    let summary = TrainSummary {
        variant: run.model.variant.to_string(),
        base_channels: run.model.base_channels,
        epochs: state.epochs_done,
        steps,
        first_total: first,
        last_total: last,
        seconds: (!run.deterministic).then(|| started.elapsed().as_secs_f64()),
    };
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write(&out.join(SUMMARY), &text)?;
    Ok(summary)
}

/// One parsed row of `loss.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub batch: usize,
    pub reconstruction: f64,
    pub auxiliary: f64,
    pub total: f64,
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let malformed = |line: &str| PipelineError::Dataset(format!("malformed loss log line '{line}'"));
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(malformed(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| malformed(line));
            Ok(LogRow {
                epoch: f[0].parse().map_err(|_| malformed(line))?,
                batch: f[1].parse().map_err(|_| malformed(line))?,
                reconstruction: num(2)?,
                auxiliary: num(3)?,
                total: num(4)?,
            })
        })
        .collect()
}
