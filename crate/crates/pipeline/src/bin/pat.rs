use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use pat_nn::Variant;
use pat_pipeline::config::{RunConfig, SCHEMA};
use pat_pipeline::dataset::{build_dataset, Dataset};
use pat_pipeline::evaluate::{evaluate, load_models, parse_methods, Method};
use pat_pipeline::recon::{reconstruct_single, write_reconstruction, ReconInput};
use pat_pipeline::train::{train, TrainOptions};
use pat_pipeline::{init_threads, PipelineError};

/// Photoacoustic reconstruction toolkit.
///
/// The worker thread count follows PAT_NUM_THREADS when set.
#[derive(Parser)]
#[command(name = "pat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of phantoms, sensor records and DAS images.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total number of samples; overrides the configured split sizes.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: Option<u64>,
        /// Test samples among --count (default keeps the configured ratio, at least one).
        #[arg(long, requires = "count")]
        test_count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network on the training split of a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// full, enc2_only_skips, enc1_only_skips or unet_post.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score methods on the test split and write report.csv.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoints of the learned methods, one per variant.
        #[arg(long = "ckpt", num_args = 1..)]
        ckpt: Vec<PathBuf>,
        /// Comma-separated: gt, das, ubp, ynet, unet or variant names.
        #[arg(long, default_value = "das,ubp")]
        methods: String,
        /// Also write |gt - f| images.
        #[arg(long)]
        diff: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a single record or image.
    Recon {
        /// PATN record (time x sensors) or, for unet_post, a DAS image.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output PATN path; previews are written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the JSON schema of the run configuration.
    Schema,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: pat_nn::NnError| e.to_string())
}

fn dir_or(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, PipelineError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| PipelineError::Usage(format!("--{name} is required (or set it in the configuration)")))
}

fn usage(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).exit()
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    init_threads()?;
    match cli.command {
        Command::Gen {
            config,
            count,
            test_count,
            seed,
            out,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            let out = dir_or(out, &cfg.dataset_dir, "out")?;
            if let Some(n) = count {
                let n = n as usize;
                let ratio = cfg.data.test_count as f64 / (cfg.data.train_count + cfg.data.test_count) as f64;
                let test = test_count.unwrap_or_else(|| ((n as f64 * ratio).round() as usize).max(1).min(n - 1));
                if test > n {
                    return Err(PipelineError::Usage(format!("--test-count {test} exceeds --count {n}")));
                }
                cfg.data.test_count = test;
                cfg.data.train_count = n - test;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let ds = build_dataset(&cfg.data, &cfg.geometry, &out)?;
            println!(
                "wrote {} samples ({} train, {} test) to {}",
                ds.manifest.samples.len(),
                ds.manifest.train_count,
                ds.manifest.test_count,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            variant,
            epochs,
            resume,
            quiet,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            let data = dir_or(data, &cfg.dataset_dir, "data")?;
            let out = dir_or(out, &cfg.output_dir, "out")?;
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let ds = Dataset::open(&data)?;
            let summary = train(&ds, &cfg, &out, &TrainOptions { resume, progress: !quiet })?;
            println!(
                "trained {} for {} epochs ({} steps); total loss {:?} -> {:?}",
                summary.variant, summary.epochs, summary.steps, summary.first_total, summary.last_total
            );
        }
        Command::Eval {
            config,
            data,
            ckpt,
            methods,
            diff,
            out,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let data = dir_or(data, &cfg.dataset_dir, "data")?;
            let out = dir_or(out, &cfg.output_dir, "out")?;
            let methods = parse_methods(&methods)?;
            let models = load_models(&ckpt)?;
            let ds = Dataset::open(&data)?;
            std::fs::create_dir_all(&out).map_err(|e| PipelineError::Io { path: out.clone(), source: e })?;
            let diff_dir = out.join("diff");
            let report = evaluate(&ds, &methods, &models, diff.then_some(diff_dir.as_path()))?;
            let path = out.join("report.csv");
            std::fs::write(&path, report.to_csv()).map_err(|e| PipelineError::Io { path: path.clone(), source: e })?;
            for a in &report.aggregates {
                println!(
                    "{:<16} ssim {:.4}  psnr {:.2} dB  snr {:.2} dB",
                    a.method.name(),
                    a.ssim.0,
                    a.psnr_db.0,
                    a.snr_db.0
                );
            }
            println!("wrote {}", path.display());
        }
        Command::Recon {
            input,
            method,
            ckpt,
            out,
            config,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let method: Method = method.parse().unwrap_or_else(|e| usage(e));
            if matches!(method, Method::Learned(_)) && ckpt.is_none() {
                usage(format!("--ckpt is required for method {method}"));
            }
            let inp = ReconInput::load(&input, &cfg.geometry)?;
            let rec = reconstruct_single(&inp, method, ckpt.as_deref(), &cfg.geometry)?;
            let written = write_reconstruction(&rec, &out)?;
            println!("{method} reconstruction took {:.4} s", rec.seconds);
            for p in written {
                println!("wrote {}", Path::new(&p).display());
            }
        }
        Command::Schema => print!("{SCHEMA}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(PipelineError::Usage(msg)) => usage(msg),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
