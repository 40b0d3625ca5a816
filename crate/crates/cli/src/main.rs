//! Command-line surface: dataset generation, training, evaluation,
//! single-image inference, and graph-matching inspection.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on validation failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::ArrayD;
use segadapt_core::error::{Error, Result};
use segadapt_core::graph::NodeMeta;
use segadapt_core::synthetic::{self, DomainSpec, LabelMap};
use segadapt_core::train::{self, Sample, TrainConfig};
use segadapt_core::metrics;

#[derive(Parser)]
#[command(name = "segadapt", version, about = "Open-set domain-adaptive segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Seed for any stochastic choices the subcommand makes.
    #[arg(long, global = false)]
    seed: Option<u64>,
    /// Training configuration file in flat `key = value` form.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset split on disk.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Which domain preset to render.
        #[arg(long, value_enum)]
        domain: DomainArg,
        /// Split name (e.g. train, val).
        #[arg(long, default_value = "train")]
        split: String,
        /// Number of samples to generate.
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
    },
    /// Train a model; writes per-step metrics and a final checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Source-domain dataset root.
        #[arg(long)]
        source: PathBuf,
        /// Target-domain dataset root.
        #[arg(long)]
        target: PathBuf,
        /// Split to train on.
        #[arg(long, default_value = "train")]
        split: String,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a dataset split at full resolution.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root to evaluate on.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Predict a label map for one image and write it as a PNG.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input RGB PNG.
        #[arg(long)]
        image: PathBuf,
    },
    /// Dump the soft matching A, its supervision M, and the edge
    /// matrices for one batch as CSV files.
    InspectGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, domain, split, count, height, width } => {
            let spec = match domain {
                DomainArg::Source => DomainSpec::source(),
                DomainArg::Target => DomainSpec::target(),
            };
            let seed = common.seed.unwrap_or(0);
            synthetic::write_dataset(&common.out, &split, &spec, count, seed, (height, width))?;
            println!(
                "wrote {count} {split} samples ({height}x{width}) to {}",
                common.out.display()
            );
            Ok(())
        }
        Command::Train { common, source, target, split, resume } => {
            let mut cfg = match &common.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Error::io(path.display().to_string(), e))?;
                    TrainConfig::parse(&text)?
                }
                None => TrainConfig::default(),
            };
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            let src = synthetic::load_dataset(&source, &split)?;
            let tgt = synthetic::load_dataset(&target, &split)?;
            let state = match &resume {
                Some(path) => train::load_checkpoint(path, &cfg)?,
                None => train::init_state(&cfg)?,
            };
            let state = train::run_training(&cfg, &src, &tgt, &common.out, state)?;
            println!(
                "trained to step {} (config {}); checkpoint in {}",
                state.step,
                cfg.hash(),
                common.out.display()
            );
            Ok(())
        }
        Command::Eval { common, checkpoint, data, split } => {
            let (cfg, state) = train::load_checkpoint_config(&checkpoint)?;
            let dataset = synthetic::load_dataset(&data, &split)?;
            if dataset.meta.class_names.len() != cfg.num_base + 1 {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint has {} classes but dataset defines {}",
                    cfg.num_base + 1,
                    dataset.meta.class_names.len()
                )));
            }
            let mut report = metrics::evaluate(&state.student, &cfg.model_config(), &dataset)?;
            report.step = state.step;
            report.config_hash = cfg.hash();
            std::fs::create_dir_all(&common.out)
                .map_err(|e| Error::io(common.out.display().to_string(), e))?;
            metrics::write_report(
                &report,
                &common.out.join("report.json"),
                &common.out.join("report.csv"),
            )?;
            println!(
                "common {:.2} private {:.2} h_score {:.2} over {} pixels",
                report.common, report.private, report.h_score, report.pixels
            );
            Ok(())
        }
        Command::Infer { common, checkpoint, image } => {
            let (cfg, state) = train::load_checkpoint_config(&checkpoint)?;
            let img = synthetic::read_image_png(&image)?;
            let chw = train::hwc_to_chw(&img).into_dyn();
            let pred = metrics::predict(&state.student, &cfg.model_config(), &chw)?;
            let lbl = LabelMap { data: pred, num_base: cfg.num_base };
            if let Some(parent) = common.out.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)
                        .map_err(|e| Error::io(parent.display().to_string(), e))?;
                }
            }
            synthetic::write_label_png(&common.out, &lbl)?;
            println!("wrote label map to {}", common.out.display());
            Ok(())
        }
        Command::InspectGraph { common, checkpoint, source, target, split } => {
            let (cfg, state) = train::load_checkpoint_config(&checkpoint)?;
            let seed = common.seed.unwrap_or(0);
            let src = sample_batch(&source, &split, &cfg, seed)?;
            let tgt = sample_batch(&target, &split, &cfg, seed.wrapping_add(1))?;
            let snap = train::graph_snapshot(&state, &cfg, &src, &tgt, seed)?
                .ok_or_else(|| {
                    Error::InvalidArgument("batch produced no usable graph nodes".into())
                })?;
            std::fs::create_dir_all(&common.out)
                .map_err(|e| Error::io(common.out.display().to_string(), e))?;
            write_matrix_csv(&common.out.join("a.csv"), &snap.src_meta, &snap.a)?;
            write_matrix_csv(&common.out.join("m.csv"), &snap.src_meta, &snap.m)?;
            write_matrix_csv(&common.out.join("xi_s.csv"), &snap.src_meta, &snap.xi_s)?;
            write_matrix_csv(&common.out.join("xi_t.csv"), &snap.tgt_meta, &snap.xi_t)?;
            println!(
                "dumped {}x{} matching ({} source / {} target nodes) to {}",
                snap.a.shape()[0],
                snap.a.shape()[1],
                snap.src_meta.len(),
                snap.tgt_meta.len(),
                common.out.display()
            );
            Ok(())
        }
    }
}

/// Draw one training-shaped batch of random crops from a dataset split.
fn sample_batch(root: &Path, split: &str, cfg: &TrainConfig, seed: u64) -> Result<Vec<Sample>> {
    use rand::prelude::*;
    let dataset = synthetic::load_dataset(root, split)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let idx = rng.random_range(0..dataset.len());
        let (img, lbl) = dataset.get(idx)?;
        let full = (train::hwc_to_chw(&img), lbl.data);
        batch.push(train::crop_sample(&full, cfg.crop, rng.next_u64())?);
    }
    Ok(batch)
}

/// One CSV row per matrix row, tagged with that node's descriptors.
fn write_matrix_csv(path: &Path, rows: &[NodeMeta], mat: &ArrayD<f64>) -> Result<()> {
    if mat.ndim() != 2 || mat.shape()[0] != rows.len() {
        return Err(Error::Shape(format!(
            "matrix {:?} does not match {} row descriptors",
            mat.shape(),
            rows.len()
        )));
    }
    let cols = mat.shape()[1];
    let mut text = String::from("row_class,row_domain,row_kind");
    for j in 0..cols {
        text.push_str(&format!(",col{j}"));
    }
    text.push('\n');
    for (i, meta) in rows.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{}",
            meta.class_id,
            meta.domain.as_str(),
            meta.kind.as_str()
        ));
        for j in 0..cols {
            text.push_str(&format!(",{:.17e}", mat[[i, j]]));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}
