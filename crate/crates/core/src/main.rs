use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use graphshot::episodes::ingest::{ingest_image_folders, save_split, IngestOptions, OMNIGLOT_TRAIN_CLASSES};
use graphshot::harness::config::{DatasetKind, TrainConfig};
use graphshot::harness::data::git_blob_hash;
use graphshot::harness::gradcheck::{self, GRADCHECK_TOL};
use graphshot::harness::tables::{from_csv, to_csv, to_text};
use graphshot::harness::train::{config_from_manifest, MANIFEST_FILE};
use graphshot::harness::{evaluate, train};

#[derive(Parser)]
#[command(name = "graphshot", version, about = "Few-shot learning with graph neural networks over episodes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert an image-folder dataset into split caches.
    PrepareData {
        root: PathBuf,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// omniglot or mini-imagenet
        #[arg(long, default_value = "omniglot")]
        dataset: DatasetKind,
    },
    /// Train a model from a `key = value` config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// gnn, siamese, proto or metric-knn
        #[arg(long)]
        model: Option<String>,
        /// learned or random
        #[arg(long)]
        query_policy: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on freshly sampled test episodes.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        episodes: usize,
        /// Defaults to the manifest stored beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report as a one-row CSV table.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        /// One of tensor, embedding, gnn, active, model; all when omitted.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge report CSVs and print them as one table.
    Tables {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the merged CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn prepare_data(root: &Path, out: &Path, dataset: DatasetKind) -> Result<()> {
    let (opts, train_classes) = match dataset {
        DatasetKind::Omniglot => (IngestOptions::omniglot(), OMNIGLOT_TRAIN_CLASSES),
        DatasetKind::MiniImagenet => (IngestOptions::mini_imagenet(), 64),
        DatasetKind::Synthetic => bail!("synthetic data is generated at train time and has no ingest step"),
    };
    let splits = ingest_image_folders(root, &opts, train_classes)?;
    fs::create_dir_all(out)?;
    for split in [Some(&splits.train), splits.val.as_ref(), Some(&splits.test)].into_iter().flatten() {
        let path = save_split(out, split)?;
        let hash = git_blob_hash(&fs::read(&path)?);
        println!(
            "{}: {} classes, {} images -> {} ({hash})",
            split.name,
            split.class_count(),
            (0..split.class_count()).map(|c| split.image_count(c)).sum::<usize>(),
            path.display()
        );
    }
    Ok(())
}

fn train_command(
    config: Option<&Path>,
    model: Option<&str>,
    query_policy: Option<&str>,
    output_dir: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let mut cfg = match config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = model {
        cfg.set("model", m)?;
    }
    if let Some(p) = query_policy {
        cfg.set("query_policy", p)?;
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    for kv in overrides {
        let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let outcome = train(&cfg)?;
    println!(
        "best validation accuracy {:.4} at step {}; run written to {}",
        outcome.best_val_accuracy,
        outcome.best_step,
        outcome.run_dir.display()
    );
    Ok(())
}

fn evaluate_command(checkpoint: &Path, episodes: usize, config: Option<&Path>, report: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(path) => TrainConfig::load(path)?,
        None => {
            let manifest = checkpoint.parent().unwrap_or(Path::new(".")).join(MANIFEST_FILE);
            config_from_manifest(&manifest)
                .with_context(|| format!("no --config given and no usable {}", manifest.display()))?
        }
    };
    let r = evaluate(checkpoint, &cfg, episodes)?;
    print!("{}", to_text(std::slice::from_ref(&r)));
    if let Some(path) = report {
        fs::write(path, to_csv(&[r])?)?;
    }
    Ok(())
}

fn gradcheck_command(module: Option<&str>, seed: u64) -> Result<bool> {
    let checks = gradcheck::run(module, seed)?;
    let mut all = true;
    for c in &checks {
        let worst = c.report.worst();
        println!(
            "{} {:<28} probes {:>4}  max rel err {:.3e}{}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.report.probes.len(),
            c.report.max_rel_err(),
            worst.filter(|_| !c.passed()).map_or(String::new(), |p| format!("  worst {}", p.label)),
        );
        all &= c.passed();
    }
    println!("tolerance {GRADCHECK_TOL:e}: {}", if all { "all passed" } else { "FAILED" });
    Ok(all)
}

fn tables_command(paths: &[PathBuf], csv_out: Option<&Path>) -> Result<()> {
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| p.display().to_string())?;
        reports.extend(from_csv(&text).with_context(|| p.display().to_string())?);
    }
    print!("{}", to_text(&reports));
    if let Some(out) = csv_out {
        fs::write(out, to_csv(&reports)?)?;
    }
    Ok(())
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::PrepareData { root, out, dataset } => prepare_data(&root, &out, dataset)?,
        Command::Train { config, model, query_policy, output_dir, overrides } => train_command(
            config.as_deref(),
            model.as_deref(),
            query_policy.as_deref(),
            output_dir.as_deref(),
            &overrides,
        )?,
        Command::Evaluate { checkpoint, episodes, config, report } => {
            evaluate_command(&checkpoint, episodes, config.as_deref(), report.as_deref())?
        }
        Command::Gradcheck { module, seed } => {
            if !gradcheck_command(module.as_deref(), seed)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Tables { reports, csv } => tables_command(&reports, csv.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}
