//! `screen`: command-line pipeline for the screening workflow.
//!
//! Commands: `synth`, `preprocess`, `split`, `train`, `eval`, `explain`.
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use screen_core::corpus::{
    generate_synthetic_corpus, preprocess_corpus, split_dataset, write_rejection_report,
    DatasetManifest, Label, Split, SynthConfig,
};
use screen_core::distill::TrainConfig;
use screen_core::error::Error;
use screen_core::evalx::{
    evaluate, extract_attention, render_overlay, select_best_head, write_report,
};
use screen_core::grid::{BitGrid, Grid};
use screen_core::model::{load_checkpoint, DType, EncoderConfig, HeadConfig};
use screen_core::pipeline::{run_training, PipelineConfig};

#[derive(Parser)]
#[command(name = "screen", about = "Self-training screening pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for `eval`); overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, assign splits and write the manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of normal samples; overrides the config file.
        #[arg(long)]
        n_normal: Option<usize>,
        /// Number of tb samples; overrides the config file.
        #[arg(long)]
        n_tb: Option<usize>,
    },
    /// Crop every corpus image to its lung fields and store it resized.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Corpus root holding manifest.csv, images/ and masks/.
        #[arg(long = "in")]
        in_dir: PathBuf,
    },
    /// Assign splits to an existing manifest.
    Split {
        #[command(flatten)]
        common: Common,
        /// Manifest to (re)split; defaults to <out>/manifest.csv.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the supervised warmup and the staged self-training.
    Train {
        #[command(flatten)]
        common: Common,
        /// Preprocessed corpus root holding manifest.csv.
        #[arg(long)]
        data: PathBuf,
        /// Stage count override; 0 trains the warmup baseline only.
        #[arg(long)]
        stages: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split and write the metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Select the best attention head and render heatmap overlays.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated sample ids; defaults to every tb test sample.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    corpus: CorpusSection,
    model: ModelSection,
    train: TrainConfig,
    eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CorpusSection {
    synth: SynthConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSection {
    encoder: EncoderConfig,
    heads: HeadConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    /// Sigmoid probability above which a sample is called tb.
    threshold: f64,
    /// Normalized-attention threshold for localization masks.
    theta: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { threshold: 0.5, theta: 0.5 }
    }
}

/// CLI-level failure carrying the process exit code.
enum CliError {
    /// Bad input: config, flags, manifest or data fail validation.
    Validation(String),
    /// The environment failed us: I/O, tensor math, corrupt artifacts.
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::Invalid(_)
            | Error::DegenerateMask
            | Error::NoLungRegion
            | Error::InsufficientClassCount(_)
            | Error::IndivisibleInput { .. }
            | Error::GroundTruthRequired
            | Error::ShapeMismatch(_)
            | Error::Manifest(_) => CliError::Validation(err.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn validation(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| validation(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str(&text)
                .map_err(|e| validation(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed.or(cfg.seed) {
        cfg.seed = Some(seed);
        cfg.corpus.synth.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| validation("no output directory: pass --out or set out_dir"))?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Write a manifest atomically: temp file in the target directory, then
/// rename over the destination.
fn write_manifest_atomic(manifest: &DatasetManifest, path: &Path) -> CliResult<()> {
    let tmp = path.with_extension("csv.tmp");
    manifest.write_csv(&tmp)?;
    std::fs::rename(&tmp, path)
        .map_err(|e| runtime(format!("cannot finalize {}: {e}", path.display())))?;
    Ok(())
}

fn read_manifest(path: &Path, seed: u64) -> CliResult<DatasetManifest> {
    if !path.is_file() {
        return Err(validation(format!("manifest not found at {}", path.display())));
    }
    Ok(DatasetManifest::read_csv(path, seed)?)
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Synth { common, n_normal, n_tb } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let mut synth = cfg.corpus.synth.clone();
            if let Some(n) = n_normal {
                synth.n_normal = n;
            }
            if let Some(n) = n_tb {
                synth.n_tb = n;
            }
            let manifest = generate_synthetic_corpus(&synth, &dir)?;
            let manifest = split_dataset(&manifest, synth.seed)?;
            write_manifest_atomic(&manifest, &dir.join("manifest.csv"))?;
            println!(
                "synth: {} samples ({} normal, {} tb) under {}",
                manifest.entries.len(),
                synth.n_normal,
                synth.n_tb,
                dir.display()
            );
            Ok(())
        }
        Command::Preprocess { common, in_dir } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let seed = cfg.seed.unwrap_or(0);
            let manifest = read_manifest(&in_dir.join("manifest.csv"), seed)?;
            let outcome = preprocess_corpus(&manifest, &in_dir, &dir)?;
            write_manifest_atomic(&outcome.manifest, &dir.join("manifest.csv"))?;
            write_rejection_report(&dir.join("rejections.csv"), &outcome.rejections)?;
            println!(
                "preprocess: {} kept, {} rejected",
                outcome.manifest.entries.len(),
                outcome.rejections.len()
            );
            Ok(())
        }
        Command::Split { common, manifest } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let path = manifest.unwrap_or_else(|| dir.join("manifest.csv"));
            let seed = cfg.seed.unwrap_or(0);
            let manifest = read_manifest(&path, seed)?;
            let manifest = split_dataset(&manifest, seed)?;
            write_manifest_atomic(&manifest, &dir.join("manifest.csv"))?;
            for ((split, label), n) in manifest.counts() {
                println!("split: {split}/{label}: {n}");
            }
            Ok(())
        }
        Command::Train { common, data, stages } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let seed = cfg.seed.unwrap_or(cfg.train.seed);
            let manifest = read_manifest(&data.join("manifest.csv"), seed)?;
            let mut pipeline = PipelineConfig {
                encoder: cfg.model.encoder.clone(),
                heads: cfg.model.heads.clone(),
                train: cfg.train.clone(),
            };
            if let Some(stages) = stages {
                if stages > 3 {
                    return Err(validation("at most 3 stages are supported"));
                }
                pipeline.train.stages = stages;
            }
            let summary = run_training(&manifest, &data, &dir, &pipeline)?;
            if summary.warmup.is_some() {
                println!("train: warmup finished");
            }
            for stage in &summary.stages_run {
                println!("train: stage {stage} finished");
            }
            println!("train: checkpoints under {}", dir.display());
            Ok(())
        }
        Command::Eval { common, data, checkpoint } => {
            let cfg = load_config(&common)?;
            let seed = cfg.seed.unwrap_or(0);
            let manifest = read_manifest(&data.join("manifest.csv"), seed)?;
            let (model, _) = load_checkpoint(&checkpoint, DType::F32)?;
            let pairs = load_test_pairs(&manifest, &data, model.encoder_cfg.input_side)?;
            let report =
                evaluate(&model, pairs.iter().map(|(g, l)| (g, *l)), cfg.eval.threshold)?;
            let out = cfg
                .out_dir
                .clone()
                .map(|d| if d.extension().is_some() { d } else { d.join("report.csv") })
                .ok_or_else(|| validation("no output path: pass --out or set out_dir"))?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| runtime(format!("cannot create {}: {e}", parent.display())))?;
            }
            let tmp = out.with_extension("csv.tmp");
            write_report(&tmp, &report)?;
            std::fs::rename(&tmp, &out)
                .map_err(|e| runtime(format!("cannot finalize {}: {e}", out.display())))?;
            println!(
                "eval: accuracy {:.2}% over {} samples -> {}",
                report.accuracy,
                report.confusion.total(),
                out.display()
            );
            Ok(())
        }
        Command::Explain { common, data, checkpoint, ids } => {
            let cfg = load_config(&common)?;
            let dir = out_dir(&cfg)?;
            let seed = cfg.seed.unwrap_or(0);
            let manifest = read_manifest(&data.join("manifest.csv"), seed)?;
            let (model, _) = load_checkpoint(&checkpoint, DType::F32)?;
            explain(&model, &manifest, &data, &dir, cfg.eval.theta, &ids)
        }
    }
}

/// Test images center-cropped to the encoder's input side.
fn load_test_pairs(
    manifest: &DatasetManifest,
    data: &Path,
    side: usize,
) -> CliResult<Vec<(Grid, Label)>> {
    let entries = manifest.of_split(Split::Test);
    if entries.is_empty() {
        return Err(validation("manifest has no test split"));
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let image = Grid::load_png(&data.join(&e.image_path))?;
        out.push((image.center_crop(side, side)?, e.label));
    }
    Ok(out)
}

fn explain(
    model: &screen_core::model::Screener,
    manifest: &DatasetManifest,
    data: &Path,
    dir: &Path,
    theta: f64,
    ids: &[String],
) -> CliResult<()> {
    // head selection runs on tb test samples with lesion ground truth
    let side = model.encoder_cfg.input_side;
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut available = Vec::new();
    for e in manifest.of_split(Split::Test) {
        if e.label != Label::Tb {
            continue;
        }
        let lesion = data.join(format!("lesions/{}.png", e.id));
        if !lesion.is_file() {
            continue;
        }
        images.push(Grid::load_png(&data.join(&e.image_path))?.center_crop(side, side)?);
        masks.push(BitGrid::load_png(&lesion)?.center_crop(side, side)?);
        available.push(e.id.clone());
    }
    if images.is_empty() {
        return Err(validation(
            "no tb test samples with lesion masks; head selection needs ground truth",
        ));
    }
    let validation_slice: Vec<(&Grid, &BitGrid)> =
        images.iter().zip(masks.iter()).map(|(g, m)| (g, m)).collect();
    let (best, means) = select_best_head(model, &validation_slice, theta)?;

    // per-head summary with the argmax marked
    let summary_path = dir.join("head_summary.csv");
    let tmp = summary_path.with_extension("csv.tmp");
    {
        let mut wtr = csv::Writer::from_path(&tmp)
            .map_err(|e| runtime(format!("cannot write {}: {e}", tmp.display())))?;
        wtr.write_record(["head", "mean_iou", "selected"])
            .map_err(|e| runtime(e.to_string()))?;
        for (h, mean) in means.iter().enumerate() {
            wtr.write_record([
                h.to_string(),
                format!("{mean:.6}"),
                if h == best { "1" } else { "0" }.to_string(),
            ])
            .map_err(|e| runtime(e.to_string()))?;
        }
        wtr.flush().map_err(|e| runtime(e.to_string()))?;
    }
    std::fs::rename(&tmp, &summary_path)
        .map_err(|e| runtime(format!("cannot finalize {}: {e}", summary_path.display())))?;

    // overlays for the requested samples (default: the selection slice)
    let wanted: Vec<String> = if ids.is_empty() { available.clone() } else { ids.to_vec() };
    let by_id: std::collections::HashMap<&str, &screen_core::corpus::ManifestEntry> =
        manifest.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    for id in &wanted {
        let entry = by_id
            .get(id.as_str())
            .ok_or_else(|| validation(format!("unknown sample id {id:?}")))?;
        let image = Grid::load_png(&data.join(&entry.image_path))?.center_crop(side, side)?;
        let maps = extract_attention(model, &image, None)?;
        let map = maps
            .get(best)
            .ok_or_else(|| runtime(format!("head {best} missing from attention maps")))?;
        render_overlay(&image, map, &dir.join(format!("{id}_head{best}.png")))?;
    }
    println!(
        "explain: head {best} selected (mean IoU {:.4}); {} overlays under {}",
        means[best],
        wanted.len(),
        dir.display()
    );
    Ok(())
}
