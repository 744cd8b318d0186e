//! End-to-end training orchestration: supervised warmup, then the three
//! self-training stages, with checkpoints at stage boundaries and a CSV
//! iteration log. Interrupted runs resume from the last finished stage.

use std::path::{Path, PathBuf};

use candle_core::DType;

use crate::corpus::{DatasetManifest, Label, Split};
use crate::distill::{
    run_distl_stage, train_supervised_warmup, DinoState, IterationRecord, LoadedSample,
    TrainConfig, WarmupOutcome,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{
    load_checkpoint, save_checkpoint, EncoderConfig, HeadConfig, Role, Screener,
};

/// Side length of stored preprocessed images; global views crop one pixel.
pub const STORED_SIDE: usize = 225;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub train: TrainConfig,
}

#[derive(Debug)]
pub struct TrainingSummary {
    /// Present when the warmup actually ran (not resumed past).
    pub warmup: Option<WarmupOutcome>,
    /// Stage indices executed in this invocation.
    pub stages_run: Vec<usize>,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
}

/// Loader parallelism: `SCREEN_NUM_WORKERS`, default 1.
pub fn loader_workers() -> usize {
    std::env::var("SCREEN_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Loads every sample of `split` from disk. Labels are kept only where the
/// protocol allows looking at them: the unlabeled subsets come back blind.
pub fn load_split(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
) -> Result<Vec<LoadedSample>> {
    let keep_label = matches!(split, Split::Labeled | Split::Test);
    let entries = manifest.of_split(split);
    let load_one = |entry: &crate::corpus::ManifestEntry| -> Result<LoadedSample> {
        let image = Grid::load_png(&root.join(&entry.image_path))?;
        let (h, w) = image.dims();
        if h != STORED_SIDE || w != STORED_SIDE {
            return Err(Error::invalid(format!(
                "sample {}: expected {STORED_SIDE}x{STORED_SIDE}, got {h}x{w}",
                entry.id
            )));
        }
        Ok(LoadedSample {
            id: entry.id.clone(),
            image,
            label: keep_label.then_some(entry.label),
        })
    };
    let workers = loader_workers().min(entries.len().max(1));
    if workers <= 1 {
        return entries.iter().map(|e| load_one(e)).collect();
    }
    let chunk = entries.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|e| load_one(e)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(entries.len());
        for h in handles {
            out.extend(h.join().expect("loader thread panicked")?);
        }
        Ok(out)
    })
}

/// Labeled pairs for evaluation: (image, truth) per entry of `split`.
pub fn load_eval_pairs(
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
) -> Result<Vec<(Grid, Label)>> {
    let mut out = Vec::new();
    for entry in manifest.of_split(split) {
        let image = Grid::load_png(&root.join(&entry.image_path))?;
        out.push((image, entry.label));
    }
    Ok(out)
}

fn warmup_path(out_dir: &Path) -> PathBuf {
    out_dir.join("warmup.ckpt")
}

fn stage_path(out_dir: &Path, role: Role, stage: usize) -> PathBuf {
    let role = match role {
        Role::Student => "student",
        Role::Teacher => "teacher",
    };
    out_dir.join(format!("{role}_stage{stage}.ckpt"))
}

/// Highest stage k (1..=3) whose student and teacher checkpoints both
/// exist, or 0 when only the warmup (or nothing) is on disk.
fn last_finished_stage(out_dir: &Path, stages: usize) -> usize {
    (1..=stages)
        .rev()
        .find(|&k| {
            stage_path(out_dir, Role::Student, k).is_file()
                && stage_path(out_dir, Role::Teacher, k).is_file()
        })
        .unwrap_or(0)
}

fn append_log(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let fresh = !path.is_file();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        wtr.write_record(["stage", "iter", "l_dino", "l_cls", "lr", "wd", "ema_m"])?;
    }
    for r in records {
        wtr.write_record([
            r.stage.to_string(),
            r.iter.to_string(),
            format!("{:.6}", r.l_dino),
            format!("{:.6}", r.l_cls),
            format!("{:.8}", r.lr),
            format!("{:.6}", r.wd),
            format!("{:.6}", r.ema_m),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn check_compatible(meta_encoder: &EncoderConfig, cfg: &PipelineConfig, path: &Path) -> Result<()> {
    if meta_encoder != &cfg.encoder {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different encoder configuration",
            path.display()
        )));
    }
    Ok(())
}

/// Runs (or resumes) the full protocol and leaves `warmup.ckpt`,
/// `student_stage{k}.ckpt` and `teacher_stage{k}.ckpt` under `out_dir`.
///
/// Stage k trains on the union of the first k unlabeled subsets. The
/// student always continues from its latest weights; the teacher starts as
/// a copy of the warmed-up student and afterwards moves only through EMA.
pub fn run_training(
    manifest: &DatasetManifest,
    data_root: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<TrainingSummary> {
    cfg.encoder.validate()?;
    cfg.heads.validate()?;
    cfg.train.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("train_log.csv");
    let mut summary = TrainingSummary {
        warmup: None,
        stages_run: Vec::new(),
        checkpoints: Vec::new(),
        log_path: log_path.clone(),
    };

    let labeled = load_split(manifest, data_root, Split::Labeled)?;
    if labeled.is_empty() {
        return Err(Error::invalid("manifest has no labeled split"));
    }

    let resume_stage = last_finished_stage(out_dir, cfg.train.stages);

    // warmup
    let student = if resume_stage > 0 || warmup_path(out_dir).is_file() {
        let from = if resume_stage > 0 {
            stage_path(out_dir, Role::Student, resume_stage)
        } else {
            warmup_path(out_dir)
        };
        let (model, meta) = load_checkpoint(&from, DType::F32)?;
        check_compatible(&meta.encoder, cfg, &from)?;
        model
    } else {
        let student = Screener::new(
            &cfg.encoder,
            &cfg.heads,
            Role::Student,
            DType::F32,
            cfg.train.seed,
        )?;
        let outcome = train_supervised_warmup(&student, &labeled, &cfg.train)?;
        save_checkpoint(&warmup_path(out_dir), &student, 0)?;
        summary.checkpoints.push(warmup_path(out_dir));
        summary.warmup = Some(outcome);
        student
    };

    if resume_stage >= cfg.train.stages {
        return Ok(summary);
    }

    // the teacher is born from the warmed-up student and then only ever
    // follows it through EMA
    let teacher = if resume_stage > 0 {
        let path = stage_path(out_dir, Role::Teacher, resume_stage);
        let (model, meta) = load_checkpoint(&path, DType::F32)?;
        check_compatible(&meta.encoder, cfg, &path)?;
        model
    } else {
        let teacher = student.clone_as(Role::Teacher, cfg.train.seed)?;
        teacher.store.copy_from(&student.store)?;
        teacher
    };

    let mut dino_state = DinoState::new(cfg.heads.dino_out_dim, student.dtype(), student.device())?;
    dino_state.center_momentum = cfg.train.center_momentum;
    dino_state.student_temp = cfg.train.student_temp;
    dino_state.teacher_temp_start = cfg.train.teacher_temp.0;
    dino_state.teacher_temp_end = cfg.train.teacher_temp.1;
    dino_state.teacher_temp_warmup_iters = cfg.train.teacher_temp_warmup_iters;

    let mut unlabeled: Vec<LoadedSample> = Vec::new();
    for subset in 0..cfg.train.stages {
        let split = Split::unlabeled_subset(subset)
            .ok_or_else(|| Error::invalid("more stages than unlabeled subsets"))?;
        let samples = load_split(manifest, data_root, split)?;
        let stage = subset + 1;
        unlabeled.extend(samples);
        if stage <= resume_stage {
            continue;
        }
        let outcome = run_distl_stage(
            stage,
            &student,
            &teacher,
            &labeled,
            &unlabeled,
            &cfg.train,
            &mut dino_state,
            None,
        )?;
        append_log(&log_path, &outcome.records)?;
        let s_path = stage_path(out_dir, Role::Student, stage);
        let t_path = stage_path(out_dir, Role::Teacher, stage);
        save_checkpoint(&s_path, &student, stage as u32)?;
        save_checkpoint(&t_path, &teacher, stage as u32)?;
        summary.checkpoints.push(s_path);
        summary.checkpoints.push(t_path);
        summary.stages_run.push(stage);
    }
    Ok(summary)
}
