//! Supervised warmup and the staged teacher-student training loop.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::distill::{
    bce_logit_loss, combine_losses, cosine_schedule, dino_loss, ema_update, pseudo_label_loss,
    AdamW, DinoState, TrainConfig,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{Capture, Role, RunMode, Screener};
use crate::views::{augment_labeled, make_views};

/// One preprocessed 225x225 sample held in memory for training.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub image: Grid,
    pub label: Option<Label>,
}

#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub iterations: usize,
}

/// One row of the iteration log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: usize,
    pub iter: usize,
    pub l_dino: f64,
    pub l_cls: f64,
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub records: Vec<IterationRecord>,
    /// EMA momentum applied at each iteration, for replay checks.
    pub ema_trace: Vec<f64>,
}

/// Stage bookkeeping: which checkpoints seeded this stage and which
/// unlabeled subsets are in use (always the first `stage_index`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageState {
    pub stage_index: usize,
    pub student_checkpoint: String,
    pub teacher_checkpoint: String,
    pub subsets_in_use: usize,
    pub iteration: usize,
}

fn stable_hash(parts: &[u64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &p in parts {
        for b in p.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

fn id_hash(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_vec0::<f64>()?)
}

fn label_targets(batch: &[&LoadedSample], dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        match s.label {
            Some(Label::Tb) => targets.push(1.0f32),
            Some(Label::Normal) => targets.push(0.0),
            None => return Err(Error::invalid(format!("sample {} has no label", s.id))),
        }
    }
    Ok(Tensor::from_vec(targets, batch.len(), dev)?.to_dtype(dtype)?)
}

/// AdamW steps on the BCE-with-logits loss over augmented labeled batches,
/// with cosine learning-rate and weight-decay schedules.
pub fn train_supervised_warmup(
    student: &Screener,
    labeled: &[LoadedSample],
    cfg: &TrainConfig,
) -> Result<WarmupOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::invalid("labeled split is empty"));
    }
    let iters_per_epoch = labeled.len().div_ceil(cfg.batch_size);
    let total = (cfg.warmup_epochs * iters_per_epoch).max(1);
    let mut opt = AdamW::new(student.store.all_vars(), cfg.adam_betas, cfg.adam_eps)?;
    let mut drop_rng = ChaCha20Rng::seed_from_u64(stable_hash(&[cfg.seed, 0xd209]));
    let mut epoch_losses = Vec::with_capacity(cfg.warmup_epochs);
    let mut t = 0usize;
    for epoch in 0..cfg.warmup_epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(stable_hash(&[cfg.seed, 1, epoch as u64]));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_schedule(t, total, cfg.lr.0, cfg.lr.1)?;
            let wd = cosine_schedule(t, total, cfg.weight_decay.0, cfg.weight_decay.1)?;
            let batch: Vec<&LoadedSample> = chunk.iter().map(|&i| &labeled[i]).collect();
            let views: Vec<Grid> = batch
                .iter()
                .map(|s| {
                    augment_labeled(
                        &s.image,
                        stable_hash(&[cfg.seed, 2, epoch as u64, id_hash(&s.id)]),
                    )
                })
                .collect();
            let refs: Vec<&Grid> = views.iter().collect();
            let x = student.batch_to_tensor(&refs)?;
            let mut mode = train_mode(student, &mut drop_rng);
            let (feat, _) = student.encoder_forward(&x, &mut mode, Capture::default())?;
            let logits = student.cls_head_forward(&feat)?;
            let targets = label_targets(&batch, student.dtype(), student.device())?;
            let loss = bce_logit_loss(&logits, &targets)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::invalid(format!("non-finite warmup loss at iter {t}")));
            }
            let grads = loss.backward()?;
            opt.step(&grads, lr, wd)?;
            epoch_loss += value;
            batches += 1;
            t += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(WarmupOutcome { epoch_losses, iterations: t })
}

fn train_mode<'a>(model: &Screener, rng: &'a mut ChaCha20Rng) -> RunMode<'a> {
    // drop path regularizes the student only
    match model.role {
        Role::Student => {
            RunMode::Train { rng, drop_path: model.encoder_cfg.drop_path_rate }
        }
        Role::Teacher => RunMode::Infer,
    }
}

/// One DISTL stage: self-distillation plus pseudo-label alignment over the
/// unlabeled subsets in use, EMA teacher updates, and a periodic
/// supervised correction from the labeled split.
///
/// `observer`, when set, is called after every EMA update with the
/// iteration index and the current student.
#[allow(clippy::too_many_arguments)]
pub fn run_distl_stage(
    stage_index: usize,
    student: &Screener,
    teacher: &Screener,
    labeled: &[LoadedSample],
    unlabeled: &[LoadedSample],
    cfg: &TrainConfig,
    dino_state: &mut DinoState,
    mut observer: Option<&mut dyn FnMut(usize, &Screener)>,
) -> Result<StageOutcome> {
    cfg.validate()?;
    if !(1..=3).contains(&stage_index) {
        return Err(Error::invalid("stage index must be 1..=3"));
    }
    if unlabeled.is_empty() {
        return Err(Error::invalid("no unlabeled data for this stage"));
    }
    if labeled.is_empty() {
        return Err(Error::invalid("labeled split is empty"));
    }
    if !teacher.store.shapes_match(&student.store) {
        return Err(Error::ShapeMismatch("teacher and student differ".into()));
    }

    let iters_per_epoch = unlabeled.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs_per_stage * iters_per_epoch).max(1);
    let mut opt = AdamW::new(student.store.all_vars(), cfg.adam_betas, cfg.adam_eps)?;
    let mut drop_rng =
        ChaCha20Rng::seed_from_u64(stable_hash(&[cfg.seed, 0xd15, stage_index as u64]));
    let mut correction_rng =
        ChaCha20Rng::seed_from_u64(stable_hash(&[cfg.seed, 0xc0, stage_index as u64]));
    let mut records = Vec::with_capacity(total);
    let mut ema_trace = Vec::with_capacity(total);
    let mut t = 0usize;

    for epoch in 0..cfg.epochs_per_stage {
        let mut order: Vec<usize> = (0..unlabeled.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(stable_hash(&[
            cfg.seed,
            3,
            stage_index as u64,
            epoch as u64,
        ]));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let lr = cosine_schedule(t, total, cfg.lr.0, cfg.lr.1)?;
            let wd = cosine_schedule(t, total, cfg.weight_decay.0, cfg.weight_decay.1)?;
            let m = cosine_schedule(t, total, cfg.ema_momentum.0, cfg.ema_momentum.1)?;
            let teacher_temp = dino_state.teacher_temp(t);

            let batch: Vec<&LoadedSample> = chunk.iter().map(|&i| &unlabeled[i]).collect();
            let view_sets: Vec<_> = batch
                .iter()
                .map(|s| {
                    make_views(
                        &s.image,
                        &s.id,
                        stable_hash(&[cfg.seed, 4, stage_index as u64, epoch as u64, id_hash(&s.id)]),
                    )
                })
                .collect();

            let g1: Vec<&Grid> = view_sets.iter().map(|v| &v.global_1).collect();
            let g2: Vec<&Grid> = view_sets.iter().map(|v| &v.global_2).collect();
            let local: Vec<&Grid> = view_sets.iter().map(|v| &v.local_1).collect();
            let globals: Vec<&Grid> = g1.iter().chain(g2.iter()).copied().collect();
            let b = batch.len();

            // teacher sees only the global views, without gradients
            let xg_t = teacher.batch_to_tensor(&globals)?;
            let (t_dino_all, t_logits_all) = {
                let (d, l) = teacher.forward_batch(&xg_t, &mut RunMode::Infer)?;
                (d.detach(), l.detach())
            };
            let t_dino = vec![t_dino_all.narrow(0, 0, b)?, t_dino_all.narrow(0, b, b)?];
            let t_logits = vec![t_logits_all.narrow(0, 0, b)?, t_logits_all.narrow(0, b, b)?];

            // student sees all views
            let xg_s = student.batch_to_tensor(&globals)?;
            let xl_s = student.batch_to_tensor(&local)?;
            let mut mode = train_mode(student, &mut drop_rng);
            let (s_dino_g, s_logits_g) = student.forward_batch(&xg_s, &mut mode)?;
            let (s_dino_l, s_logits_l) = student.forward_batch(&xl_s, &mut mode)?;
            let s_dino =
                vec![s_dino_g.narrow(0, 0, b)?, s_dino_g.narrow(0, b, b)?, s_dino_l];
            let s_logits =
                vec![s_logits_g.narrow(0, 0, b)?, s_logits_g.narrow(0, b, b)?, s_logits_l];

            let (l_dino, new_center) = dino_loss(&s_dino, &t_dino, dino_state, teacher_temp)?;
            let l_cls = pseudo_label_loss(&s_logits, &t_logits)?;
            let combined = combine_losses(&l_dino, &l_cls, cfg.loss_weights)?;
            let grads = combined.backward()?;
            opt.step(&grads, lr, wd)?;
            dino_state.center = new_center;

            ema_update(&teacher.store, &student.store, m)?;
            ema_trace.push(m);
            if let Some(obs) = observer.as_deref_mut() {
                obs(t, student);
            }

            records.push(IterationRecord {
                stage: stage_index,
                iter: t,
                l_dino: scalar(&l_dino)?,
                l_cls: scalar(&l_cls)?,
                lr,
                wd,
                ema_m: m,
            });
            t += 1;

            // periodic supervised correction of the student
            if t % cfg.correction_interval == 0 {
                let mut idx: Vec<usize> = (0..labeled.len()).collect();
                idx.shuffle(&mut correction_rng);
                let sel: Vec<&LoadedSample> =
                    idx.into_iter().take(cfg.batch_size).map(|i| &labeled[i]).collect();
                let views: Vec<Grid> = sel
                    .iter()
                    .map(|s| {
                        augment_labeled(
                            &s.image,
                            stable_hash(&[cfg.seed, 5, stage_index as u64, t as u64, id_hash(&s.id)]),
                        )
                    })
                    .collect();
                let refs: Vec<&Grid> = views.iter().collect();
                let x = student.batch_to_tensor(&refs)?;
                let mut mode = train_mode(student, &mut drop_rng);
                let (feat, _) = student.encoder_forward(&x, &mut mode, Capture::default())?;
                let logits = student.cls_head_forward(&feat)?;
                let targets = label_targets(&sel, student.dtype(), student.device())?;
                let loss = bce_logit_loss(&logits, &targets)?;
                let grads = loss.backward()?;
                opt.step(&grads, lr, wd)?;
            }
        }
    }
    Ok(StageOutcome { records, ema_trace })
}
