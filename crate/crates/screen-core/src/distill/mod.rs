//! Loss functions, schedules, EMA updates and the DISTL training loops.

mod train;

pub use train::{
    run_distl_stage, train_supervised_warmup, IterationRecord, LoadedSample, StageOutcome,
    StageState, WarmupOutcome,
};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::ParamStore;

/// Center vector and temperature schedules for the self-distillation loss.
#[derive(Debug, Clone)]
pub struct DinoState {
    /// (1, K) running center of teacher scores.
    pub center: Tensor,
    pub center_momentum: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    /// Iterations over which the teacher temperature ramps up linearly.
    pub teacher_temp_warmup_iters: usize,
    pub student_temp: f64,
}

impl DinoState {
    pub fn new(k: usize, dtype: DType, device: &candle_core::Device) -> Result<Self> {
        Ok(DinoState {
            center: Tensor::zeros((1, k), dtype, device)?,
            center_momentum: 0.9,
            teacher_temp_start: 0.01,
            teacher_temp_end: 0.04,
            teacher_temp_warmup_iters: 30,
            student_temp: 0.1,
        })
    }

    /// Linear warmup from start to end, then constant.
    pub fn teacher_temp(&self, iter: usize) -> f64 {
        if self.teacher_temp_warmup_iters == 0 || iter >= self.teacher_temp_warmup_iters {
            return self.teacher_temp_end;
        }
        let frac = iter as f64 / self.teacher_temp_warmup_iters as f64;
        self.teacher_temp_start + (self.teacher_temp_end - self.teacher_temp_start) * frac
    }
}

/// Numerically stable softplus: max(x,0) + ln(1 + exp(-|x|)).
fn softplus(x: &Tensor) -> Result<Tensor> {
    let abs_neg = x.abs()?.neg()?;
    Ok((x.relu()? + (abs_neg.exp()? + 1.0)?.log()?)?)
}

/// Binary cross-entropy in the logit domain, averaged over the batch:
/// mean(softplus(logit) - target * logit).
pub fn bce_logit_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::ShapeMismatch("logits and targets differ in shape".into()));
    }
    let tv = targets.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if tv.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
        return Err(Error::invalid("bce target outside [0,1]"));
    }
    let per = (softplus(logits)? - (targets * logits)?)?;
    Ok(per.mean_all()?)
}

fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, 1)?)
}

/// Self-distillation loss over view pairs.
///
/// `student_scores`: one (batch, K) tensor per student view; the first
/// `teacher_scores.len()` entries correspond to the same global views the
/// teacher saw. Returns (loss, updated center). The teacher side receives
/// no gradient.
pub fn dino_loss(
    student_scores: &[Tensor],
    teacher_scores: &[Tensor],
    state: &DinoState,
    teacher_temp: f64,
) -> Result<(Tensor, Tensor)> {
    if teacher_scores.is_empty() || student_scores.len() <= 1 {
        return Err(Error::invalid("need at least one teacher view and two student views"));
    }
    let k = state.center.dim(1)?;
    for t in teacher_scores.iter().chain(student_scores) {
        if t.dim(1)? != k {
            return Err(Error::ShapeMismatch("prototype dimension K differs".into()));
        }
    }
    let mut total: Option<Tensor> = None;
    let mut pairs = 0usize;
    for (v, t_scores) in teacher_scores.iter().enumerate() {
        let t_scores = t_scores.detach();
        let centered = (t_scores.broadcast_sub(&state.center)? / teacher_temp)?;
        let t_dist = candle_nn::ops::softmax(&centered, 1)?.detach();
        for (u, s_scores) in student_scores.iter().enumerate() {
            if u == v {
                continue;
            }
            let log_s = log_softmax_rows(&(s_scores / state.student_temp)?)?;
            // H(t, s) per sample, then batch mean
            let ce = (t_dist.clone() * log_s)?.sum(1)?.neg()?.mean_all()?;
            total = Some(match total {
                Some(acc) => (acc + ce)?,
                None => ce,
            });
            pairs += 1;
        }
    }
    let loss = (total.expect("at least one pair") / pairs as f64)?;

    // center update from raw teacher scores
    let mut mean: Option<Tensor> = None;
    for t_scores in teacher_scores {
        let m = t_scores.detach().mean(0)?.reshape((1, k))?;
        mean = Some(match mean {
            Some(acc) => (acc + m)?,
            None => m,
        });
    }
    let batch_mean = (mean.expect("teacher views") / teacher_scores.len() as f64)?;
    let new_center = ((&state.center * state.center_momentum)?
        + (batch_mean * (1.0 - state.center_momentum))?)?;
    Ok((loss, new_center))
}

/// Self-training alignment loss: student logits against gradient-blocked
/// soft teacher targets, over the same cross-view pairs as `dino_loss`.
pub fn pseudo_label_loss(student_logits: &[Tensor], teacher_logits: &[Tensor]) -> Result<Tensor> {
    if teacher_logits.is_empty() || student_logits.len() <= 1 {
        return Err(Error::invalid("need at least one teacher view and two student views"));
    }
    let mut total: Option<Tensor> = None;
    let mut pairs = 0usize;
    for (v, t_logit) in teacher_logits.iter().enumerate() {
        let target = sigmoid(&t_logit.detach())?;
        for (u, s_logit) in student_logits.iter().enumerate() {
            if u == v {
                continue;
            }
            let loss = bce_logit_loss(s_logit, &target)?;
            total = Some(match total {
                Some(acc) => (acc + loss)?,
                None => loss,
            });
            pairs += 1;
        }
    }
    Ok((total.expect("at least one pair") / pairs as f64)?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// w_dino * l_dino + w_cls * l_cls.
pub fn combine_losses(l_dino: &Tensor, l_cls: &Tensor, weights: (f64, f64)) -> Result<Tensor> {
    if weights.0 < 0.0 || weights.1 < 0.0 {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    if weights.0 == 0.0 && weights.1 == 0.0 {
        return Err(Error::invalid("loss weights must not both be zero"));
    }
    Ok(((l_dino * weights.0)? + (l_cls * weights.1)?)?)
}

/// p_t <- m * p_t + (1 - m) * p_s for every parameter.
pub fn ema_update(teacher: &ParamStore, student: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid("ema momentum must be in [0,1]"));
    }
    if !teacher.shapes_match(student) {
        return Err(Error::ShapeMismatch("teacher and student parameter lists differ".into()));
    }
    if m == 1.0 {
        return Ok(());
    }
    for (name, t_var) in teacher.named_vars() {
        let s = student.named_vars().get(name).expect("checked by shapes_match");
        let updated = ((t_var.as_tensor() * m)? + (s.as_tensor() * (1.0 - m))?)?;
        t_var.set(&updated)?;
    }
    Ok(())
}

/// end + (start - end) * (1 + cos(pi t / T)) / 2.
pub fn cosine_schedule(t: usize, total: usize, start: f64, end: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("schedule length must be positive"));
    }
    if t > total {
        return Err(Error::invalid("schedule step beyond total"));
    }
    let cos = (std::f64::consts::PI * t as f64 / total as f64).cos();
    Ok(end + (start - end) * (1.0 + cos) / 2.0)
}

/// Cosine-annealed training hyperparameters and loop sizing.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// (base, final) learning rate.
    pub lr: (f64, f64),
    /// (base, final) weight decay.
    pub weight_decay: (f64, f64),
    /// (base, final) EMA momentum for the teacher.
    pub ema_momentum: (f64, f64),
    /// (w_dino, w_cls).
    pub loss_weights: (f64, f64),
    /// Supervised correction cadence in iterations.
    pub correction_interval: usize,
    pub stages: usize,
    pub warmup_epochs: usize,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub center_momentum: f64,
    pub student_temp: f64,
    pub teacher_temp: (f64, f64),
    pub teacher_temp_warmup_iters: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: (5e-4, 1e-6),
            weight_decay: (0.04, 0.4),
            ema_momentum: (0.996, 1.0),
            loss_weights: (1.0, 1.0),
            correction_interval: 500,
            stages: 3,
            warmup_epochs: 10,
            epochs_per_stage: 10,
            batch_size: 16,
            seed: 0,
            center_momentum: 0.9,
            student_temp: 0.1,
            teacher_temp: (0.01, 0.04),
            teacher_temp_warmup_iters: 30,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.correction_interval == 0 {
            return Err(Error::invalid("correction_interval must be >= 1"));
        }
        if self.loss_weights.0 < 0.0 || self.loss_weights.1 < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.loss_weights.0 == 0.0 && self.loss_weights.1 == 0.0 {
            return Err(Error::invalid("loss weights must not both be zero"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.student_temp <= 0.0 || self.teacher_temp.0 <= 0.0 || self.teacher_temp.1 <= 0.0 {
            return Err(Error::invalid("temperatures must be strictly positive"));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over a fixed parameter list. Weight decay
/// is applied to matrices and conv kernels only.
pub struct AdamW {
    entries: Vec<(Var, Tensor, Tensor, bool)>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(vars: Vec<Var>, betas: (f64, f64), eps: f64) -> Result<Self> {
        let mut entries = Vec::with_capacity(vars.len());
        for var in vars {
            let t = var.as_tensor();
            let m = t.zeros_like()?;
            let v = t.zeros_like()?;
            let decay = t.dims().len() >= 2;
            entries.push((var, m, v, decay));
        }
        Ok(AdamW { entries, step: 0, beta1: betas.0, beta2: betas.1, eps })
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64, weight_decay: f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (var, m, v, decay) in &mut self.entries {
            let Some(grad) = grads.get(var.as_tensor()) else { continue };
            *m = ((&*m * self.beta1)? + (grad * (1.0 - self.beta1))?)?;
            *v = ((&*v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let mut next = (var.as_tensor() - (update * lr)?)?;
            if *decay && weight_decay > 0.0 {
                next = (next - (var.as_tensor() * (lr * weight_decay))?)?;
            }
            var.set(&next)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t64(data: &[f64], shape: (usize, usize)) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn v64(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec(), data.len(), &Device::Cpu).unwrap()
    }

    fn softplus64(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn bce_matches_closed_form() {
        let loss = bce_logit_loss(&v64(&[0.0]), &v64(&[0.5])).unwrap();
        assert!((loss.to_vec0::<f64>().unwrap() - 2f64.ln()).abs() < 1e-12);

        let logit = 2.0;
        let target = sig(2.0);
        let expect = softplus64(logit) - target * logit;
        let loss = bce_logit_loss(&v64(&[logit]), &v64(&[target])).unwrap();
        assert!((loss.to_vec0::<f64>().unwrap() - expect).abs() < 1e-12);

        // extreme logit with matching hard target: loss vanishes, no overflow
        let loss = bce_logit_loss(&v64(&[30.0]), &v64(&[1.0])).unwrap();
        assert!(loss.to_vec0::<f64>().unwrap() < 1e-12);
        let loss = bce_logit_loss(&v64(&[-30.0]), &v64(&[0.0])).unwrap();
        assert!(loss.to_vec0::<f64>().unwrap() < 1e-12);

        // batch mean
        let loss = bce_logit_loss(&v64(&[1.0, -1.0]), &v64(&[1.0, 0.0])).unwrap();
        let expect = (softplus64(1.0) - 1.0 + softplus64(-1.0)) / 2.0;
        assert!((loss.to_vec0::<f64>().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_bad_inputs() {
        assert!(bce_logit_loss(&v64(&[0.0]), &v64(&[1.2])).is_err());
        assert!(bce_logit_loss(&v64(&[0.0]), &v64(&[-0.1])).is_err());
        assert!(bce_logit_loss(&v64(&[0.0, 1.0]), &v64(&[0.5])).is_err());
    }

    fn dino_state(k: usize) -> DinoState {
        DinoState::new(k, DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn dino_loss_uniform_views_give_ln_k() {
        let k = 4;
        let z = t64(&[0.0; 8], (2, 4));
        let (loss, _) = dino_loss(&[z.clone(), z.clone()], &[z.clone()], &dino_state(k), 0.04).unwrap();
        assert!((loss.to_vec0::<f64>().unwrap() - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dino_loss_matches_independent_arithmetic() {
        // one teacher view, two student views, batch 1, K = 3
        let t = [1.0, 0.0, 0.0];
        let s0 = [0.2, -0.1, 0.4];
        let s1 = [0.5, 0.2, 0.3];
        let temp_t = 0.04;
        let temp_s = 0.1;

        let softmax = |x: &[f64], temp: f64| {
            let mx = x.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = x.iter().map(|v| ((v - mx) / temp).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect::<Vec<f64>>()
        };
        let cross = |t: &[f64], s: &[f64]| -> f64 {
            let tp = softmax(t, temp_t);
            let sp = softmax(s, temp_s);
            -tp.iter().zip(&sp).map(|(a, b)| a * b.ln()).sum::<f64>()
        };
        // pair (v=0, u=1) only: teacher view 0 against student view 1
        let expect = cross(&t, &s1);

        let (loss, center) = dino_loss(
            &[t64(&s0, (1, 3)), t64(&s1, (1, 3))],
            &[t64(&t, (1, 3))],
            &dino_state(3),
            temp_t,
        )
        .unwrap();
        assert!((loss.to_vec0::<f64>().unwrap() - expect).abs() < 1e-10);

        // center: 0.9 * 0 + 0.1 * mean of raw teacher scores
        let c = center.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (got, raw) in c.iter().zip(&t) {
            assert!((got - 0.1 * raw).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_lower_bounded_by_teacher_entropy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(31);
        let state = dino_state(5);
        for _ in 0..20 {
            let t: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (loss, _) = dino_loss(
                &[t64(&s, (1, 5)), t64(&s, (1, 5))],
                &[t64(&t, (1, 5))],
                &state,
                0.04,
            )
            .unwrap();
            // teacher entropy at temp 0.04
            let mx = t.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = t.iter().map(|v| ((v - mx) / 0.04).exp()).collect();
            let z: f64 = e.iter().sum();
            let entropy: f64 = e.iter().map(|v| { let p = v / z; if p > 0.0 { -p * p.ln() } else { 0.0 } }).sum();
            assert!(loss.to_vec0::<f64>().unwrap() >= entropy - 1e-9);
        }
        // equality when the student distribution equals the teacher's:
        // student scores = teacher scores scaled by temp ratio
        let t = [0.4, -0.2, 0.1, 0.0, 0.3];
        let s: Vec<f64> = t.iter().map(|v| v * (0.1 / 0.04)).collect();
        let (loss, _) = dino_loss(
            &[t64(&s, (1, 5)), t64(&s, (1, 5))],
            &[t64(&t, (1, 5))],
            &state,
            0.04,
        )
        .unwrap();
        let mx = t.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = t.iter().map(|v| ((v - mx) / 0.04).exp()).collect();
        let z: f64 = e.iter().sum();
        let entropy: f64 = e.iter().map(|v| { let p = v / z; -p * p.ln() }).sum();
        assert!((loss.to_vec0::<f64>().unwrap() - entropy).abs() < 1e-9);
    }

    #[test]
    fn dino_loss_blocks_teacher_gradient_and_matches_fd() {
        let s0 = Var::from_tensor(&t64(&[0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0, 0.6], (2, 4))).unwrap();
        let s1 = Var::from_tensor(&t64(&[0.1, 0.4, -0.3, 0.2, 0.5, -0.1, 0.3, -0.2], (2, 4))).unwrap();
        let tv = Var::from_tensor(&t64(&[1.0, 0.2, -0.5, 0.3, -0.2, 0.8, 0.1, 0.0], (2, 4))).unwrap();
        let state = dino_state(4);
        let (loss, _) = dino_loss(
            &[s0.as_tensor().clone(), s1.as_tensor().clone()],
            &[tv.as_tensor().clone()],
            &state,
            0.04,
        )
        .unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(tv.as_tensor()).is_none(), "teacher received gradient");

        let grad_s1 = grads.get(s1.as_tensor()).expect("student view in pair gets gradient");
        let g = grad_s1.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        let base = s1.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for idx in 0..base.len() {
            let eval = |delta: f64| {
                let mut d = base.clone();
                d[idx] += delta;
                let (l, _) = dino_loss(
                    &[s0.as_tensor().clone(), t64(&d, (2, 4))],
                    &[tv.as_tensor().clone()],
                    &state,
                    0.04,
                )
                .unwrap();
                l.to_vec0::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6, "index {idx}: fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn pseudo_label_loss_matches_pairwise_oracle() {
        // two teacher globals, three student views, batch 1
        let tl = [2.0, -1.0];
        let sl = [1.0, 0.0, -0.5];
        let mut expect = 0.0;
        let mut pairs = 0;
        for (v, t) in tl.iter().enumerate() {
            for (u, s) in sl.iter().enumerate() {
                if u == v {
                    continue;
                }
                expect += softplus64(*s) - sig(*t) * s;
                pairs += 1;
            }
        }
        expect /= pairs as f64;
        let loss = pseudo_label_loss(
            &[v64(&[sl[0]]), v64(&[sl[1]]), v64(&[sl[2]])],
            &[v64(&[tl[0]]), v64(&[tl[1]])],
        )
        .unwrap();
        assert!((loss.to_vec0::<f64>().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_loss_zero_logits_give_ln_two() {
        let z = v64(&[0.0, 0.0]);
        let loss = pseudo_label_loss(&[z.clone(), z.clone()], &[z.clone()]).unwrap();
        assert!((loss.to_vec0::<f64>().unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_label_gradient_matches_fd_and_skips_teacher() {
        let s0 = Var::from_tensor(&v64(&[0.7, -0.3])).unwrap();
        let s1 = Var::from_tensor(&v64(&[-0.2, 0.4])).unwrap();
        let tv = Var::from_tensor(&v64(&[1.5, -0.8])).unwrap();
        let loss = pseudo_label_loss(
            &[s0.as_tensor().clone(), s1.as_tensor().clone()],
            &[tv.as_tensor().clone()],
        )
        .unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(tv.as_tensor()).is_none());
        let g = grads.get(s1.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let base = s1.as_tensor().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for idx in 0..base.len() {
            let eval = |delta: f64| {
                let mut d = base.clone();
                d[idx] += delta;
                pseudo_label_loss(&[s0.as_tensor().clone(), v64(&d)], &[tv.as_tensor().clone()])
                    .unwrap()
                    .to_vec0::<f64>()
                    .unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn combine_losses_weighted_sum_and_guards() {
        let a = v64(&[1.0]).reshape(()).unwrap();
        let b = v64(&[2.0]).reshape(()).unwrap();
        let c = combine_losses(&a, &b, (0.7, 0.3)).unwrap();
        assert!((c.to_vec0::<f64>().unwrap() - 1.3).abs() < 1e-12);
        assert!(combine_losses(&a, &b, (0.0, 0.0)).is_err());
        assert!(combine_losses(&a, &b, (-1.0, 1.0)).is_err());
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        use crate::model::ParamStore;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(41);
        let mut teacher = ParamStore::new(Device::Cpu, DType::F64);
        let mut student = ParamStore::new(Device::Cpu, DType::F64);
        teacher.normal("w", &[3, 2], 1.0, &mut rng).unwrap();
        student.normal("w", &[3, 2], 1.0, &mut rng).unwrap();
        let t0 = teacher.get("w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let s0 = student.get("w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();

        ema_update(&teacher, &student, 1.0).unwrap();
        let t = teacher.get("w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(t, t0, "m = 1 must leave the teacher untouched");

        ema_update(&teacher, &student, 0.5).unwrap();
        let t = teacher.get("w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for ((mid, a), b) in t.iter().zip(&t0).zip(&s0) {
            assert!((mid - (a + b) / 2.0).abs() < 1e-12);
            // containment: result stays between the two inputs
            assert!(*mid >= a.min(*b) - 1e-12 && *mid <= a.max(*b) + 1e-12);
        }

        ema_update(&teacher, &student, 0.0).unwrap();
        let t = teacher.get("w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(t, s0, "m = 0 must copy the student");

        assert!(ema_update(&teacher, &student, 1.5).is_err());
        let mut other = ParamStore::new(Device::Cpu, DType::F64);
        other.normal("w", &[2, 2], 1.0, &mut rng).unwrap();
        assert!(ema_update(&teacher, &other, 0.5).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert!((cosine_schedule(0, 100, 5e-4, 1e-6).unwrap() - 5e-4).abs() < 1e-15);
        assert!((cosine_schedule(100, 100, 5e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-15);
        let mid = cosine_schedule(50, 100, 0.996, 1.0).unwrap();
        assert!((mid - 0.998).abs() < 1e-12);
        assert!(cosine_schedule(0, 0, 1.0, 0.0).is_err());
        assert!(cosine_schedule(11, 10, 1.0, 0.0).is_err());
    }

    #[test]
    fn teacher_temp_ramps_linearly() {
        let state = dino_state(4);
        assert!((state.teacher_temp(0) - 0.01).abs() < 1e-15);
        assert!((state.teacher_temp(15) - 0.025).abs() < 1e-15);
        assert!((state.teacher_temp(30) - 0.04).abs() < 1e-15);
        assert!((state.teacher_temp(1000) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_lr_is_identity_and_first_step_matches_hand_math() {
        let x = Var::from_tensor(&t64(&[1.0, -2.0, 0.5, 3.0], (2, 2))).unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();

        let mut opt = AdamW::new(vec![x.clone()], (0.9, 0.999), 1e-8).unwrap();
        let before = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        opt.step(&grads, 0.0, 0.0).unwrap();
        let after = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(before, after, "lr = 0 must be an exact no-op");

        // first real step: bias correction makes m_hat = g, v_hat = g^2,
        // so the update is lr * g / (|g| + eps), plus decoupled decay
        let lr = 0.01;
        let wd = 0.1;
        let mut opt = AdamW::new(vec![x.clone()], (0.9, 0.999), 1e-8).unwrap();
        opt.step(&grads, lr, wd).unwrap();
        let got = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, (&b, &g0)) in before.iter().zip(&before).enumerate() {
            let _ = g0;
            let g = 2.0 * b; // d/dx sum(x^2)
            let expect = b - lr * g / (g.abs() + 1e-8) - lr * wd * b;
            assert!((got[i] - expect).abs() < 1e-10, "{} vs {expect}", got[i]);
        }
    }

    #[test]
    fn adamw_skips_bias_decay() {
        let w = Var::from_tensor(&t64(&[2.0, 2.0, 2.0, 2.0], (2, 2))).unwrap();
        let b = Var::from_tensor(&v64(&[2.0])).unwrap();
        // loss independent of both: no grads, so only decay could move them
        let unrelated = Var::from_tensor(&v64(&[1.0])).unwrap();
        let loss = unrelated.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(vec![w.clone(), b.clone()], (0.9, 0.999), 1e-8).unwrap();
        opt.step(&grads, 0.1, 0.5).unwrap();
        // no gradient -> parameter skipped entirely, decay or not
        assert_eq!(w.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.0; 4]);
        assert_eq!(b.as_tensor().to_vec1::<f64>().unwrap(), vec![2.0]);

        // with gradients present, the matrix decays and the vector does not
        let loss = ((w.as_tensor().sum_all().unwrap() * 0.0).unwrap()
            + (b.as_tensor().sum_all().unwrap() * 0.0).unwrap())
        .unwrap();
        let _ = loss;
        let wsum = w.as_tensor().sum_all().unwrap();
        let bsum = b.as_tensor().sum_all().unwrap();
        let total = ((wsum * 1e-30).unwrap() + (bsum * 1e-30).unwrap()).unwrap();
        let grads = total.backward().unwrap();
        let mut opt = AdamW::new(vec![w.clone(), b.clone()], (0.9, 0.999), 1e-8).unwrap();
        opt.step(&grads, 0.0, 0.5).unwrap();
        // lr = 0: even the decay term (scaled by lr) is a no-op, both stay
        assert_eq!(w.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![2.0; 4]);
        opt.step(&grads, 0.1, 0.5).unwrap();
        let wd_after = w.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b_after = b.as_tensor().to_vec1::<f64>().unwrap();
        // matrix moved by decay (2.0 * 0.1 * 0.5 = 0.1) plus a tiny adam term
        assert!((wd_after[0] - 1.9).abs() < 1e-2, "{}", wd_after[0]);
        // bias saw no decay; only the tiny adam term
        assert!((b_after[0] - 2.0).abs() < 1e-2);
    }
}
