//! Self-distillation with an exponential-moving-average teacher.
//!
//! The teacher sees only the global views; its outputs are centred, sharpened
//! with a low temperature and used as fixed soft targets. The student sees all
//! views and is trained to match every teacher view other than its own.

use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::augment::MultiCropSpec;
use crate::tensor::{
    ema_update, kernels, OptimizerConfig, OptimizerState, ParamStore, Result, Tape, Target, Tensor,
    TensorError,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DinoConfig {
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub center_momentum: f64,
    /// Teacher momentum follows a cosine ramp from `.0` to `.1` over training.
    pub teacher_momentum: (f64, f64),
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub out_dim: usize,
    pub optimizer: OptimizerConfig,
    pub multicrop: MultiCropSpec,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for DinoConfig {
    fn default() -> Self {
        DinoConfig {
            student_temp: 0.1,
            teacher_temp: 0.04,
            center_momentum: 0.9,
            teacher_momentum: (0.996, 1.0),
            hidden_dim: 256,
            bottleneck_dim: 64,
            out_dim: 256,
            optimizer: OptimizerConfig::adamw(5e-4, 1e-4).with_clip(0.3),
            multicrop: MultiCropSpec::scaled(32),
            batch_size: 64,
            epochs: 12,
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TensorError::Invalid(format!("dino: {m}")));
        if !(self.student_temp > 0.0 && self.teacher_temp > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return bad("center momentum must lie in [0, 1]");
        }
        let (a, b) = self.teacher_momentum;
        if !((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a <= b) {
            return bad("teacher momentum must satisfy 0 <= start <= end <= 1");
        }
        if self.multicrop.n_global < 2 {
            return bad("at least 2 global views are required");
        }
        self.optimizer.validate()
    }
}

/// Cosine ramp `end - (end - start) * (1 + cos(pi * step / total)) / 2`.
pub fn teacher_momentum(cfg: &DinoConfig, step: u64, total_steps: u64) -> f64 {
    let (start, end) = cfg.teacher_momentum;
    if total_steps == 0 {
        return end;
    }
    let progress = (step as f64 / total_steps as f64).min(1.0);
    end - (end - start) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// Student, teacher, centre and optimizer of one run.
#[derive(Clone, Debug)]
pub struct DinoState {
    pub student: Network,
    pub teacher: ParamStore<f32>,
    pub center: Vec<f32>,
    pub optimizer: OptimizerState,
    pub step: u64,
}

impl DinoState {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: Network, cfg: &DinoConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = OptimizerState::new(cfg.optimizer.clone(), &student.params)?;
        Ok(DinoState {
            teacher: student.params.detached(),
            center: vec![0.0; student.out_dim()],
            student,
            optimizer,
            step: 0,
        })
    }

    /// The teacher parameters wrapped as a network (for evaluation).
    pub fn teacher_network(&self) -> Result<Network> {
        Network::from_params(self.student.arch.clone(), self.teacher.clone())
    }
}

/// Views of one batch: each entry is `[B, 3, S, S]`; all globals share one
/// size and all locals another.
#[derive(Clone, Debug)]
pub struct DinoBatch {
    pub globals: Vec<Tensor<f32>>,
    pub locals: Vec<Tensor<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DinoStepReport {
    pub loss: f32,
    pub grad_norm: f64,
    pub momentum: f64,
    /// Mean entropy of the teacher distributions.
    pub teacher_entropy: f64,
}

fn stack_views(views: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = &views[0];
    let mut shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * views.len());
    for v in views {
        if v.shape() != first.shape() {
            return Err(TensorError::Shape {
                op: "dino_step",
                detail: format!("view shapes {:?} and {:?} differ", v.shape(), first.shape()),
            });
        }
        data.extend_from_slice(v.data());
    }
    shape[0] *= views.len();
    Tensor::new(shape, data)
}

/// Row-wise `softmax((logits - center) / temp)` in `f64`.
fn teacher_probs(logits: &[f32], center: &[f32], temp: f64, k: usize) -> Vec<f64> {
    let shifted: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 - center[i % k] as f64) / temp)
        .collect();
    kernels::softmax_rows(&shifted, k)
}

fn entropy_rows(p: &[f64], k: usize) -> Vec<f64> {
    p.chunks(k)
        .map(|row| {
            -row.iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| v * v.ln())
                .sum::<f64>()
        })
        .collect()
}

/// Soft targets for every student row: row `(s, b)` holds the sum of the
/// teacher distributions of batch item `b` over all global views `t != s`.
fn pair_targets(p_t: &[f64], n_global: usize, n_views: usize, b: usize, k: usize) -> Vec<f32> {
    let mut q = vec![0.0f64; n_views * b * k];
    for s in 0..n_views {
        for t in 0..n_global {
            if t == s {
                continue;
            }
            for i in 0..b * k {
                q[s * b * k + i] += p_t[t * b * k + i];
            }
        }
    }
    q.into_iter().map(|v| v as f32).collect()
}

fn num_pairs(n_global: usize, n_views: usize) -> usize {
    n_global * (n_views - 1)
}

/// The distillation loss for given head outputs, in `f64`. `teacher` holds one
/// `[B, K]` block per global view, `student` one per view (globals first).
pub fn dino_loss_value(
    teacher: &[Tensor<f32>],
    student: &[Tensor<f32>],
    center: &[f32],
    student_temp: f64,
    teacher_temp: f64,
) -> Result<f64> {
    let n_global = teacher.len();
    if n_global < 2 || student.len() < n_global {
        return Err(TensorError::Invalid(
            "need >= 2 teacher views and a student output per view".into(),
        ));
    }
    let k = teacher[0].shape()[1];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (t, tv) in teacher.iter().enumerate() {
        let p = teacher_probs(tv.data(), center, teacher_temp, k);
        for (s, sv) in student.iter().enumerate() {
            if s == t {
                continue;
            }
            let z: Vec<f64> = sv.data().iter().map(|&v| v as f64 / student_temp).collect();
            let logq = kernels::log_softmax_rows(&z, k);
            let rows = p.len() / k;
            let ce: f64 = -p.iter().zip(&logq).map(|(a, b)| a * b).sum::<f64>() / rows as f64;
            total += ce;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// One student update, teacher EMA step and centre update.
pub fn dino_step(
    state: &mut DinoState,
    batch: &DinoBatch,
    cfg: &DinoConfig,
    momentum: f64,
) -> Result<DinoStepReport> {
    let n_global = batch.globals.len();
    if n_global < 2 {
        return Err(TensorError::Invalid(format!(
            "dino_step needs at least 2 global views, got {n_global}"
        )));
    }
    let n_views = n_global + batch.locals.len();
    let b = batch.globals[0].shape()[0];
    if batch.locals.iter().any(|l| l.shape()[0] != b) {
        return Err(TensorError::Invalid(
            "all views must share the batch size".into(),
        ));
    }
    let k = state.student.out_dim();
    let globals = stack_views(&batch.globals)?;

    // teacher: no gradient path, parameters never enter a differentiable tape
    let mut ttape = Tape::no_grad();
    let gx = ttape.constant(&globals);
    let tout = state.student.forward_var(&mut ttape, &state.teacher, gx)?;
    let t_logits = ttape.data(tout).to_vec();
    let p_t = teacher_probs(&t_logits, &state.center, cfg.teacher_temp, k);
    let teacher_entropy = entropy_rows(&p_t, k).iter().sum::<f64>() / (n_global * b) as f64;
    let targets = pair_targets(&p_t, n_global, n_views, b, k);

    // student over all views
    state.student.params.clear_grads();
    let mut tape = Tape::new();
    let sx = tape.constant(&globals);
    let mut outs = vec![state
        .student
        .forward_var(&mut tape, &state.student.params, sx)?];
    if !batch.locals.is_empty() {
        let locals = stack_views(&batch.locals)?;
        let lx = tape.constant(&locals);
        outs.push(
            state
                .student
                .forward_var(&mut tape, &state.student.params, lx)?,
        );
    }
    let all = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat(&outs, 0)?
    };
    let scaled = tape.scale(all, 1.0 / cfg.student_temp as f32)?;
    let q = Tensor::new(vec![n_views * b, k], targets)?;
    let ce = tape.cross_entropy(scaled, Target::Soft(q))?;
    // cross_entropy averages over n_views * b rows; rescale to a mean over pairs
    let loss = tape.scale(
        ce,
        (n_views as f64 / num_pairs(n_global, n_views) as f64) as f32,
    )?;
    let value = tape.scalar_value(loss);
    tape.backward(loss, &mut state.student.params)?;
    let report = state.optimizer.step(&mut state.student.params)?;

    ema_update(&mut state.teacher, &state.student.params, momentum)?;
    let m = cfg.center_momentum as f32;
    let rows = n_global * b;
    for (j, c) in state.center.iter_mut().enumerate() {
        let mean = (0..rows).map(|r| t_logits[r * k + j] as f64).sum::<f64>() / rows as f64;
        *c = m * *c + (1.0 - m) * mean as f32;
    }
    state.step += 1;
    Ok(DinoStepReport {
        loss: value,
        grad_norm: report.grad_norm,
        momentum,
        teacher_entropy,
    })
}
