//! Gradients (phantom, fully unrolled, explicit), Adam, and the two-phase curriculum.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointError, TrainingState};
use crate::dataset::{Batch, Sampler};
use crate::model::{ModelError, SequenceModel, StepCtx, Variant};
use crate::numerics::{NumericsError, Scalar, Tape, Tensor, Var};
use crate::solver::{RunStats, SolveStatus, SolverConfig};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("numeric failure in the forward solve")]
    NumericFailure,
    #[error("singular system: {0}")]
    Singular(String),
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Phantom,
    Unrolled,
    Explicit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub k: usize,
    #[serde(default = "one_f64")]
    pub lambda: f64,
}

fn one_f64() -> f64 {
    1.0
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { k: 1, lambda: 1.0 }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k == 0 || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(TrainError::Plan(format!("phantom needs k >= 1 and lambda in (0, 1], got {self:?}")));
        }
        Ok(())
    }
}

/// Gradient, loss and bookkeeping of one batch.
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub loss: f64,
    pub accuracy: f64,
    /// One gradient per model parameter, in parameter order.
    pub grads: Vec<Tensor<T>>,
    pub stats: RunStats,
    /// Peak activation scalars held on the gradient tape.
    pub peak_activations: usize,
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let v = logits.cols();
    let hits = logits.data().chunks(v).zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    hits as f64 / labels.len().max(1) as f64
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Applies `k` taped steps `z ← λF(z) + (1−λ)z` starting at `z`.
pub fn unroll_damped<T: Scalar, E>(
    tape: &mut Tape<T>,
    mut z: Var,
    k: usize,
    lambda: f64,
    mut f: impl FnMut(&mut Tape<T>, Var) -> Result<Var, E>,
) -> Result<Var, E>
where
    E: From<NumericsError>,
{
    for _ in 0..k {
        let fz = f(tape, z)?;
        z = if lambda == 1.0 {
            fz
        } else {
            let a = tape.scale(fz, T::lit(lambda))?;
            let b = tape.scale(z, T::lit(1.0 - lambda))?;
            tape.add(a, b)?
        };
    }
    Ok(z)
}

fn finish<T: Scalar>(
    model: &SequenceModel<T>,
    tape: &mut Tape<T>,
    params: &[Var],
    logits: Var,
    batch: &Batch,
    stats: RunStats,
) -> Result<StepOutput<T>, TrainError> {
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let grads = tape.backward(loss)?;
    let _ = model;
    Ok(StepOutput {
        loss: tape.value(loss).item().as_f64(),
        accuracy: accuracy(tape.value(logits), &batch.labels),
        grads: params.iter().map(|&p| grads.get_or_zero(p)).collect(),
        stats,
        peak_activations: tape.peak_activation_elems(),
    })
}

fn require_implicit<T: Scalar>(model: &SequenceModel<T>) -> Result<(), TrainError> {
    if model.config().variant != Variant::Implicit {
        return Err(TrainError::Plan("implicit gradient modes need an implicit model".into()));
    }
    Ok(())
}

/// Untaped solve to `ẑ`, then `k` taped damped steps from `ẑ` and backprop through those only.
pub fn phantom_gradient_step<T: Scalar>(
    model: &SequenceModel<T>,
    batch: &Batch,
    solver: &SolverConfig,
    phantom: &PhantomConfig,
) -> Result<StepOutput<T>, TrainError> {
    require_implicit(model)?;
    phantom.validate()?;
    let sol = model.solve(&batch.tokens, batch.batch, solver)?;
    if sol.stats.status == SolveStatus::NumericFailure {
        return Err(TrainError::NumericFailure);
    }
    phantom_from(model, batch, sol.z, phantom.k, phantom.lambda, sol.stats)
}

/// Taped part of the phantom step, starting at a given iterate.
pub fn phantom_from<T: Scalar>(
    model: &SequenceModel<T>,
    batch: &Batch,
    z_hat: Tensor<T>,
    k: usize,
    lambda: f64,
    stats: RunStats,
) -> Result<StepOutput<T>, TrainError> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &batch.tokens, batch.batch, true)?;
    let z0 = tape.constant(z_hat);
    let inject = b.inject;
    let z = unroll_damped(&mut tape, z0, k, lambda, |t, z| -> Result<Var, TrainError> {
        Ok(b.apply(t, inject, z, StepCtx::Full)?.0)
    })?;
    let logits = b.logits(&mut tape, z)?;
    let params = b.params.clone();
    finish(model, &mut tape, &params, logits, batch, stats)
}

/// Full backprop through `s` iterations from `z = 0`.
pub fn unrolled_gradient_step<T: Scalar>(model: &SequenceModel<T>, batch: &Batch, s: usize) -> Result<StepOutput<T>, TrainError> {
    require_implicit(model)?;
    if s == 0 {
        return Err(TrainError::Plan("unrolled training needs at least one step".into()));
    }
    let z0 = Tensor::zeros(&[batch.tokens.len(), model.config().d_model]);
    let stats = RunStats {
        iterations: s,
        final_residual: f64::NAN,
        converged: false,
        status: SolveStatus::MaxIters,
        per_token_histogram: Vec::new(),
    };
    phantom_from(model, batch, z0, s, 1.0, stats)
}

/// Plain backprop through the explicit stack.
pub fn explicit_gradient_step<T: Scalar>(model: &SequenceModel<T>, batch: &Batch) -> Result<StepOutput<T>, TrainError> {
    if model.config().variant != Variant::Explicit {
        return Err(TrainError::Plan("explicit gradient mode needs an explicit model".into()));
    }
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &batch.tokens, batch.batch, true)?;
    let logits = b.explicit_logits(&mut tape)?;
    let params = b.params.clone();
    let stats = RunStats {
        iterations: 0,
        final_residual: 0.0,
        converged: true,
        status: SolveStatus::Converged,
        per_token_histogram: Vec::new(),
    };
    finish(model, &mut tape, &params, logits, batch, stats)
}

/// Reference gradient from the implicit function theorem at a tightly solved fixed point.
///
/// Materializes `J = ∂F/∂z` (iterate size at most 512) and solves `(I − J)ᵀ w = ∂L/∂z*`.
pub fn exact_implicit_gradient<T: Scalar>(
    model: &SequenceModel<T>,
    batch: &Batch,
    solver: &SolverConfig,
) -> Result<(f64, Vec<Tensor<T>>), TrainError> {
    require_implicit(model)?;
    let sol = model.solve(&batch.tokens, batch.batch, solver)?;
    if !sol.stats.converged {
        return Err(TrainError::Singular(format!(
            "fixed point not reached (residual {:.3e})",
            sol.stats.final_residual
        )));
    }
    let n = sol.z.len();
    if n > 512 {
        return Err(TrainError::Plan(format!("iterate of size {n} is too large to materialize")));
    }
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &batch.tokens, batch.batch, true)?;
    let z = tape.leaf(sol.z.clone());
    let (fz, _) = b.apply(&mut tape, b.inject, z, StepCtx::Full)?;
    let logits = b.logits(&mut tape, z)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let direct = tape.backward(loss)?;
    let gz: Vec<f64> = direct.get_or_zero(z).to_f64_vec();

    let mut jt = DMatrix::<f64>::zeros(n, n);
    let shape = tape.value(fz).shape().to_vec();
    for i in 0..n {
        let mut seed = Tensor::zeros(&shape);
        seed.data_mut()[i] = T::one();
        let row = tape.backward_seeded(fz, &seed)?.get_or_zero(z).to_f64_vec();
        for (j, v) in row.into_iter().enumerate() {
            // (I − J)ᵀ has entry (j, i) = δ_ij − J_ij
            jt[(j, i)] = -v;
        }
    }
    for i in 0..n {
        jt[(i, i)] += 1.0;
    }
    let lu = jt.lu();
    let w = lu
        .solve(&DVector::from_vec(gz))
        .ok_or_else(|| TrainError::Singular("I - dF/dz is not invertible".into()))?;
    let w_t = Tensor::new(shape, w.iter().map(|&v| T::lit(v)).collect())?;
    let through = tape.backward_seeded(fz, &w_t)?;
    let grads = b
        .params
        .iter()
        .map(|&p| {
            let mut g = direct.get_or_zero(p);
            g.axpy(T::one(), &through.get_or_zero(p)).expect("same shape");
            g
        })
        .collect();
    Ok((tape.value(loss).item().as_f64(), grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    /// Decoupled weight decay.
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "one_f64")]
    pub clip_norm: f64,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

/// Adam moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`; returns the original norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One bias-corrected Adam step at learning rate `lr`.
pub fn optimizer_update<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut AdamState<T>, hyper: &OptimConfig, lr: f64) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1t, b2t, eps, lr_t, wd) = (
        T::lit(b1),
        T::lit(b2),
        T::lit(hyper.eps),
        T::lit(lr),
        T::lit(lr * hyper.weight_decay),
    );
    let (c1t, c2t) = (T::lit(c1), T::lit(c2));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1t * *mi + (T::one() - b1t) * gi;
            *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
            let mhat = *mi / c1t;
            let vhat = *vi / c2t;
            *pi -= lr_t * mhat / (vhat.sqrt() + eps) + wd * *pi;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Constant until fraction `start` of the phase, then `lr · (1 − sqrt(i/n))`
    /// over the remainder, floored at `min_lr`.
    SqrtCooldown {
        min_lr: f64,
        #[serde(default)]
        start: f64,
    },
}

impl LrSchedule {
    pub fn at(&self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::SqrtCooldown { min_lr, start } => {
                let begin = (start.clamp(0.0, 1.0) * steps as f64).round() as usize;
                if step < begin {
                    return base;
                }
                let frac = (step - begin) as f64 / steps.saturating_sub(begin).max(1) as f64;
                (min_lr + (base - min_lr) * (1.0 - frac.sqrt())).max(*min_lr)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub name: String,
    pub gradient_mode: GradientMode,
    pub steps: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    /// Iterations taped by the unrolled mode.
    #[serde(default = "default_unroll")]
    pub unroll_steps: usize,
    #[serde(default = "default_schedule")]
    pub lr_schedule: LrSchedule,
}

fn default_unroll() -> usize {
    16
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub optimizer: OptimConfig,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Write a metrics line every `log_every` steps (every step when 1).
    #[serde(default = "one_usize")]
    pub log_every: usize,
}

fn one_usize() -> usize {
    1
}

impl TrainPlan {
    pub fn total_steps(&self) -> usize {
        self.phases.iter().map(|p| p.steps).sum()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.phases.is_empty() || self.batch_size == 0 || self.seq_len == 0 {
            return Err(TrainError::Plan("plan needs phases, a batch size and a length".into()));
        }
        for p in &self.phases {
            p.solver
                .validate()
                .map_err(|e| TrainError::Plan(format!("phase {}: {e}", p.name)))?;
            p.phantom.validate()?;
        }
        Ok(())
    }

    /// Bounded `(s_b + 1)` then free `(s_f + k)` phantom phases, split 80/20.
    pub fn two_phase(total_steps: usize, bounded_iters: usize, free_iters: usize, free_k: usize, tolerance: f64) -> Self {
        let bounded_steps = total_steps * 4 / 5;
        Self {
            phases: vec![
                Phase {
                    name: "bounded".into(),
                    gradient_mode: GradientMode::Phantom,
                    steps: bounded_steps,
                    solver: SolverConfig {
                        tolerance,
                        max_iters: bounded_iters,
                        early_stop: false,
                        ..Default::default()
                    },
                    phantom: PhantomConfig { k: 1, lambda: 1.0 },
                    unroll_steps: default_unroll(),
                    lr_schedule: LrSchedule::Constant,
                },
                Phase {
                    name: "free".into(),
                    gradient_mode: GradientMode::Phantom,
                    steps: total_steps - bounded_steps,
                    solver: SolverConfig {
                        tolerance,
                        max_iters: free_iters,
                        early_stop: true,
                        ..Default::default()
                    },
                    phantom: PhantomConfig { k: free_k, lambda: 1.0 },
                    unroll_steps: default_unroll(),
                    lr_schedule: LrSchedule::SqrtCooldown { min_lr: 1e-5, start: 0.0 },
                },
            ],
            optimizer: OptimConfig::default(),
            batch_size: 64,
            seq_len: 64,
            log_every: 1,
        }
    }
}

/// Gradient for one batch in the phase's mode.
pub fn gradient_step<T: Scalar>(model: &SequenceModel<T>, batch: &Batch, phase: &Phase) -> Result<StepOutput<T>, TrainError> {
    match phase.gradient_mode {
        GradientMode::Phantom => phantom_gradient_step(model, batch, &phase.solver, &phase.phantom),
        GradientMode::Unrolled => unrolled_gradient_step(model, batch, phase.unroll_steps),
        GradientMode::Explicit => explicit_gradient_step(model, batch),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: String,
    pub loss: f64,
    pub accuracy: f64,
    pub mean_iters: f64,
    pub mean_residual: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Where a curriculum run writes checkpoints and metrics.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct CurriculumResult {
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub skipped_steps: usize,
}

/// Runs the plan's phases in order on batches from `sampler`.
///
/// With `resume`, the checkpoint's plan must equal `plan` and training continues
/// from its recorded step with the stored optimizer state.
pub fn run_curriculum<T: Scalar>(
    plan: &TrainPlan,
    model: &mut SequenceModel<T>,
    sampler: &Sampler,
    out: &RunOutput,
    resume: Option<&Checkpoint>,
    mut on_step: impl FnMut(&MetricsRecord),
) -> Result<CurriculumResult, TrainError> {
    plan.validate()?;
    if sampler.vocab_size() != model.config().vocab_size {
        return Err(TrainError::Plan(format!(
            "data vocabulary {} vs model vocabulary {}",
            sampler.vocab_size(),
            model.config().vocab_size
        )));
    }
    if sampler.spec().length != plan.seq_len {
        return Err(TrainError::Plan(format!(
            "data length {} vs plan length {}",
            sampler.spec().length,
            plan.seq_len
        )));
    }
    let plan_json = serde_json::to_value(plan).expect("plan serializes");
    let mut adam = AdamState::new(model.params());
    let mut start = 0;
    if let Some(ck) = resume {
        let state = ck
            .training
            .as_ref()
            .ok_or_else(|| CheckpointError::Mismatch("checkpoint has no training state".into()))?;
        if state.plan != plan_json {
            return Err(CheckpointError::Mismatch("training plan differs from the checkpoint's".into()).into());
        }
        if &ck.model_config != model.config() {
            return Err(CheckpointError::Mismatch("model config differs from the checkpoint's".into()).into());
        }
        *model = ck.model::<T>()?;
        adam = ck.adam_state::<T>(model)?;
        start = state.step;
    }
    let mut metrics_file = match &out.dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(resume.is_some())
                .write(true)
                .truncate(resume.is_none())
                .open(dir.join("metrics.jsonl"))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let mut result = CurriculumResult {
        metrics: Vec::new(),
        checkpoints: Vec::new(),
        skipped_steps: 0,
    };
    let clock = Instant::now();
    let mut global = 0;
    for (pi, phase) in plan.phases.iter().enumerate() {
        for i in 0..phase.steps {
            let step = global + i;
            if step < start {
                continue;
            }
            let lr = phase.lr_schedule.at(plan.optimizer.lr, i, phase.steps);
            let batch = sampler.batch(plan.batch_size, step as u64);
            let out_step = match gradient_step(model, &batch, phase) {
                Ok(o) => o,
                Err(TrainError::NumericFailure) => {
                    result.skipped_steps += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut grads = out_step.grads;
            if grads.iter().any(|g| !g.is_finite()) {
                result.skipped_steps += 1;
                continue;
            }
            clip_global_norm(&mut grads, plan.optimizer.clip_norm);
            optimizer_update(model.params_mut(), &grads, &mut adam, &plan.optimizer, lr);
            let rec = MetricsRecord {
                step,
                phase: phase.name.clone(),
                loss: out_step.loss,
                accuracy: out_step.accuracy,
                mean_iters: out_step.stats.mean_iters(),
                mean_residual: out_step.stats.final_residual,
                lr,
                wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            };
            on_step(&rec);
            if step % plan.log_every.max(1) == 0 || i + 1 == phase.steps {
                if let Some(f) = metrics_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
                }
            }
            result.metrics.push(rec);
        }
        global += phase.steps;
        if global > start {
            if let Some(dir) = &out.dir {
                let state = TrainingState {
                    step: global,
                    plan: plan_json.clone(),
                };
                let path = dir.join(format!("phase-{pi}-{}.ckpt", phase.name));
                checkpoint::save(&path, model, Some((&state, &adam)))?;
                result.checkpoints.push(path);
            }
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    if let Some(dir) = &out.dir {
        let state = TrainingState {
            step: global,
            plan: plan_json,
        };
        let path = dir.join("final.ckpt");
        checkpoint::save(&path, model, Some((&state, &adam)))?;
        result.checkpoints.push(path);
    }
    Ok(result)
}

/// Path of the final checkpoint written by [`run_curriculum`].
pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join("final.ckpt")
}
