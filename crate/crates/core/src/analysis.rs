//! Diagnostics over trained or random models: state-to-state Jacobians,
//! agreement between the two solve modes, and accuracy sweeps.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Batch, DistributionSpec, Sampler};
use crate::model::{Backbone, LayerCarry, ModelError, SequenceModel, StepCtx, Variant};
use crate::numerics::{grad_check, NumericsError, Scalar, ScanMode, Tape, Tensor, Var};
use crate::solver::{residual, SolveMode, SolverConfig};
use crate::training::accuracy;

/// Guard in the relative-difference metric.
pub const REL_DIFF_GUARD: f64 = 1e-16;
/// Entries at or below this magnitude in both Jacobians are not compared.
pub const NEGLIGIBLE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("config: {0}")]
    Config(String),
    #[error("I - df/dz is singular (condition number {condition:.3e})")]
    Singular { condition: f64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A state-to-state Jacobian `dh_t / dh_{t-1}` for one sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateJacobian {
    /// Row-major `[S, S]` for `S` state channels.
    pub full: Vec<f64>,
    pub size: usize,
    /// Indices of the selected state variables, one per head.
    pub selected: Vec<usize>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Condition number of `I - df/dz`, when it was formed.
    pub condition: Option<f64>,
}

impl StateJacobian {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.full[i * self.size + j]
    }

    /// Sub-matrix over the selected variables.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        self.selected
            .iter()
            .map(|&i| self.selected.iter().map(|&j| self.get(i, j)).collect())
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JacobianReport {
    pub autodiff: Vec<Vec<f64>>,
    pub theorem: Vec<Vec<f64>>,
    pub rel_diff: Vec<Vec<f64>>,
    /// Over the selected grid, ignoring negligible entries.
    pub max_rel_diff: f64,
    pub mean_rel_diff: f64,
    pub compared: usize,
    /// Same statistic over every entry of the full matrices.
    pub full_max_rel_diff: f64,
    pub full_compared: usize,
    pub condition: Option<f64>,
    pub autodiff_iterations: usize,
    pub converged: bool,
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + REL_DIFF_GUARD)
}

impl JacobianReport {
    pub fn compare(autodiff: &StateJacobian, theorem: &StateJacobian) -> Result<Self, AnalysisError> {
        if autodiff.size != theorem.size || autodiff.selected != theorem.selected {
            return Err(AnalysisError::Config("jacobian shapes differ".into()));
        }
        let (ga, gt) = (autodiff.grid(), theorem.grid());
        let mut rd = Vec::with_capacity(ga.len());
        let (mut max, mut sum, mut n) = (0.0f64, 0.0, 0usize);
        for (ra, rt) in ga.iter().zip(&gt) {
            let mut row = Vec::with_capacity(ra.len());
            for (&a, &t) in ra.iter().zip(rt) {
                let r = rel_diff(a, t);
                row.push(r);
                if a.abs() > NEGLIGIBLE || t.abs() > NEGLIGIBLE {
                    max = max.max(r);
                    sum += r;
                    n += 1;
                }
            }
            rd.push(row);
        }
        let (mut full_max, mut full_n) = (0.0f64, 0usize);
        for (&a, &t) in autodiff.full.iter().zip(&theorem.full) {
            if a.abs() > NEGLIGIBLE || t.abs() > NEGLIGIBLE {
                full_max = full_max.max(rel_diff(a, t));
                full_n += 1;
            }
        }
        Ok(Self {
            autodiff: ga,
            theorem: gt,
            rel_diff: rd,
            max_rel_diff: max,
            mean_rel_diff: if n > 0 { sum / n as f64 } else { 0.0 },
            compared: n,
            full_max_rel_diff: full_max,
            full_compared: full_n,
            condition: theorem.condition,
            autodiff_iterations: autodiff.iterations,
            converged: autodiff.converged && theorem.converged,
        })
    }
}

/// Everything both Jacobian paths need: the carried state after the prefix
/// and the last token with its position.
struct Prefix<T> {
    h_prev: Tensor<T>,
    token: usize,
    pos: usize,
}

fn check_single_ssm<T: Scalar>(model: &SequenceModel<T>) -> Result<(), AnalysisError> {
    let c = model.config();
    if c.backbone != Backbone::Ssm || c.n_layers != 1 || c.variant != Variant::Implicit {
        return Err(AnalysisError::Config("state Jacobians need a single-layer implicit SSM".into()));
    }
    Ok(())
}

fn jacobian_cfg(tolerance: f64, max_iters: usize) -> SolverConfig {
    SolverConfig {
        tolerance,
        max_iters,
        mode: SolveMode::Sequential,
        ..Default::default()
    }
}

fn prefix<T: Scalar>(model: &SequenceModel<T>, tokens: &[usize], cfg: &SolverConfig) -> Result<Prefix<T>, AnalysisError> {
    check_single_ssm(model)?;
    let (&token, head) = tokens
        .split_last()
        .ok_or_else(|| AnalysisError::Config("need at least one token".into()))?;
    let state = if head.is_empty() {
        crate::model::SequentialState::empty(model.config(), 1)
    } else {
        model.solve_sequential(head, 1, cfg, None)?.1
    };
    Ok(Prefix {
        h_prev: state.carry[0][0].clone(),
        token,
        pos: head.len(),
    })
}

/// Index of one state variable per head (its first channel).
pub fn selected_states<T: Scalar>(model: &SequenceModel<T>) -> Vec<usize> {
    let c = model.config();
    let per_head = c.d_head * c.d_state;
    (0..c.n_heads).map(|h| h * per_head).collect()
}

/// Rows `d out / d wrt` of a taped vector output, one seeded pass per entry.
fn jacobian_rows<T: Scalar>(tape: &Tape<T>, out: Var, wrt: &[Var]) -> Result<Vec<DMatrix<f64>>, AnalysisError> {
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).len();
    let mut mats: Vec<DMatrix<f64>> = wrt.iter().map(|&w| DMatrix::zeros(n, tape.value(w).len())).collect();
    for i in 0..n {
        let mut seed = Tensor::zeros(&shape);
        seed.data_mut()[i] = T::one();
        let g = tape.backward_seeded(out, &seed)?;
        for (m, &w) in mats.iter_mut().zip(wrt) {
            for (j, v) in g.get_or_zero(w).to_f64_vec().into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
    }
    Ok(mats)
}

/// Jacobian from the closed form: `diag(Λ) + diag(h_{t-1}) Λ_z φ_h + u_z φ_h`
/// with `φ_h = (I - f_z)^{-1} f_h` at the converged iterate.
pub fn jacobian_theorem<T: Scalar>(
    model: &SequenceModel<T>,
    tokens: &[usize],
    tolerance: f64,
    max_iters: usize,
) -> Result<StateJacobian, AnalysisError> {
    let cfg = jacobian_cfg(tolerance, max_iters);
    let pre = prefix(model, tokens, &cfg)?;
    let state = crate::model::SequentialState {
        carry: vec![vec![pre.h_prev.clone()]],
        batch: 1,
        position: pre.pos,
    };
    let (sol, _) = model.solve_sequential(&[pre.token], 1, &cfg, Some(state))?;

    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &[pre.token], 1, false)?;
    let z = tape.leaf(sol.z.clone());
    let h = tape.leaf(pre.h_prev.clone());
    let carry = [LayerCarry::Ssm(h)];
    let parts = b.ssm_block(
        &mut tape,
        0,
        z,
        b.inject,
        StepCtx::Token {
            pos: pre.pos,
            carry: &carry,
        },
        model.config().read_previous,
    )?;

    let f = jacobian_rows(&tape, parts.out, &[z, h])?;
    let (f_z, f_h) = (&f[0], &f[1]);
    let lam_z = jacobian_rows(&tape, parts.decay, &[z])?.remove(0);
    let u_z = jacobian_rows(&tape, parts.input, &[z])?.remove(0);

    let d = f_z.nrows();
    let a = DMatrix::<f64>::identity(d, d) - f_z;
    let sv = a.singular_values();
    let smin = sv.min();
    let condition = if smin > 0.0 { sv.max() / smin } else { f64::INFINITY };
    if !condition.is_finite() || condition > 1e14 {
        return Err(AnalysisError::Singular { condition });
    }
    let phi_h = a.lu().solve(f_h).ok_or(AnalysisError::Singular { condition })?;

    let lam = tape.value(parts.decay).to_f64_vec();
    let hp = pre.h_prev.to_f64_vec();
    let mut j = &lam_z * &phi_h;
    for (r, &hv) in hp.iter().enumerate() {
        j.row_mut(r).scale_mut(hv);
    }
    j += &u_z * &phi_h;
    for (r, &l) in lam.iter().enumerate() {
        j[(r, r)] += l;
    }
    let s = j.nrows();
    let full = (0..s * s).map(|k| j[(k / s, k % s)]).collect();
    Ok(StateJacobian {
        full,
        size: s,
        selected: selected_states(model),
        iterations: sol.stats.iterations,
        residual: sol.stats.final_residual,
        converged: sol.stats.converged,
        condition: Some(condition),
    })
}

/// Jacobian by differentiating through the taped fixed-point iteration.
pub fn jacobian_autodiff<T: Scalar>(
    model: &SequenceModel<T>,
    tokens: &[usize],
    tolerance: f64,
    max_iters: usize,
) -> Result<StateJacobian, AnalysisError> {
    let cfg = jacobian_cfg(tolerance, max_iters);
    let pre = prefix(model, tokens, &cfg)?;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, &[pre.token], 1, false)?;
    let h = tape.leaf(pre.h_prev.clone());
    let carry = [LayerCarry::Ssm(h)];
    let mut z = tape.constant(Tensor::zeros(&[1, model.config().d_model]));
    let (mut iterations, mut res, mut converged) = (0, f64::INFINITY, false);
    let mut states = None;
    while iterations < max_iters {
        let parts = b.ssm_block(
            &mut tape,
            0,
            z,
            b.inject,
            StepCtx::Token {
                pos: pre.pos,
                carry: &carry,
            },
            model.config().read_previous,
        )?;
        iterations += 1;
        res = residual(tape.value(parts.out), tape.value(z), cfg.norm);
        states = Some(parts.states);
        if !res.is_finite() {
            break;
        }
        if res < tolerance {
            converged = true;
            break;
        }
        z = parts.out;
    }
    let states = states.ok_or_else(|| AnalysisError::Config("max_iters must be positive".into()))?;
    let j = jacobian_rows(&tape, states, &[h])?.remove(0);
    let s = j.nrows();
    Ok(StateJacobian {
        full: (0..s * s).map(|k| j[(k / s, k % s)]).collect(),
        size: s,
        selected: selected_states(model),
        iterations,
        residual: res,
        converged,
        condition: None,
    })
}

/// Both Jacobians on the same prefix and their comparison.
pub fn jacobian_check<T: Scalar>(
    model: &SequenceModel<T>,
    tokens: &[usize],
    tolerance: f64,
    max_iters: usize,
) -> Result<JacobianReport, AnalysisError> {
    let a = jacobian_autodiff(model, tokens, tolerance, max_iters)?;
    let t = jacobian_theorem(model, tokens, tolerance, max_iters)?;
    JacobianReport::compare(&a, &t)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualityReport {
    pub token_match_rate: f64,
    /// Sequential minus simultaneous perplexity at each position.
    pub per_position_ppl_diff: Vec<f64>,
    pub max_abs_ppl_diff: f64,
    pub max_prob_gap: f64,
    pub accuracy_simultaneous: f64,
    pub accuracy_sequential: f64,
}

fn softmax_rows(logits: &[f64], v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(v) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|x| x / s));
    }
    out
}

/// Runs both solve modes greedily on the same batch and compares them.
pub fn duality_check<T: Scalar>(model: &SequenceModel<T>, batch: &Batch, solver: &SolverConfig) -> Result<DualityReport, AnalysisError> {
    let v = model.config().vocab_size;
    let sim = SolverConfig {
        mode: SolveMode::Simultaneous,
        ..solver.clone()
    };
    let seq = SolverConfig {
        mode: SolveMode::Sequential,
        ..solver.clone()
    };
    let (la, _) = model.forward(&batch.tokens, batch.batch, &sim)?;
    let (lb, _) = model.forward(&batch.tokens, batch.batch, &seq)?;
    let pa = softmax_rows(&la.to_f64_vec(), v);
    let pb = softmax_rows(&lb.to_f64_vec(), v);
    let rows = batch.tokens.len();
    let argmax = |p: &[f64]| {
        p.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
            .0
    };
    let mut matches = 0;
    let mut gap = 0.0f64;
    for r in 0..rows {
        let (ra, rb) = (&pa[r * v..(r + 1) * v], &pb[r * v..(r + 1) * v]);
        if argmax(ra) == argmax(rb) {
            matches += 1;
        }
        for (x, y) in ra.iter().zip(rb) {
            gap = gap.max((x - y).abs());
        }
    }
    let len = batch.length;
    let mut ppl = Vec::with_capacity(len);
    for t in 0..len {
        let (mut na, mut nb) = (0.0, 0.0);
        for s in 0..batch.batch {
            let r = s * len + t;
            let y = batch.labels[r];
            na -= pa[r * v + y].max(f64::MIN_POSITIVE).ln();
            nb -= pb[r * v + y].max(f64::MIN_POSITIVE).ln();
        }
        let n = batch.batch as f64;
        ppl.push((nb / n).exp() - (na / n).exp());
    }
    Ok(DualityReport {
        token_match_rate: matches as f64 / rows as f64,
        max_abs_ppl_diff: ppl.iter().fold(0.0f64, |m, d| m.max(d.abs())),
        per_position_ppl_diff: ppl,
        max_prob_gap: gap,
        accuracy_simultaneous: accuracy(&la, &batch.labels),
        accuracy_sequential: accuracy(&lb, &batch.labels),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub p: f64,
    pub length: usize,
    pub mode: SolveMode,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub length: usize,
    pub mode: SolveMode,
    pub accuracy: f64,
    pub mean_iters: f64,
    pub residual: f64,
    pub converged: bool,
}

/// Accuracy over a grid of (p, length, mode) derived from `base`.
///
/// `solver` supplies tolerance and iteration cap; its mode is overridden per entry.
pub fn eval_sweep<T: Scalar>(
    model: &SequenceModel<T>,
    base: &DistributionSpec,
    entries: &[SweepEntry],
    samples: usize,
    solver: &SolverConfig,
) -> Result<Vec<SweepRow>, AnalysisError> {
    entries
        .par_iter()
        .map(|e| {
            let spec = DistributionSpec {
                p: e.p,
                length: e.length,
                ..base.clone()
            };
            let sampler = Sampler::new(spec).map_err(|err| AnalysisError::Config(err.to_string()))?;
            if sampler.vocab_size() != model.config().vocab_size {
                return Err(AnalysisError::Config(format!(
                    "distribution vocabulary {} vs model vocabulary {}",
                    sampler.vocab_size(),
                    model.config().vocab_size
                )));
            }
            let data = sampler.eval_set(samples);
            let cfg = SolverConfig {
                mode: e.mode,
                ..solver.clone()
            };
            let (logits, stats) = model.forward(&data.tokens, data.batch, &cfg)?;
            Ok(SweepRow {
                p: e.p,
                length: e.length,
                mode: e.mode,
                accuracy: accuracy(&logits, &data.labels),
                mean_iters: stats.mean_iters(),
                residual: stats.final_residual,
                converged: stats.converged,
            })
        })
        .collect()
}

pub fn write_sweep(rows: &[SweepRow], json: &Path, csv: &Path) -> Result<(), AnalysisError> {
    std::fs::write(
        json,
        serde_json::to_string_pretty(rows).map_err(|e| AnalysisError::Config(e.to_string()))?,
    )?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(csv)?);
    writeln!(f, "p,length,mode,accuracy,mean_iters,residual,converged")?;
    for r in rows {
        let mode = match r.mode {
            SolveMode::Simultaneous => "simultaneous",
            SolveMode::Sequential => "sequential",
        };
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.p, r.length, mode, r.accuracy, r.mean_iters, r.residual, r.converged
        )?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

fn fixed_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces an output to a scalar with fixed random weights so every entry matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var, NumericsError> {
    if tape.value(y).len() == 1 {
        return Ok(y);
    }
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(fixed_weights(&shape, 99));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Case = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>>,
);

/// Finite-difference checks of every tape primitive and of one full
/// iteration-map application (both solve contexts) on a `d_model = 8` model.
pub fn grad_check_suite(seed: u64) -> Result<Vec<GradCheckEntry>, AnalysisError> {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let (a, b, m, nt, row) = (r(&[3, 4]), r(&[3, 4]), r(&[4, 5]), r(&[6, 4]), r(&[4]));
    let table = r(&[5, 3]);
    let (v, bm, st) = (r(&[6, 6]), r(&[6, 4]), r(&[6, 12]));
    let (xs, ys) = (r(&[6, 3]), r(&[4, 3]));
    let decay = r(&[12, 3]).map(|x| 0.55 + 0.4 * x);
    let (input, h0) = (r(&[12, 3]), r(&[3, 3]));
    let (q, k, vv, q1) = (r(&[6, 4]), r(&[6, 4]), r(&[6, 4]), r(&[2, 4]));
    let cases: Vec<Case> = vec![
        ("matmul", vec![a.clone(), m], Box::new(|t, x| t.matmul(x[0], x[1]))),
        ("matmul_nt", vec![a.clone(), nt], Box::new(|t, x| t.matmul_nt(x[0], x[1]))),
        ("add", vec![a.clone(), b.clone()], Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", vec![a.clone(), b], Box::new(|t, x| t.mul(x[0], x[1]))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, x| t.add_row(x[0], x[1]))),
        ("mul_row", vec![a.clone(), row.clone()], Box::new(|t, x| t.mul_row(x[0], x[1]))),
        ("scale", vec![a.clone()], Box::new(|t, x| t.scale(x[0], 0.37))),
        ("exp", vec![a.clone()], Box::new(|t, x| t.exp(x[0]))),
        ("softplus", vec![a.clone()], Box::new(|t, x| t.softplus(x[0]))),
        ("sigmoid", vec![a.clone()], Box::new(|t, x| t.sigmoid(x[0]))),
        ("silu", vec![a.clone()], Box::new(|t, x| t.silu(x[0]))),
        ("neg", vec![a.clone()], Box::new(|t, x| t.neg(x[0]))),
        ("sum", vec![a.clone()], Box::new(|t, x| t.sum(x[0]))),
        ("mean", vec![a.clone()], Box::new(|t, x| t.mean(x[0]))),
        (
            "rms_norm",
            vec![a.clone(), row.clone()],
            Box::new(|t, x| t.rms_norm(x[0], x[1], 1e-5)),
        ),
        ("rms_norm_soft", vec![a.clone(), row], Box::new(|t, x| t.rms_norm(x[0], x[1], 1.0))),
        ("slice_cols", vec![a.clone()], Box::new(|t, x| t.slice_cols(x[0], 1, 2))),
        ("expand_cols", vec![a.clone()], Box::new(|t, x| t.expand_cols(x[0], 3))),
        ("cross_entropy", vec![a], Box::new(|t, x| t.cross_entropy(x[0], &[3, 0, 2]))),
        ("embedding", vec![table], Box::new(|t, x| t.embedding(x[0], &[4, 1, 4, 0]))),
        ("head_outer", vec![v, bm.clone()], Box::new(|t, x| t.head_outer(x[0], x[1], 2))),
        ("head_contract", vec![st, bm], Box::new(|t, x| t.head_contract(x[0], x[1], 2))),
        ("shift_seq", vec![xs.clone()], Box::new(|t, x| t.shift_seq(x[0], 2))),
        ("concat_seq", vec![xs, ys], Box::new(|t, x| t.concat_seq(x[0], x[1], 2))),
        (
            "scan_sequential",
            vec![decay.clone(), input.clone(), h0.clone()],
            Box::new(|t, x| t.scan(x[0], x[1], Some(x[2]), 3, ScanMode::Sequential)),
        ),
        (
            "scan_parallel",
            vec![decay, input, h0],
            Box::new(|t, x| t.scan(x[0], x[1], Some(x[2]), 3, ScanMode::Parallel)),
        ),
        (
            "causal_attention",
            vec![q, k.clone(), vv.clone()],
            Box::new(|t, x| t.causal_attention(x[0], x[1], x[2], 2, 2, 0)),
        ),
        (
            "causal_attention_offset",
            vec![q1, k, vv],
            Box::new(|t, x| t.causal_attention(x[0], x[1], x[2], 2, 2, 2)),
        ),
    ];
    let mut out = Vec::new();
    for (name, inputs, f) in cases {
        let rep = grad_check(
            &inputs,
            |t, x| {
                let y = f(t, x)?;
                weighted_sum(t, y)
            },
            h,
            0,
        )?;
        out.push(GradCheckEntry {
            name: name.into(),
            max_rel_err: rep.max_rel_err,
            max_abs_err: rep.max_abs_err,
            checked: rep.checked,
        });
    }
    for (name, token_mode) in [("cell_step_full", false), ("cell_step_token", true)] {
        let rep = cell_step_check(seed, token_mode)?;
        out.push(GradCheckEntry {
            name: name.into(),
            max_rel_err: rep.max_rel_err,
            max_abs_err: rep.max_abs_err,
            checked: rep.checked,
        });
    }
    Ok(out)
}

/// Finite-difference step of the cell-step check. Richardson extrapolation
/// removes the `h^2` truncation term, so roundoff sets the accuracy here.
const CELL_STEP_H: f64 = 1e-4;

/// One application of the iteration map, differentiated with respect to every
/// parameter, the incoming iterate and (token mode) the carried state.
fn cell_step_check(seed: u64, token_mode: bool) -> Result<crate::numerics::GradCheckReport, AnalysisError> {
    let model = SequenceModel::<f64>::new(crate::model::ModelConfig::ssm(8, 2, 4, 2, 5), seed)?;
    let tokens = [1usize, 4, 0, 2, 3, 3];
    let batch = 2;
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut inputs: Vec<Tensor<f64>> = model.params().to_vec();
    let np = inputs.len();
    let rows = if token_mode { batch } else { tokens.len() };
    inputs.push(Tensor::from_fn(&[rows, cfg.d_model], |_| rng.random_range(-1.0..1.0)));
    if token_mode {
        inputs.push(Tensor::from_fn(&[batch, cfg.state_width()], |_| rng.random_range(-1.0..1.0)));
    }
    let step_tokens: Vec<usize> = if token_mode { vec![tokens[2], tokens[5]] } else { tokens.to_vec() };
    let usage = |e: ModelError| NumericsError::Usage(e.to_string());
    Ok(grad_check(
        &inputs,
        |tape, v| {
            let b = model.bind_with(tape, v[..np].to_vec(), &step_tokens, batch).map_err(usage)?;
            let carry: Vec<LayerCarry> = if token_mode { vec![LayerCarry::Ssm(v[np + 1])] } else { Vec::new() };
            let ctx = if token_mode {
                StepCtx::Token { pos: 2, carry: &carry }
            } else {
                StepCtx::Full
            };
            let (out, _) = b.apply(tape, b.inject, v[np], ctx).map_err(usage)?;
            weighted_sum(tape, out)
        },
        CELL_STEP_H,
        0,
    )?)
}
