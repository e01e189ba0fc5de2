//! Explicit SSM baseline and the weight-tied implicit backbones.
//!
//! The implicit iteration map `F(z; x)` is a stack of `n_layers` blocks. Every
//! block reads `rmsnorm(z)` and receives the input through a shared injection
//! projection added after its own projection. The first block's output replaces
//! the iterate; later blocks add to it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Scalar, ScanMode, Tape, Tensor, Var};
use crate::solver::{solve_fixed_point, FixedPoint, RunStats, SolveMode, SolverConfig};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("token {token} out of vocabulary {vocab}")]
    Token { token: usize, vocab: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Ssm,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Implicit,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub backbone: Backbone,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_state: usize,
    pub vocab_size: usize,
    /// Inner width multiplier: `n_heads · d_head = expand · d_model`.
    #[serde(default = "one")]
    pub expand: usize,
    #[serde(default)]
    pub tied_readout: bool,
    /// Standard deviation multiplier of the projection reading the iterate.
    #[serde(default = "default_z_gain")]
    pub z_gain: f64,
    /// Epsilon of the implicit blocks' norm on the iterate. Values near one
    /// bound its derivative by one, which keeps the map contractive.
    #[serde(default = "default_z_norm_eps")]
    pub z_norm_eps: f64,
    /// Gated RMS norm on the SSM output before the output projection.
    #[serde(default = "yes")]
    pub out_norm: bool,
    /// Epsilon of that norm. A hard norm rescales near-zero outputs to unit
    /// size, so a sign change of a tiny output flips the whole iterate.
    #[serde(default = "default_out_norm_eps")]
    pub out_norm_eps: f64,
    /// Range of the initial step size Δ, sampled log-uniformly per head.
    #[serde(default = "default_dt_init")]
    pub dt_init: [f64; 2],
    /// Implicit blocks read the state from before the token's update, so the
    /// iterate does not feed back into itself through the state.
    #[serde(default)]
    pub read_previous: bool,
    #[serde(default)]
    pub scan_mode: ScanMode,
}

fn default_z_norm_eps() -> f64 {
    1.0
}

fn default_out_norm_eps() -> f64 {
    1.0
}

fn default_dt_init() -> [f64; 2] {
    [1e-3, 0.1]
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

fn default_z_gain() -> f64 {
    0.5
}

impl ModelConfig {
    pub fn ssm(d_model: usize, n_heads: usize, d_head: usize, d_state: usize, vocab_size: usize) -> Self {
        Self {
            variant: Variant::Implicit,
            backbone: Backbone::Ssm,
            d_model,
            n_layers: 1,
            n_heads,
            d_head,
            d_state,
            vocab_size,
            expand: 1,
            tied_readout: false,
            z_gain: default_z_gain(),
            z_norm_eps: default_z_norm_eps(),
            out_norm: true,
            out_norm_eps: default_out_norm_eps(),
            read_previous: false,
            dt_init: default_dt_init(),
            scan_mode: ScanMode::Parallel,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.vocab_size == 0 {
            return err("dimensions must be positive".into());
        }
        if self.backbone == Backbone::Ssm && self.d_state == 0 {
            return err("d_state must be positive".into());
        }
        if self.n_heads * self.d_head != self.expand * self.d_model {
            return err(format!(
                "n_heads * d_head = {} but expand * d_model = {}",
                self.n_heads * self.d_head,
                self.expand * self.d_model
            ));
        }
        if self.backbone == Backbone::Attention && (self.expand != 1 || self.variant == Variant::Explicit) {
            return err("attention backbone is implicit-only with expand = 1".into());
        }
        if !(self.out_norm_eps > 0.0) {
            return err(format!("out_norm_eps must be positive, got {}", self.out_norm_eps));
        }
        if !(self.z_norm_eps > 0.0) {
            return err(format!("z_norm_eps must be positive, got {}", self.z_norm_eps));
        }
        if !(self.dt_init[0] > 0.0 && self.dt_init[0] < self.dt_init[1]) {
            return err(format!("dt_init must be an increasing positive range, got {:?}", self.dt_init));
        }
        if !(self.z_gain >= 0.0) {
            return err(format!("z_gain must be non-negative, got {}", self.z_gain));
        }
        Ok(())
    }

    fn inner(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Width of one SSM block projection: value, gate, Δ, B, C.
    fn ssm_proj_width(&self) -> usize {
        2 * self.inner() + self.n_heads + 2 * self.n_heads * self.d_state
    }

    /// Recurrent state channels per token and layer.
    pub fn state_width(&self) -> usize {
        self.inner() * self.d_state
    }
}

/// Carried tensors of every layer, outer index over layers.
pub type LayerStates<T> = Vec<Vec<Tensor<T>>>;

#[derive(Clone, Debug, PartialEq)]
enum LayerIdx {
    Ssm {
        norm: usize,
        w: usize,
        dt_bias: usize,
        a: usize,
        d_skip: usize,
        out_norm: Option<usize>,
        w_o: usize,
    },
    Attn {
        norm1: usize,
        w_qkv: usize,
        w_o: usize,
        norm2: usize,
        w1: usize,
        w2: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embed: usize,
    inject: Option<usize>,
    layers: Vec<LayerIdx>,
    final_norm: usize,
    readout: Option<usize>,
}

/// Parameters plus config for either variant and backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let d = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::lit(d.sample(&mut self.rng)))
    }

    fn uniform_map<T: Scalar>(&mut self, n: usize, lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> Tensor<T> {
        let d = Uniform::new(lo, hi).expect("valid range");
        Tensor::from_fn(&[n], |_| T::lit(f(d.sample(&mut self.rng))))
    }
}

fn inv_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

/// Carried state of one layer between tokens.
#[derive(Clone, Copy, Debug)]
pub enum LayerCarry {
    /// Recurrent state `[batch, state_width]`.
    Ssm(Var),
    /// Keys and values `[batch·t, d_model]` of the tokens processed so far.
    Attn { k: Var, v: Var },
}

/// Which rows an application of the iteration map covers.
#[derive(Clone, Copy, Debug)]
pub enum StepCtx<'a> {
    /// Whole sequences: rows are `batch × len`, states flow through the scan.
    Full,
    /// One token per sequence at position `pos`, reading the carried state.
    Token { pos: usize, carry: &'a [LayerCarry] },
}

/// Model parameters bound to a tape together with the embedded input.
pub struct Bound<'m, T> {
    model: &'m SequenceModel<T>,
    pub params: Vec<Var>,
    pub x: Var,
    pub inject: Option<Var>,
    pub batch: usize,
    pub len: usize,
}

/// Converged quantities handed from one token to the next.
#[derive(Clone, Debug)]
pub struct SequentialState<T> {
    /// Per layer: state `[batch, S]` for SSM layers, or stacked keys then values for attention.
    pub carry: LayerStates<T>,
    pub batch: usize,
    pub position: usize,
}

impl<T: Scalar> SequentialState<T> {
    pub fn empty(config: &ModelConfig, batch: usize) -> Self {
        let carry = (0..config.n_layers)
            .map(|_| match config.backbone {
                Backbone::Ssm => vec![Tensor::zeros(&[batch, config.state_width()])],
                Backbone::Attention => vec![Tensor::zeros(&[0, config.d_model]), Tensor::zeros(&[0, config.d_model])],
            })
            .collect();
        Self { carry, batch, position: 0 }
    }
}

/// Output of an implicit solve over a batch.
#[derive(Clone, Debug)]
pub struct Solution<T> {
    /// Fixed-point iterate `[batch·len, d_model]`.
    pub z: Tensor<T>,
    pub stats: RunStats,
}

impl<T: Scalar> SequenceModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, t: Tensor<T>| {
            names.push(name);
            params.push(t);
            params.len() - 1
        };
        let d = config.d_model;
        let df = d as f64;
        let implicit = config.variant == Variant::Implicit;
        let embed = add("embed".into(), init.normal(&[config.vocab_size, d], 1.0));
        let mut layers = Vec::new();
        let inject;
        match config.backbone {
            Backbone::Ssm => {
                let pw = config.ssm_proj_width();
                inject = implicit.then(|| add("inject".into(), init.normal(&[d, pw], 1.0 / df.sqrt())));
                for l in 0..config.n_layers {
                    let w_std = if implicit { config.z_gain / df.sqrt() } else { 1.0 / df.sqrt() };
                    layers.push(LayerIdx::Ssm {
                        norm: add(format!("layers.{l}.norm"), Tensor::full(&[d], T::one())),
                        w: add(format!("layers.{l}.w"), init.normal(&[d, pw], w_std)),
                        dt_bias: add(
                            format!("layers.{l}.dt_bias"),
                            init.uniform_map(config.n_heads, config.dt_init[0].ln(), config.dt_init[1].ln(), |u| {
                                inv_softplus(u.exp())
                            }),
                        ),
                        a: add(format!("layers.{l}.a"), init.uniform_map(config.n_heads, 0.5, 4.0, inv_softplus)),
                        d_skip: add(format!("layers.{l}.d_skip"), Tensor::full(&[config.inner()], T::one())),
                        out_norm: config
                            .out_norm
                            .then(|| add(format!("layers.{l}.out_norm"), Tensor::full(&[config.inner()], T::one()))),
                        w_o: add(
                            format!("layers.{l}.w_o"),
                            init.normal(&[config.inner(), d], 1.0 / (config.inner() as f64).sqrt()),
                        ),
                    });
                }
            }
            Backbone::Attention => {
                inject = Some(add("inject".into(), init.normal(&[d, 3 * d], 1.0 / df.sqrt())));
                for l in 0..config.n_layers {
                    layers.push(LayerIdx::Attn {
                        norm1: add(format!("layers.{l}.norm1"), Tensor::full(&[d], T::one())),
                        w_qkv: add(format!("layers.{l}.w_qkv"), init.normal(&[d, 3 * d], config.z_gain / df.sqrt())),
                        w_o: add(format!("layers.{l}.w_o"), init.normal(&[d, d], 1.0 / df.sqrt())),
                        norm2: add(format!("layers.{l}.norm2"), Tensor::full(&[d], T::one())),
                        w1: add(format!("layers.{l}.w1"), init.normal(&[d, 4 * d], 1.0 / df.sqrt())),
                        w2: add(format!("layers.{l}.w2"), init.normal(&[4 * d, d], 0.5 / df.sqrt())),
                    });
                }
            }
        }
        let final_norm = add("final_norm".into(), Tensor::full(&[d], T::one()));
        let readout = (!config.tied_readout).then(|| add("readout".into(), init.normal(&[d, config.vocab_size], 1.0 / df.sqrt())));
        Ok(Self {
            config,
            names,
            params,
            layout: Layout {
                embed,
                inject,
                layers,
                final_norm,
                readout,
            },
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, got {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = model
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| ModelError::Config(format!("unexpected tensor {name}")))?;
            if t.shape() != model.params[i].shape() {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params[i].shape()
                )));
            }
            model.params[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> SequenceModel<U> {
        SequenceModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    fn check_tokens(&self, tokens: &[usize], batch: usize) -> Result<usize, ModelError> {
        if batch == 0 || !tokens.len().is_multiple_of(batch) {
            return Err(ModelError::Config(format!(
                "{} tokens do not split into {batch} sequences",
                tokens.len()
            )));
        }
        let vocab = self.config.vocab_size;
        if let Some(&token) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(ModelError::Token { token, vocab });
        }
        Ok(tokens.len() / batch)
    }

    /// Puts the parameters on `tape` and embeds `tokens`.
    pub fn bind(&self, tape: &mut Tape<T>, tokens: &[usize], batch: usize, trainable: bool) -> Result<Bound<'_, T>, ModelError> {
        let params = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        self.bind_with(tape, params, tokens, batch)
    }

    /// Like [`SequenceModel::bind`] with caller-provided parameter variables.
    pub fn bind_with(&self, tape: &mut Tape<T>, params: Vec<Var>, tokens: &[usize], batch: usize) -> Result<Bound<'_, T>, ModelError> {
        let len = self.check_tokens(tokens, batch)?;
        if params.len() != self.params.len() {
            return Err(ModelError::Config("parameter count mismatch".into()));
        }
        let x = tape.embedding(params[self.layout.embed], tokens)?;
        let inject = match self.layout.inject {
            Some(i) => Some(tape.matmul(x, params[i])?),
            None => None,
        };
        Ok(Bound {
            model: self,
            params,
            x,
            inject,
            batch,
            len,
        })
    }

    /// Logits of the explicit depth-stacked SSM, `[batch·len, vocab]`.
    pub fn explicit_forward(&self, tokens: &[usize], batch: usize) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, tokens, batch, false)?;
        let out = b.explicit_logits(&mut tape)?;
        Ok(tape.value(out).clone())
    }

    /// Simultaneous solve: every iteration updates all positions at once.
    pub fn solve_simultaneous(&self, tokens: &[usize], batch: usize, cfg: &SolverConfig) -> Result<Solution<T>, ModelError> {
        cfg.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, tokens, batch, false)?;
        let inject = b.inject;
        let mark = tape.mark();
        let z0 = Tensor::zeros(&[tokens.len(), self.config.d_model]);
        let fp: FixedPoint<T, ()> = solve_fixed_point(
            |z| -> Result<_, ModelError> {
                tape.truncate(mark);
                let zv = tape.constant(z.clone());
                let (out, _) = b.apply(&mut tape, inject, zv, StepCtx::Full)?;
                Ok((tape.value(out).clone(), ()))
            },
            z0,
            cfg,
        )?;
        Ok(Solution { z: fp.z, stats: fp.stats })
    }

    /// Sequential solve: converge each position before moving on, carrying only converged state.
    pub fn solve_sequential(
        &self,
        tokens: &[usize],
        batch: usize,
        cfg: &SolverConfig,
        state: Option<SequentialState<T>>,
    ) -> Result<(Solution<T>, SequentialState<T>), ModelError> {
        cfg.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        let d = self.config.d_model;
        let mut state = state.unwrap_or_else(|| SequentialState::empty(&self.config, batch));
        if state.batch != batch {
            return Err(ModelError::Config(format!("state batch {} vs {batch}", state.batch)));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, tokens, batch, false)?;
        let len = b.len;
        let inject_full = b.inject.map(|v| tape.value(v).clone());
        let base = tape.mark();
        let mut z_all = vec![T::zero(); tokens.len() * d];
        let mut per_token = Vec::with_capacity(len);
        for t in 0..len {
            tape.truncate(base);
            let rows: Vec<usize> = (0..batch).map(|s| s * len + t).collect();
            let inj = inject_full.as_ref().map(|i| tape.constant(i.select_rows(&rows)));
            let carry: Vec<LayerCarry> = state
                .carry
                .iter()
                .map(|c| match self.config.backbone {
                    Backbone::Ssm => LayerCarry::Ssm(tape.constant(c[0].clone())),
                    Backbone::Attention => LayerCarry::Attn {
                        k: tape.constant(c[0].clone()),
                        v: tape.constant(c[1].clone()),
                    },
                })
                .collect();
            let mark = tape.mark();
            let pos = state.position;
            let fp = solve_fixed_point(
                |z| -> Result<_, ModelError> {
                    tape.truncate(mark);
                    let zv = tape.constant(z.clone());
                    let (out, new_carry) = b.apply(&mut tape, inj, zv, StepCtx::Token { pos, carry: &carry })?;
                    let carried: Vec<Vec<Tensor<T>>> = new_carry
                        .iter()
                        .map(|c| match c {
                            LayerCarry::Ssm(h) => vec![tape.value(*h).clone()],
                            LayerCarry::Attn { k, v } => vec![tape.value(*k).clone(), tape.value(*v).clone()],
                        })
                        .collect();
                    Ok((tape.value(out).clone(), carried))
                },
                Tensor::zeros(&[batch, d]),
                cfg,
            )?;
            for (s, row) in fp.z.data().chunks(d).enumerate() {
                z_all[(s * len + t) * d..(s * len + t + 1) * d].copy_from_slice(row);
            }
            if let Some(carried) = fp.aux {
                for (layer, c) in state.carry.iter_mut().zip(carried) {
                    match self.config.backbone {
                        Backbone::Ssm => layer[0] = c[0].clone(),
                        Backbone::Attention => {
                            for j in 0..2 {
                                layer[j] = append_per_sequence(&layer[j], &c[j], batch);
                            }
                        }
                    }
                }
            }
            state.position += 1;
            let failed = fp.stats.status == crate::solver::SolveStatus::NumericFailure;
            per_token.push(fp.stats);
            if failed {
                break;
            }
        }
        let stats = RunStats::merge_tokens(&per_token);
        Ok((
            Solution {
                z: Tensor::matrix(tokens.len(), d, z_all)?,
                stats,
            },
            state,
        ))
    }

    /// Solve in the configured mode from a zero state.
    pub fn solve(&self, tokens: &[usize], batch: usize, cfg: &SolverConfig) -> Result<Solution<T>, ModelError> {
        match cfg.mode {
            SolveMode::Simultaneous => self.solve_simultaneous(tokens, batch, cfg),
            SolveMode::Sequential => Ok(self.solve_sequential(tokens, batch, cfg, None)?.0),
        }
    }

    /// Logits read from an iterate `z`.
    pub fn logits_from(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let zv = tape.constant(z.clone());
        let out = readout(self, &mut tape, &params, zv)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward_simultaneous(&self, tokens: &[usize], batch: usize, cfg: &SolverConfig) -> Result<(Tensor<T>, RunStats), ModelError> {
        let sol = self.solve_simultaneous(tokens, batch, cfg)?;
        Ok((self.logits_from(&sol.z)?, sol.stats))
    }

    pub fn forward_sequential(
        &self,
        tokens: &[usize],
        batch: usize,
        cfg: &SolverConfig,
        state: Option<SequentialState<T>>,
    ) -> Result<(Tensor<T>, RunStats, SequentialState<T>), ModelError> {
        let (sol, state) = self.solve_sequential(tokens, batch, cfg, state)?;
        Ok((self.logits_from(&sol.z)?, sol.stats, state))
    }

    /// Logits for either variant; implicit models use `cfg`.
    pub fn forward(&self, tokens: &[usize], batch: usize, cfg: &SolverConfig) -> Result<(Tensor<T>, RunStats), ModelError> {
        match self.config.variant {
            Variant::Explicit => Ok((
                self.explicit_forward(tokens, batch)?,
                RunStats {
                    iterations: 0,
                    final_residual: 0.0,
                    converged: true,
                    status: crate::solver::SolveStatus::Converged,
                    per_token_histogram: Vec::new(),
                },
            )),
            Variant::Implicit => match cfg.mode {
                SolveMode::Simultaneous => self.forward_simultaneous(tokens, batch, cfg),
                SolveMode::Sequential => {
                    let (l, s, _) = self.forward_sequential(tokens, batch, cfg, None)?;
                    Ok((l, s))
                }
            },
        }
    }

    /// One application of the iteration map on plain tensors.
    ///
    /// With `carry = None` the rows are whole sequences and states start from zero.
    /// With `Some(h)` there is one token per sequence at `pos`, reading state `h`.
    /// Returns the new per-layer carry and the next iterate.
    pub fn cell_step(
        &self,
        z_prev: &Tensor<T>,
        tokens: &[usize],
        batch: usize,
        carry: Option<(&SequentialState<T>, usize)>,
    ) -> Result<(LayerStates<T>, Tensor<T>), ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, tokens, batch, false)?;
        let zv = tape.constant(z_prev.clone());
        let carry_vars: Vec<LayerCarry>;
        let ctx = match carry {
            None => StepCtx::Full,
            Some((state, pos)) => {
                carry_vars = state
                    .carry
                    .iter()
                    .map(|c| match self.config.backbone {
                        Backbone::Ssm => LayerCarry::Ssm(tape.constant(c[0].clone())),
                        Backbone::Attention => LayerCarry::Attn {
                            k: tape.constant(c[0].clone()),
                            v: tape.constant(c[1].clone()),
                        },
                    })
                    .collect();
                StepCtx::Token { pos, carry: &carry_vars }
            }
        };
        let (out, new_carry) = b.apply(&mut tape, b.inject, zv, ctx)?;
        let carried = new_carry
            .iter()
            .map(|c| match c {
                LayerCarry::Ssm(h) => vec![tape.value(*h).clone()],
                LayerCarry::Attn { k, v } => vec![tape.value(*k).clone(), tape.value(*v).clone()],
            })
            .collect();
        Ok((carried, tape.value(out).clone()))
    }
}

fn append_per_sequence<T: Scalar>(cache: &Tensor<T>, new: &Tensor<T>, batch: usize) -> Tensor<T> {
    let c = new.cols();
    let old_len = cache.rows() / batch;
    let add = new.rows() / batch;
    let mut data = Vec::with_capacity((cache.rows() + new.rows()) * c);
    for s in 0..batch {
        data.extend_from_slice(&cache.data()[s * old_len * c..(s + 1) * old_len * c]);
        data.extend_from_slice(&new.data()[s * add * c..(s + 1) * add * c]);
    }
    Tensor::matrix(cache.rows() + new.rows(), c, data).expect("cache shape")
}

fn readout<T: Scalar>(model: &SequenceModel<T>, tape: &mut Tape<T>, p: &[Var], z: Var) -> Result<Var, ModelError> {
    let n = tape.rms_norm(z, p[model.layout.final_norm], T::lit(NORM_EPS))?;
    Ok(match model.layout.readout {
        Some(r) => tape.matmul(n, p[r])?,
        None => tape.matmul_nt(n, p[model.layout.embed])?,
    })
}

/// SSM block pieces exposed for Jacobian analysis.
pub struct SsmParts {
    /// Per-channel decay `[rows, S]`.
    pub decay: Var,
    /// Per-channel input `[rows, S]`.
    pub input: Var,
    pub states: Var,
    pub out: Var,
}

impl<'m, T: Scalar> Bound<'m, T> {
    pub fn model(&self) -> &'m SequenceModel<T> {
        self.model
    }

    fn block_eps(&self) -> T {
        match self.model.config.variant {
            Variant::Implicit => T::lit(self.model.config.z_norm_eps),
            Variant::Explicit => T::lit(NORM_EPS),
        }
    }

    /// Next iterate `F(z)` and the per-layer carry produced along the way.
    pub fn apply(&self, tape: &mut Tape<T>, inject: Option<Var>, z: Var, ctx: StepCtx<'_>) -> Result<(Var, Vec<LayerCarry>), ModelError> {
        let mut cur = z;
        let mut carries = Vec::with_capacity(self.model.layout.layers.len());
        for (l, layer) in self.model.layout.layers.iter().enumerate() {
            let (out, carry) = match layer {
                LayerIdx::Ssm { .. } => {
                    let parts = self.ssm_block(tape, l, cur, inject, ctx, self.model.config.read_previous)?;
                    (parts.out, LayerCarry::Ssm(parts.states))
                }
                LayerIdx::Attn { .. } => self.attn_block(tape, l, cur, inject, ctx)?,
            };
            cur = if l == 0 { out } else { tape.add(cur, out)? };
            carries.push(carry);
        }
        Ok((cur, carries))
    }

    /// Logits read from iterate `z`.
    pub fn logits(&self, tape: &mut Tape<T>, z: Var) -> Result<Var, ModelError> {
        readout(self.model, tape, &self.params, z)
    }

    /// Explicit model: residual stack from the embedding, readout from `h_{t-1}`.
    pub fn explicit_logits(&self, tape: &mut Tape<T>) -> Result<Var, ModelError> {
        let mut r = self.x;
        for l in 0..self.model.layout.layers.len() {
            let parts = self.ssm_block(tape, l, r, None, StepCtx::Full, true)?;
            r = tape.add(r, parts.out)?;
        }
        self.logits(tape, r)
    }

    /// One SSM block on `input`; `inject` is added to its projection.
    pub fn ssm_block(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        input: Var,
        inject: Option<Var>,
        ctx: StepCtx<'_>,
        read_previous: bool,
    ) -> Result<SsmParts, ModelError> {
        let LayerIdx::Ssm {
            norm,
            w,
            dt_bias,
            a,
            d_skip,
            out_norm,
            w_o,
        } = self.model.layout.layers[layer]
        else {
            return Err(ModelError::Config(format!("layer {layer} is not an SSM block")));
        };
        let cfg = &self.model.config;
        let p = &self.params;
        let (h, hp, n) = (cfg.n_heads, cfg.inner(), cfg.d_state);
        let q = tape.rms_norm(input, p[norm], self.block_eps())?;
        let mut proj = tape.matmul(q, p[w])?;
        if let Some(inj) = inject {
            proj = tape.add(proj, inj)?;
        }
        let v = tape.slice_cols(proj, 0, hp)?;
        let gate = tape.slice_cols(proj, hp, hp)?;
        let dt_raw = tape.slice_cols(proj, 2 * hp, h)?;
        let bm = tape.slice_cols(proj, 2 * hp + h, h * n)?;
        let cm = tape.slice_cols(proj, 2 * hp + h + h * n, h * n)?;
        let dt_pre = tape.add_row(dt_raw, p[dt_bias])?;
        let dt = tape.softplus(dt_pre)?;
        let rate = tape.softplus(p[a])?;
        let log_decay = tape.mul_row(dt, rate)?;
        let neg = tape.neg(log_decay)?;
        let decay_h = tape.exp(neg)?;
        let dt_wide = tape.expand_cols(dt, cfg.d_head)?;
        let dv = tape.mul(dt_wide, v)?;
        let input_s = tape.head_outer(dv, bm, h)?;
        let decay = tape.expand_cols(decay_h, cfg.d_head * n)?;
        debug_assert!(tape.value(decay).data().iter().all(|&l| l > T::zero() && l <= T::one()));
        let (states, read) = match ctx {
            StepCtx::Full => {
                let states = tape.scan(decay, input_s, None, self.batch, cfg.scan_mode)?;
                let read = if read_previous {
                    tape.shift_seq(states, self.batch)?
                } else {
                    states
                };
                (states, read)
            }
            StepCtx::Token { carry, .. } => {
                let LayerCarry::Ssm(h_prev) = carry[layer] else {
                    return Err(ModelError::Config("SSM layer needs a state carry".into()));
                };
                let states = tape.scan(decay, input_s, Some(h_prev), self.batch, cfg.scan_mode)?;
                (states, if read_previous { h_prev } else { states })
            }
        };
        let y = tape.head_contract(read, cm, h)?;
        let skip = tape.mul_row(v, p[d_skip])?;
        let y = tape.add(y, skip)?;
        let g = tape.silu(gate)?;
        let mut yg = tape.mul(y, g)?;
        if let Some(gain) = out_norm {
            yg = tape.rms_norm(yg, p[gain], T::lit(cfg.out_norm_eps))?;
        }
        let out = tape.matmul(yg, p[w_o])?;
        Ok(SsmParts {
            decay,
            input: input_s,
            states,
            out,
        })
    }

    fn attn_block(
        &self,
        tape: &mut Tape<T>,
        layer: usize,
        input: Var,
        inject: Option<Var>,
        ctx: StepCtx<'_>,
    ) -> Result<(Var, LayerCarry), ModelError> {
        let LayerIdx::Attn {
            norm1,
            w_qkv,
            w_o,
            norm2,
            w1,
            w2,
        } = self.model.layout.layers[layer]
        else {
            return Err(ModelError::Config(format!("layer {layer} is not an attention block")));
        };
        let d = self.model.config.d_model;
        let heads = self.model.config.n_heads;
        let p = &self.params;
        let q_in = tape.rms_norm(input, p[norm1], self.block_eps())?;
        let mut qkv = tape.matmul(q_in, p[w_qkv])?;
        if let Some(inj) = inject {
            qkv = tape.add(qkv, inj)?;
        }
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let att = match ctx {
            StepCtx::Full => tape.causal_attention(q, k, v, heads, self.batch, 0)?,
            StepCtx::Token { pos, carry } => {
                let LayerCarry::Attn { k: kc, v: vc } = carry[layer] else {
                    return Err(ModelError::Config("attention layer needs a cache".into()));
                };
                let kk = tape.concat_seq(kc, k, self.batch)?;
                let vv = tape.concat_seq(vc, v, self.batch)?;
                tape.causal_attention(q, kk, vv, heads, self.batch, pos)?
            }
        };
        let a = tape.matmul(att, p[w_o])?;
        let n2 = tape.rms_norm(a, p[norm2], T::lit(NORM_EPS))?;
        let hdn = tape.matmul(n2, p[w1])?;
        let act = tape.silu(hdn)?;
        let ff = tape.matmul(act, p[w2])?;
        let out = tape.add(a, ff)?;
        Ok((out, LayerCarry::Attn { k, v }))
    }
}

pub type Model32 = SequenceModel<f32>;
pub type Model64 = SequenceModel<f64>;
