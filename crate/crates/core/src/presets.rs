//! Whole-experiment configuration and the named presets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::SweepEntry;
use crate::dataset::{DistributionSpec, MonoidDescriptor, Sampler};
use crate::model::{ModelConfig, SequenceModel, Variant};
use crate::numerics::Scalar;
use crate::solver::{SolveMode, SolverConfig};
use crate::training::{GradientMode, LrSchedule, OptimConfig, PhantomConfig, Phase, TrainPlan};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Task distribution without its seed, which comes from the experiment root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub monoid: MonoidDescriptor,
    pub p: f64,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Test-time solver; its cap is usually well above the training cap.
    pub solver: SolverConfig,
    pub samples: usize,
    #[serde(default)]
    pub sweep: Vec<SweepEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed: model initialization and all data streams derive from it.
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainPlan,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn distribution(&self) -> DistributionSpec {
        DistributionSpec {
            monoid: self.data.monoid.clone(),
            p: self.data.p,
            length: self.data.length,
            seed: self.seed,
        }
    }

    pub fn sampler(&self) -> Result<Sampler, ConfigError> {
        Sampler::new(self.distribution()).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn build_model<T: Scalar>(&self) -> Result<SequenceModel<T>, ConfigError> {
        SequenceModel::new(self.model.clone(), self.seed).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.model.validate().map_err(|e| inv(e.to_string()))?;
        self.train.validate().map_err(|e| inv(e.to_string()))?;
        self.eval.solver.validate().map_err(|e| inv(e.to_string()))?;
        let sampler = self.sampler()?;
        if sampler.vocab_size() != self.model.vocab_size {
            return Err(inv(format!(
                "model.vocab_size is {} but the monoid has {} elements",
                self.model.vocab_size,
                sampler.vocab_size()
            )));
        }
        if self.train.seq_len != self.data.length {
            return Err(inv(format!(
                "train.seq_len {} differs from data.length {}",
                self.train.seq_len, self.data.length
            )));
        }
        if self.eval.samples == 0 {
            return Err(inv("eval.samples must be positive".into()));
        }
        Ok(())
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "parity-implicit",
    "parity-explicit",
    "s5-implicit",
    "mixed-a5-p0.02",
    "mixed-a5-p0.05",
    "mixed-a5-p0.1",
    "mixed-a5-p0.25",
    "mixed-a5-explicit",
    "mixed-a5-paper",
    "fig3-unrolled",
    "jacobian-fig10",
];

pub fn preset(name: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg = match name {
        "parity-implicit" => parity_implicit(),
        "parity-explicit" => parity_explicit(),
        "s5-implicit" => s5_implicit(),
        "mixed-a5-p0.02" => mixed_a5(0.02),
        "mixed-a5-p0.05" => mixed_a5(0.05),
        "mixed-a5-p0.1" => mixed_a5(0.1),
        "mixed-a5-p0.25" => mixed_a5(0.25),
        "mixed-a5-explicit" => mixed_a5_explicit(),
        "mixed-a5-paper" => mixed_a5_paper(),
        "fig3-unrolled" => fig3_unrolled(),
        "jacobian-fig10" => jacobian_fig10(),
        _ => return Err(ConfigError::UnknownPreset(name.to_string())),
    };
    Ok(cfg)
}

pub const PARITY_STEPS: usize = 3000;
pub const PARITY_FREE_STEPS: usize = 1000;

fn parity_model() -> ModelConfig {
    ModelConfig {
        read_previous: true,
        ..ModelConfig::ssm(32, 4, 8, 4, 2)
    }
}

fn eval_solver(max_iters: usize) -> SolverConfig {
    SolverConfig {
        tolerance: 0.01,
        max_iters,
        mode: SolveMode::Sequential,
        ..Default::default()
    }
}

fn sweep(p: f64, lengths: &[usize], modes: &[SolveMode]) -> Vec<SweepEntry> {
    lengths
        .iter()
        .flat_map(|&length| modes.iter().map(move |&mode| SweepEntry { p, length, mode }))
        .collect()
}

/// Bounded phase in simultaneous mode, free phase solved token by token.
pub fn parity_plan(total: usize, free: usize) -> TrainPlan {
    let mut plan = TrainPlan::two_phase(total, 4, 16, 4, 0.01);
    plan.phases[0].steps = total - free;
    plan.phases[1].steps = free;
    plan.phases[1].solver.mode = SolveMode::Sequential;
    plan.phases[1].lr_schedule = LrSchedule::SqrtCooldown { min_lr: 1e-5, start: 0.8 };
    plan.batch_size = 32;
    plan.seq_len = 64;
    plan.log_every = 10;
    plan
}

fn parity_implicit() -> ExperimentConfig {
    ExperimentConfig {
        seed: 0,
        precision: Precision::F32,
        model: parity_model(),
        data: DataConfig {
            monoid: MonoidDescriptor::parity(),
            p: 0.5,
            length: 64,
        },
        train: parity_plan(PARITY_STEPS, PARITY_FREE_STEPS),
        eval: EvalConfig {
            solver: eval_solver(64),
            samples: 256,
            sweep: sweep(0.5, &[64, 256], &[SolveMode::Sequential, SolveMode::Simultaneous]),
        },
    }
}

/// Explicit counterpart of an implicit config: same widths, with the state
/// size chosen so the parameter count is as close as possible.
pub fn matched_explicit(implicit: &ModelConfig) -> ModelConfig {
    let target = SequenceModel::<f32>::new(implicit.clone(), 0)
        .map(|m| m.num_parameters())
        .unwrap_or(0);
    let mut best = ModelConfig {
        variant: Variant::Explicit,
        ..implicit.clone()
    };
    let mut best_gap = usize::MAX;
    for n in 1..=4 * implicit.d_state.max(16) {
        let c = ModelConfig {
            variant: Variant::Explicit,
            d_state: n,
            ..implicit.clone()
        };
        if let Ok(m) = SequenceModel::<f32>::new(c.clone(), 0) {
            let gap = m.num_parameters().abs_diff(target);
            if gap < best_gap {
                best_gap = gap;
                best = c;
            }
        }
    }
    best
}

fn explicit_plan(steps: usize, batch: usize, len: usize) -> TrainPlan {
    TrainPlan {
        phases: vec![Phase {
            name: "explicit".into(),
            gradient_mode: GradientMode::Explicit,
            steps,
            solver: SolverConfig::default(),
            phantom: PhantomConfig { k: 1, lambda: 1.0 },
            unroll_steps: 16,
            lr_schedule: LrSchedule::SqrtCooldown { min_lr: 1e-5, start: 0.0 },
        }],
        optimizer: OptimConfig::default(),
        batch_size: batch,
        seq_len: len,
        log_every: 10,
    }
}

fn parity_explicit() -> ExperimentConfig {
    let base = parity_implicit();
    ExperimentConfig {
        model: matched_explicit(&base.model),
        train: explicit_plan(2000, 32, 64),
        ..base
    }
}

fn s5_implicit() -> ExperimentConfig {
    let mut plan = TrainPlan::two_phase(3000, 4, 16, 4, 0.01);
    plan.batch_size = 64;
    plan.seq_len = 32;
    plan.log_every = 10;
    ExperimentConfig {
        seed: 0,
        precision: Precision::F32,
        model: ModelConfig {
            read_previous: true,
            ..ModelConfig::ssm(64, 8, 8, 16, 120)
        },
        data: DataConfig {
            monoid: MonoidDescriptor::Symmetric { n: 5 },
            p: 0.5,
            length: 32,
        },
        train: plan,
        eval: EvalConfig {
            solver: eval_solver(128),
            samples: 256,
            sweep: sweep(0.5, &[32, 64, 128], &[SolveMode::Sequential]),
        },
    }
}

fn mixed_a5(p: f64) -> ExperimentConfig {
    let mut plan = TrainPlan::two_phase(5000, 4, 16, 4, 0.01);
    plan.batch_size = 64;
    plan.seq_len = 64;
    plan.log_every = 10;
    ExperimentConfig {
        seed: 0,
        precision: Precision::F32,
        model: ModelConfig {
            read_previous: true,
            ..ModelConfig::ssm(64, 8, 8, 16, 240)
        },
        data: DataConfig {
            monoid: MonoidDescriptor::reset3_a5(),
            p,
            length: 64,
        },
        train: plan,
        eval: EvalConfig {
            solver: eval_solver(128),
            samples: 256,
            sweep: sweep(0.5, &[64], &[SolveMode::Sequential, SolveMode::Simultaneous]),
        },
    }
}

fn mixed_a5_explicit() -> ExperimentConfig {
    let base = mixed_a5(0.1);
    ExperimentConfig {
        model: ModelConfig {
            variant: Variant::Explicit,
            n_layers: 8,
            ..base.model.clone()
        },
        train: explicit_plan(5000, 64, 64),
        ..base
    }
}

fn mixed_a5_paper() -> ExperimentConfig {
    let mut cfg = mixed_a5(0.1);
    cfg.data.length = 256;
    cfg.train.seq_len = 256;
    cfg.train.batch_size = 512;
    cfg.eval.sweep = sweep(0.5, &[256], &[SolveMode::Simultaneous]);
    cfg
}

fn fig3_unrolled() -> ExperimentConfig {
    let mut cfg = mixed_a5(0.1);
    let steps = cfg.train.total_steps();
    cfg.train.phases = vec![Phase {
        name: "unrolled".into(),
        gradient_mode: GradientMode::Unrolled,
        steps,
        solver: SolverConfig {
            max_iters: 16,
            early_stop: false,
            ..Default::default()
        },
        phantom: PhantomConfig { k: 1, lambda: 1.0 },
        unroll_steps: 16,
        lr_schedule: LrSchedule::SqrtCooldown { min_lr: 1e-5, start: 0.0 },
    }];
    cfg
}

fn jacobian_fig10() -> ExperimentConfig {
    let mut model = ModelConfig::ssm(64, 16, 8, 4, 2);
    model.expand = 2;
    model.z_gain = 0.2;
    let mut plan = TrainPlan::two_phase(300, 4, 16, 4, 0.01);
    plan.batch_size = 16;
    plan.seq_len = 16;
    plan.log_every = 10;
    ExperimentConfig {
        seed: 0,
        precision: Precision::F64,
        model,
        data: DataConfig {
            monoid: MonoidDescriptor::parity(),
            p: 0.5,
            length: 16,
        },
        train: plan,
        eval: EvalConfig {
            solver: SolverConfig {
                tolerance: 1e-4,
                max_iters: 1000,
                mode: SolveMode::Sequential,
                ..Default::default()
            },
            samples: 16,
            sweep: Vec::new(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let json = serde_json::to_string(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn unknown_preset() {
        assert!(matches!(preset("nope"), Err(ConfigError::UnknownPreset(_))));
    }

    #[test]
    fn explicit_parity_matches_parameter_count() {
        let imp = SequenceModel::<f32>::new(parity_model(), 0).unwrap().num_parameters();
        let exp = SequenceModel::<f32>::new(matched_explicit(&parity_model()), 0)
            .unwrap()
            .num_parameters();
        assert!((imp as f64 - exp as f64).abs() / (imp as f64) < 0.05, "{imp} vs {exp}");
    }

    #[test]
    fn mixed_sweep_entries() {
        let names = ["mixed-a5-p0.02", "mixed-a5-p0.05", "mixed-a5-p0.1", "mixed-a5-p0.25"];
        let ps: Vec<f64> = names.iter().map(|n| preset(n).unwrap().data.p).collect();
        assert_eq!(ps, vec![0.02, 0.05, 0.1, 0.25]);
        for n in names {
            assert!(preset(n).unwrap().eval.sweep.iter().all(|e| e.p == 0.5));
        }
    }
}
