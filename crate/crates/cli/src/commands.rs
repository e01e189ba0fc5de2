use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use implicit_seq_core::analysis::{self, JacobianReport};
use implicit_seq_core::checkpoint::{self, Checkpoint};
use implicit_seq_core::dataset;
use implicit_seq_core::model::SequenceModel;
use implicit_seq_core::numerics::{scan_parallel, scan_sequential, ScanElement};
use implicit_seq_core::presets::{ExperimentConfig, Precision, PRESET_NAMES};
use implicit_seq_core::training::{final_checkpoint, run_curriculum, RunOutput};
use implicit_seq_core::Scalar;
use serde::Serialize;
use serde_json::json;

use crate::overrides::resolve;
use crate::{Cli, Command, Global};

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Presets => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
            Ok(())
        }
        Command::ShowConfig { overrides } => {
            let cfg = config(&g, &overrides)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
        Command::GenData { samples, overrides } => {
            let cfg = config(&g, &overrides)?;
            prepare(&g.out, &cfg)?;
            gen_data(&g.out, &cfg, samples)
        }
        Command::Train {
            gradient_mode,
            resume,
            overrides,
        } => {
            let mut cfg = config(&g, &overrides)?;
            if let Some(m) = gradient_mode {
                for p in &mut cfg.train.phases {
                    p.gradient_mode = m.into();
                }
                cfg.validate()?;
            }
            prepare(&g.out, &cfg)?;
            let resume = resume.map(|p| checkpoint::load(&p)).transpose()?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&g.out, &cfg, resume.as_ref()),
                Precision::F64 => train::<f64>(&g.out, &cfg, resume.as_ref()),
            }
        }
        Command::Eval { checkpoint, overrides } => {
            let cfg = config(&g, &overrides)?;
            prepare(&g.out, &cfg)?;
            let ck = load_matching(&checkpoint, &cfg)?;
            match cfg.precision {
                Precision::F32 => eval(&g.out, &cfg, &ck.model::<f32>()?),
                Precision::F64 => eval(&g.out, &cfg, &ck.model::<f64>()?),
            }
        }
        Command::JacobianCheck {
            checkpoint,
            seeds,
            prefix,
            overrides,
        } => {
            let g = with_default_preset(g, "jacobian-fig10");
            let cfg = config(&g, &overrides)?;
            prepare(&g.out, &cfg)?;
            jacobian(&g.out, &cfg, checkpoint.as_deref(), seeds, prefix)
        }
        Command::DualityCheck { checkpoint, overrides } => {
            let cfg = config(&g, &overrides)?;
            prepare(&g.out, &cfg)?;
            let ck = load_matching(&checkpoint, &cfg)?;
            match cfg.precision {
                Precision::F32 => duality(&g.out, &cfg, &ck.model::<f32>()?),
                Precision::F64 => duality(&g.out, &cfg, &ck.model::<f64>()?),
            }
        }
        Command::ScanBench {
            min_log2,
            max_log2,
            channels,
            reps,
        } => {
            if min_log2 > max_log2 || max_log2 > 26 || channels == 0 || reps == 0 {
                bail!("need min_log2 <= max_log2 <= 26 and positive channels and reps");
            }
            let resolved = json!({
                "command": "scan-bench",
                "min_log2": min_log2,
                "max_log2": max_log2,
                "channels": channels,
                "reps": reps,
                "threads": rayon::current_num_threads(),
                "precision": g.precision.map(Precision::from).unwrap_or_default(),
            });
            write_resolved(&g.out, &resolved)?;
            match g.precision.map(Precision::from).unwrap_or_default() {
                Precision::F32 => scan_bench::<f32>(&g.out, min_log2, max_log2, channels, reps),
                Precision::F64 => scan_bench::<f64>(&g.out, min_log2, max_log2, channels, reps),
            }
        }
        Command::GradCheck { seed } => {
            write_resolved(&g.out, &json!({"command": "grad-check", "seed": seed, "precision": "f64"}))?;
            grad_check(&g.out, seed)
        }
    }
}

fn with_default_preset(mut g: Global, name: &str) -> Global {
    if g.config.is_none() && g.preset.is_none() {
        g.preset = Some(name.to_string());
    }
    g
}

fn config(g: &Global, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = resolve(g.config.as_deref(), g.preset.as_deref(), overrides)?;
    if let Some(p) = g.precision {
        cfg.precision = p.into();
    }
    Ok(cfg)
}

fn write_resolved<S: Serialize>(out: &Path, value: &S) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.resolved.json"), serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn prepare(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_resolved(out, cfg)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_matching(path: &Path, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let ck = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ck.model_config != cfg.model {
        bail!(
            "checkpoint model config does not match the run config:\n  checkpoint: {}\n  config:     {}",
            serde_json::to_string(&ck.model_config)?,
            serde_json::to_string(&cfg.model)?
        );
    }
    Ok(ck)
}

fn gen_data(out: &Path, cfg: &ExperimentConfig, samples: usize) -> Result<()> {
    let sampler = cfg.sampler()?;
    let train = BufWriter::new(fs::File::create(out.join("train.txt"))?);
    dataset::export(&sampler, 0, samples, train)?;
    let eval = BufWriter::new(fs::File::create(out.join("eval.txt"))?);
    dataset::export(&sampler, dataset::EVAL_STREAM_BASE, cfg.eval.samples, eval)?;
    println!(
        "wrote {samples} training and {} evaluation samples to {}",
        cfg.eval.samples,
        out.display()
    );
    Ok(())
}

fn train<T: Scalar>(out: &Path, cfg: &ExperimentConfig, resume: Option<&Checkpoint>) -> Result<()> {
    let mut model = match resume {
        Some(ck) => {
            if ck.model_config != cfg.model {
                bail!("resume checkpoint was trained with a different model config");
            }
            ck.model::<T>()?
        }
        None => cfg.build_model::<T>()?,
    };
    let sampler = cfg.sampler()?;
    let log_every = cfg.train.log_every.max(1);
    let t0 = Instant::now();
    let result = run_curriculum(
        &cfg.train,
        &mut model,
        &sampler,
        &RunOutput {
            dir: Some(out.to_path_buf()),
        },
        resume,
        |r| {
            if r.step % log_every == 0 {
                eprintln!(
                    "step {:>6} {:<8} loss {:.4} acc {:.3} iters {:.1} lr {:.2e}",
                    r.step, r.phase, r.loss, r.accuracy, r.mean_iters, r.lr
                );
            }
        },
    )?;
    eprintln!(
        "trained {} steps in {:.1}s ({} skipped); checkpoint {}",
        result.metrics.len(),
        t0.elapsed().as_secs_f64(),
        result.skipped_steps,
        final_checkpoint(out).display()
    );
    eval(out, cfg, &model)
}

fn eval<T: Scalar>(out: &Path, cfg: &ExperimentConfig, model: &SequenceModel<T>) -> Result<()> {
    if cfg.eval.sweep.is_empty() {
        return Ok(());
    }
    let rows = analysis::eval_sweep(model, &cfg.distribution(), &cfg.eval.sweep, cfg.eval.samples, &cfg.eval.solver)?;
    analysis::write_sweep(&rows, &out.join("eval.json"), &out.join("eval.csv"))?;
    for r in &rows {
        println!(
            "p={} L={} {:?}: accuracy {:.4} mean iters {:.1} converged {}",
            r.p, r.length, r.mode, r.accuracy, r.mean_iters, r.converged
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct JacobianOutput {
    label: String,
    tokens: Vec<usize>,
    report: Option<JacobianReport>,
    error: Option<String>,
}

fn jacobian(out: &Path, cfg: &ExperimentConfig, ck: Option<&Path>, seeds: u64, prefix: usize) -> Result<()> {
    let sampler = cfg.sampler()?;
    let mut tokens = sampler.sample(dataset::EVAL_STREAM_BASE).tokens;
    if tokens.len() < prefix + 1 {
        bail!("data.length must exceed the prefix length {prefix}");
    }
    tokens.truncate(prefix + 1);
    let tol = cfg.eval.solver.tolerance;
    let cap = cfg.eval.solver.max_iters;
    let mut models: Vec<(String, SequenceModel<f64>)> = Vec::new();
    match ck {
        Some(p) => models.push((p.display().to_string(), load_matching(p, cfg)?.model::<f64>()?)),
        None => {
            for s in 0..seeds {
                let m = SequenceModel::<f64>::new(cfg.model.clone(), cfg.seed + s)?;
                models.push((format!("seed {}", cfg.seed + s), m));
            }
        }
    }
    let mut outputs = Vec::new();
    let mut failed = false;
    for (label, m) in &models {
        let res = analysis::jacobian_check(m, &tokens, tol, cap);
        match &res {
            Ok(r) => println!(
                "{label}: grid max rel diff {:.3e} (mean {:.3e}, {} entries), full max {:.3e}, iterations {}, cond {:.3e}",
                r.max_rel_diff,
                r.mean_rel_diff,
                r.compared,
                r.full_max_rel_diff,
                r.autodiff_iterations,
                r.condition.unwrap_or(f64::NAN)
            ),
            Err(e) => {
                failed = true;
                println!("{label}: {e}");
            }
        }
        outputs.push(JacobianOutput {
            label: label.clone(),
            tokens: tokens.clone(),
            error: res.as_ref().err().map(|e| e.to_string()),
            report: res.ok(),
        });
    }
    write_json(&out.join("jacobian.json"), &outputs)?;
    if failed {
        bail!("some Jacobians could not be computed");
    }
    Ok(())
}

fn duality<T: Scalar>(out: &Path, cfg: &ExperimentConfig, model: &SequenceModel<T>) -> Result<()> {
    let batch = cfg.sampler()?.eval_set(cfg.eval.samples);
    let r = analysis::duality_check(model, &batch, &cfg.eval.solver)?;
    println!(
        "token match rate {:.4}, max |ppl diff| {:.3e}, max prob gap {:.3e}, accuracy sim {:.4} seq {:.4}",
        r.token_match_rate, r.max_abs_ppl_diff, r.max_prob_gap, r.accuracy_simultaneous, r.accuracy_sequential
    );
    write_json(&out.join("duality.json"), &r)
}

#[derive(Serialize)]
struct BenchRow {
    length: usize,
    sequential_ms: f64,
    parallel_ms: f64,
    speedup: f64,
}

fn scan_bench<T: Scalar>(out: &Path, min_log2: u32, max_log2: u32, channels: usize, reps: usize) -> Result<()> {
    let mut rows = Vec::new();
    for p in min_log2..=max_log2 {
        let len = 1usize << p;
        let elems: Vec<ScanElement<T>> = (0..len)
            .map(|i| ScanElement {
                decay: (0..channels).map(|c| T::lit(0.9 + 0.09 * (((i + c) % 7) as f64 / 7.0))).collect(),
                input: (0..channels).map(|c| T::lit((((i * 31 + c) % 13) as f64 - 6.0) / 6.0)).collect(),
            })
            .collect();
        let h0 = vec![T::zero(); channels];
        let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
            let mut best = f64::INFINITY;
            for _ in 0..reps {
                let t = Instant::now();
                f()?;
                best = best.min(t.elapsed().as_secs_f64() * 1e3);
            }
            Ok(best)
        };
        let seq = time(&|| scan_sequential(&elems, &h0).map(drop).map_err(Into::into))?;
        let par = time(&|| scan_parallel(&elems, &h0).map(drop).map_err(Into::into))?;
        let row = BenchRow {
            length: len,
            sequential_ms: seq,
            parallel_ms: par,
            speedup: seq / par,
        };
        println!(
            "L={:>8} sequential {:>9.3} ms parallel {:>9.3} ms speedup {:.2}",
            len, seq, par, row.speedup
        );
        rows.push(row);
    }
    // Smallest length from which the parallel scan stays faster.
    let crossover = (0..rows.len())
        .find(|&i| rows[i..].iter().all(|r| r.speedup > 1.0))
        .map(|i| rows[i].length);
    match crossover {
        Some(l) => println!("crossover length {l} on {} threads", rayon::current_num_threads()),
        None => println!("no crossover on {} threads", rayon::current_num_threads()),
    }
    write_json(
        &out.join("scan_bench.json"),
        &json!({"threads": rayon::current_num_threads(), "crossover": crossover, "rows": rows}),
    )?;
    let mut f = BufWriter::new(fs::File::create(out.join("scan_bench.csv"))?);
    writeln!(f, "length,sequential_ms,parallel_ms,speedup")?;
    for r in &rows {
        writeln!(f, "{},{},{},{}", r.length, r.sequential_ms, r.parallel_ms, r.speedup)?;
    }
    f.flush()?;
    Ok(())
}

fn grad_check(out: &Path, seed: u64) -> Result<()> {
    let entries = analysis::grad_check_suite(seed)?;
    let worst = entries.iter().map(|e| e.max_rel_err).fold(0.0f64, f64::max);
    for e in &entries {
        println!(
            "{:<24} max rel {:.3e} max abs {:.3e} ({} entries)",
            e.name, e.max_rel_err, e.max_abs_err, e.checked
        );
    }
    println!("worst relative error {worst:.3e}");
    write_json(&out.join("grad_check.json"), &json!({"worst_rel_err": worst, "entries": entries}))?;
    if worst >= 1e-4 {
        bail!("gradient check failed: worst relative error {worst:.3e}");
    }
    Ok(())
}
