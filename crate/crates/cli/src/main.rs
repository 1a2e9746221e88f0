use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use drakes_core::denoiser::{load_checkpoint, save_checkpoint, Denoiser};
use drakes_core::diffusion::{ancestral_sample, sample_with, NoiseSchedule, SampleOptions};
use drakes_core::drakes::finetune_from;
use drakes_core::guidance::{doob_guided_rates, exact_value_backward};
use drakes_core::harness::{
    ordering_checks, read_fasta, run_alpha_sweep, run_comparison, run_oracle_suite, tradeoff_checks, write_fasta,
    Bench, BenchConfig, Check, EvalReport, KvConfig, Method, OracleSuiteConfig,
};
use drakes_core::oracle::model_step_rates;
use drakes_core::pretrain::train_pretrained;
use drakes_core::reward::RewardSpec;
use drakes_core::Array;

/// Reward fine-tuning and guidance for masked discrete diffusion models.
///
/// Every subcommand reads a flat `key = value` file given by `--config`
/// (`#` starts a comment); any key can be overridden with `--key value`.
/// Unknown keys are an error.
#[derive(Parser)]
#[command(name = "drakes", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Args {
    /// Configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser on the synthetic motif distribution. Keys: out
    /// (checkpoint path) plus the benchmark keys; writes a per-epoch CSV
    /// next to the checkpoint.
    Pretrain(Args),
    /// Fine-tune a pretrained model on the benchmark reward. Keys:
    /// pretrained, out, alpha, iterations, batch_size, tau0, truncation, ...;
    /// writes a per-iteration CSV next to the checkpoint.
    Finetune(Args),
    /// Draw sequences from a checkpoint. Keys: checkpoint, out (FASTA,
    /// default stdout), n_samples, seed, trajectories (optional JSONL path).
    Sample(Args),
    /// Inference-time guidance from a pretrained model. Keys: method
    /// (cg, smc, tds, cfg, doob), pretrained, out, n_samples, seed; doob
    /// needs a single-token model and reward_values.
    Guide(Args),
    /// Score a FASTA file. Keys: samples, pretrained, out (JSON, default
    /// stdout), seed, min_eval_reward (optional check).
    Evaluate(Args),
    /// Exact-oracle checks on a single-token instance. Keys: probs, reward,
    /// alpha, steps, rollouts, particles, finetune, seed, out.
    OracleCheck(Args),
    /// Run every method under every seed and check the expected orderings.
    /// Keys: out (directory), pretrained (optional), alphas (optional
    /// trade-off sweep) plus the benchmark keys.
    Compare(Args),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(args: &Args) -> Result<KvConfig> {
    let mut kv = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            KvConfig::parse(&text)?
        }
        None => KvConfig::default(),
    };
    let rest = kv.apply_overrides(&args.overrides)?;
    if !rest.is_empty() {
        bail!("unexpected arguments {rest:?}; overrides take the form --key value");
    }
    Ok(kv)
}

/// Runs one subcommand; `Ok(false)` means a requested check failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Pretrain(a) => pretrain(load_config(&a)?),
        Command::Finetune(a) => finetune(load_config(&a)?),
        Command::Sample(a) => sample(load_config(&a)?),
        Command::Guide(a) => guide(load_config(&a)?),
        Command::Evaluate(a) => evaluate(load_config(&a)?),
        Command::OracleCheck(a) => oracle_check(load_config(&a)?),
        Command::Compare(a) => compare(load_config(&a)?),
    }
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn load_model(path: &str) -> Result<Denoiser> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {path}"))?
        .0)
}

fn write_output(path: Option<&str>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {p}")),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.pass)
}

fn pretrain(kv: KvConfig) -> Result<bool> {
    let cfg = BenchConfig::from_kv(&kv)?;
    let out: String = kv.require("out")?;
    kv.reject_unused()?;
    let (dist, _) = Bench::task(&cfg)?;
    let trained = train_pretrained(&dist, &cfg.pretrain)?;
    let meta = json!({ "pretrain": cfg.pretrain, "distribution": dist });
    save_checkpoint(&trained.model, cfg.pretrain.horizon, cfg.steps, meta, &out)?;
    let mut csv = String::from("epoch,train_loss,holdout_loss\n");
    for e in &trained.log {
        csv += &format!("{},{},{}\n", e.epoch, e.train_loss, e.holdout_loss);
    }
    let log = with_extension(Path::new(&out), "csv");
    fs::write(&log, csv)?;
    info!("wrote {out} and {}", log.display());
    Ok(true)
}

fn finetune(kv: KvConfig) -> Result<bool> {
    let cfg = BenchConfig::from_kv(&kv)?;
    let pretrained = load_model(&kv.require::<String>("pretrained")?)?;
    let out: String = kv.require("out")?;
    let seed = kv.get("seed", cfg.finetune.seed)?;
    kv.reject_unused()?;
    let (_, rewards) = Bench::task(&cfg)?;
    let config = drakes_core::drakes::FinetuneConfig { seed, ..cfg.finetune };
    let mut csv = String::from("iteration,mean_reward,kl,grad_norm,wallclock\n");
    let tuned = finetune_from(&pretrained, pretrained.clone(), &rewards.finetune, &config, |m| {
        csv += &format!(
            "{},{},{},{},{}\n",
            m.iteration, m.mean_reward, m.kl, m.grad_norm, m.wallclock
        );
    })?;
    let meta = json!({ "finetune": config, "kl_clamped": tuned.kl_clamped });
    save_checkpoint(&tuned.model, config.horizon, config.steps, meta, &out)?;
    let log = with_extension(Path::new(&out), "csv");
    fs::write(&log, csv)?;
    info!("wrote {out} and {}", log.display());
    Ok(true)
}

fn sample(kv: KvConfig) -> Result<bool> {
    let (model, header) = load_checkpoint(kv.require::<String>("checkpoint")?)?;
    let n: usize = kv.get("n_samples", 640)?;
    let seed: u64 = kv.get("seed", 0)?;
    let steps: usize = kv.get("steps", header.steps)?;
    let out = kv.raw("out").map(str::to_string);
    let traj = kv.raw("trajectories").map(str::to_string);
    kv.reject_unused()?;
    let schedule = NoiseSchedule::new(header.horizon, steps)?;
    let samples = ancestral_sample(
        &model,
        &schedule,
        &SampleOptions {
            batch: n,
            seed,
            labels: None,
            record: traj.is_some(),
        },
    )?;
    if let Some(path) = traj {
        let mut w = BufWriter::new(fs::File::create(&path)?);
        for (b, t) in samples.trajectories.iter().enumerate() {
            for s in &t.steps {
                serde_json::to_writer(
                    &mut w,
                    &json!({ "sample": b, "step": s.step, "time": s.time, "pi": s.pi, "state": s.state }),
                )?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
    }
    write_output(
        out.as_deref(),
        &write_fasta(&samples.sequences, model.spec().n_tokens(), "sample"),
    )?;
    Ok(true)
}

fn guide(kv: KvConfig) -> Result<bool> {
    let method: String = kv.require("method")?;
    let pretrained = load_model(&kv.require::<String>("pretrained")?)?;
    let out = kv.raw("out").map(str::to_string);
    if method == "doob" {
        return doob(kv, pretrained, out);
    }
    let method: Method = method.parse()?;
    if !matches!(method, Method::Cg | Method::Smc | Method::Tds | Method::Cfg) {
        bail!("guide methods are cg, smc, tds, cfg and doob; use finetune for drakes");
    }
    let mut cfg = BenchConfig::from_kv(&kv)?;
    cfg.n_eval = kv.get("n_samples", cfg.n_eval)?;
    let seed: u64 = kv.get("seed", 0)?;
    kv.reject_unused()?;
    let bench = Bench::prepare(cfg, Some(pretrained))?;
    let seqs = bench.generate(method, seed)?;
    write_output(out.as_deref(), &write_fasta(&seqs, 4, method.name()))?;
    Ok(true)
}

/// Exact Doob-guided sampling for single-token models.
fn doob(kv: KvConfig, model: Denoiser, out: Option<String>) -> Result<bool> {
    let spec = *model.spec();
    if spec.len != 1 {
        bail!("doob guidance needs a single-token model, got length {}", spec.len);
    }
    let values: Vec<f64> = kv.list("reward_values", &[])?;
    let alpha: f64 = kv.get("guide_alpha", 0.5)?;
    let steps: usize = kv.require("steps")?;
    let n: usize = kv.get("n_samples", 640)?;
    let seed: u64 = kv.get("seed", 0)?;
    kv.reject_unused()?;
    let reward = RewardSpec::Tabular { values };
    reward.validate(&spec)?;
    let schedule = NoiseSchedule::new(1.0, steps)?;
    let table = exact_value_backward(&model, &reward, alpha, &schedule)?;
    let rates = model_step_rates(&model, &schedule);
    let s = spec.n_states();
    let seqs = sample_with(&spec, &schedule, n, seed, |k, states| {
        let q = rates(k)?;
        let mut pi = Array::zeros(&[states.len(), 1, s]);
        for (b, x) in states.iter().enumerate() {
            let p = doob_guided_rates(&q, &table.h[k - 1], x[0])?.transition(schedule.dt())?;
            pi.data_mut()[b * s..(b + 1) * s].copy_from_slice(&p[x[0] * s..(x[0] + 1) * s]);
        }
        Ok(pi)
    })?;
    write_output(out.as_deref(), &write_fasta(&seqs, spec.n_tokens(), "doob"))?;
    Ok(true)
}

fn evaluate(kv: KvConfig) -> Result<bool> {
    let cfg = BenchConfig::from_kv(&kv)?;
    let pretrained = load_model(&kv.require::<String>("pretrained")?)?;
    let path: String = kv.require("samples")?;
    let seed: u64 = kv.get("seed", 0)?;
    let min_reward: Option<f64> = kv.raw("min_eval_reward").map(str::parse).transpose()?;
    let out = kv.raw("out").map(str::to_string);
    kv.reject_unused()?;
    let seqs = read_fasta(&fs::read_to_string(&path).with_context(|| format!("reading {path}"))?)?;
    let bench = Bench::prepare(cfg, Some(pretrained))?;
    let metrics = bench.evaluate(&seqs, seed)?;
    let mut checks = Vec::new();
    if let Some(min) = min_reward {
        checks.push(Check {
            name: "median eval reward".into(),
            pass: metrics.eval_reward.median >= min,
            detail: format!("{:.6} vs minimum {min}", metrics.eval_reward.median),
        });
    }
    let report = json!({ "samples": path, "seed": seed, "metrics": metrics, "checks": checks });
    write_output(out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(checks.iter().all(|c| c.pass))
}

fn oracle_check(kv: KvConfig) -> Result<bool> {
    let d = OracleSuiteConfig::default();
    let cfg = OracleSuiteConfig {
        probs: kv.list("probs", &d.probs)?,
        reward: kv.list("reward", &d.reward)?,
        alpha: kv.get("alpha", d.alpha)?,
        steps: kv.get("steps", d.steps)?,
        rollouts: kv.get("rollouts", d.rollouts)?,
        particles: kv.get("particles", d.particles)?,
        finetune: kv.get("finetune", d.finetune)?,
        seed: kv.get("seed", d.seed)?,
    };
    let out = kv.raw("out").map(str::to_string);
    kv.reject_unused()?;
    let checks = run_oracle_suite(&cfg)?;
    let pass = print_checks(&checks);
    if let Some(p) = out {
        fs::write(
            &p,
            serde_json::to_string_pretty(&json!({ "config": cfg, "checks": checks, "pass": pass }))?,
        )?;
    }
    Ok(pass)
}

fn compare(kv: KvConfig) -> Result<bool> {
    let cfg = BenchConfig::from_kv(&kv)?;
    let out: String = kv.get("out", "compare-out".to_string())?;
    let pretrained = kv.raw("pretrained").map(load_model).transpose()?;
    let alphas: Vec<f64> = kv.list("alphas", &[])?;
    kv.reject_unused()?;
    let start = std::time::Instant::now();
    let bench = Bench::prepare(cfg.clone(), pretrained)?;
    let report = run_comparison(&bench);
    print!("{}", report.render());
    let mut checks = ordering_checks(&report);
    let dir = Path::new(&out);
    if !alphas.is_empty() {
        let others: Vec<f64> = alphas.iter().copied().filter(|&a| a != cfg.finetune.alpha).collect();
        let mut rows = run_alpha_sweep(&bench, &others).rows;
        rows.extend(report.rows.iter().filter(|r| r.method == Method::Drakes).cloned());
        rows.sort_by(|a, b| a.alpha.unwrap_or(0.0).total_cmp(&b.alpha.unwrap_or(0.0)));
        let sweep = EvalReport::from_rows(&cfg, rows);
        print!("{}", sweep.render());
        checks.extend(tradeoff_checks(&sweep, &alphas));
        sweep.write_artifacts(&dir.join("alpha-sweep"), &cfg, start.elapsed().as_secs_f64())?;
    }
    report.write_artifacts(dir, &cfg, start.elapsed().as_secs_f64())?;
    fs::write(dir.join("checks.json"), serde_json::to_string_pretty(&checks)?)?;
    let pass = print_checks(&checks);
    info!("artifacts in {}", dir.display());
    Ok(pass)
}
