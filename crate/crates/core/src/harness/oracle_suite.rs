use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{ancestral_sample, Generator, NoiseSchedule, SampleOptions, SequenceSpec};
use crate::drakes::{finetune, kl_simplified, FinetuneConfig, TemperatureSchedule};
use crate::error::{invalid, Result};
use crate::grad::Array;
use crate::guidance::{doob_guided_rates, exact_value_backward, smc_sample, Proposal, SmcConfig, TableProxy};
use crate::oracle::{
    backward_residual, exact_marginal, forward_residual, hjb_residual, kl_rate, model_step_rates, target_distribution,
    tv_distance,
};
use crate::reward::RewardSpec;
use crate::rng::{derive, stream};

use super::compare::Check;

/// Single-token instance checked against the exact oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSuiteConfig {
    pub probs: Vec<f64>,
    pub reward: Vec<f64>,
    pub alpha: f64,
    pub steps: usize,
    pub rollouts: usize,
    pub particles: usize,
    /// Also fine-tune with DRAKES and compare the exact marginal with the
    /// tilted target (about ten seconds per run).
    pub finetune: bool,
    pub seed: u64,
}

impl Default for OracleSuiteConfig {
    fn default() -> Self {
        Self {
            probs: vec![0.5, 0.3, 0.2],
            reward: vec![0.0, 0.8, 1.5],
            alpha: 0.5,
            steps: 64,
            rollouts: 100_000,
            particles: 4096,
            finetune: false,
            seed: 0,
        }
    }
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

/// Exact-oracle checks on a tabular single-token model: Doob guidance,
/// Feynman-Kac, the backward and HJB equations, forward-equation order,
/// the simplified KL, SMC and optionally DRAKES fine-tuning.
pub fn run_oracle_suite(config: &OracleSuiteConfig) -> Result<Vec<Check>> {
    let n = config.probs.len();
    if config.reward.len() != n || config.steps < 4 {
        return invalid("oracle suite needs one reward per token and at least four steps");
    }
    let spec = SequenceSpec::new(n, 1)?;
    let sched = NoiseSchedule::linear(config.steps)?;
    let model = Denoiser::tabular_from_probs(spec, config.steps, 1.0, false, &config.probs)?;
    let reward = RewardSpec::Tabular {
        values: config.reward.clone(),
    };
    let alpha = config.alpha;
    let target = target_distribution(&config.probs, &config.reward, alpha)?;
    let table = exact_value_backward(&model, &reward, alpha, &sched)?;
    let pre_rates = model_step_rates(&model, &sched);
    let mut out = Vec::new();

    let guided = exact_marginal(
        |k| doob_guided_rates(&pre_rates(k)?, &table.h[k - 1], spec.mask()),
        &sched,
    )?;
    let pre = exact_marginal(&pre_rates, &sched)?;
    let mut worst = tv_distance(&guided.terminal_tokens(), &target)?;
    for k in [config.steps / 4, config.steps / 2] {
        let w: Vec<f64> = pre.probs[k].iter().zip(&table.h[k]).map(|(p, h)| p * h).collect();
        let z: f64 = w.iter().sum();
        let tilted: Vec<f64> = w.iter().map(|v| v / z).collect();
        worst = worst.max(tv_distance(&guided.probs[k], &tilted)?);
    }
    out.push(check("doob guidance", worst <= 0.02, format!("worst TV {worst:.2e}")));

    let samples = ancestral_sample(
        &model,
        &sched,
        &SampleOptions {
            batch: config.rollouts,
            seed: derive(config.seed, 1),
            ..Default::default()
        },
    )?;
    let v: Vec<f64> = samples
        .sequences
        .iter()
        .map(|x| (config.reward[x[0]] / alpha).exp())
        .collect();
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m;
    let se = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt() / m.sqrt();
    let exact = table.h[0][spec.mask()];
    let z = (mean - exact).abs() / se.max(f64::MIN_POSITIVE);
    out.push(check(
        "feynman-kac",
        z <= 3.0,
        format!("exact {exact:.5}, monte carlo {mean:.5} ± {se:.5}"),
    ));

    let back = backward_residual(&pre_rates, &sched, &table)?;
    out.push(check(
        "backward equation",
        back <= 1e-10,
        format!("residual {back:.1e}"),
    ));
    let flat = exact_value_backward(&model, &RewardSpec::constant(&spec, 0.0), alpha, &sched)?;
    let hjb = hjb_residual(&pre_rates, &sched, &flat)?;
    out.push(check("hjb at zero reward", hjb <= 1e-10, format!("residual {hjb:.1e}")));

    let probs = config.probs.clone();
    let mut init = vec![0.0; n + 1];
    init[n] = 1.0;
    let res: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&s| forward_residual(|_| Generator::masked(&probs, 2.0), &init, 1.0, s))
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = res.windows(2).map(|w| w[1] / w[0]).collect();
    out.push(check(
        "forward equation order",
        ratios.iter().all(|r| (0.4..=0.6).contains(r)),
        format!("halving ratios {ratios:.3?}"),
    ));

    let mut theta = model.clone();
    let mut rng = stream(config.seed, 2);
    theta.params_mut()[0]
        .data_mut()
        .iter_mut()
        .for_each(|v| *v += rng.random_range(-1.0..1.0));
    let states: Vec<Array> = (0..=config.steps)
        .map(|_| {
            let mut a = Array::zeros(&[16, 1, n + 1]);
            for row in a.data_mut().chunks_exact_mut(n + 1) {
                let w: Vec<f64> = (0..=n).map(|_| rng.random::<f64>()).collect();
                let s: f64 = w.iter().sum();
                row.iter_mut().zip(&w).for_each(|(r, v)| *r = v / s);
            }
            a
        })
        .collect();
    let kl = kl_simplified(&states, &theta, &theta.constants(), &model, &sched, false)?;
    let mut gap: f64 = 0.0;
    for b in 0..16 {
        let mut general = 0.0;
        for k in 1..=config.steps {
            let x = &states[k - 1].data()[b * (n + 1)..(b + 1) * (n + 1)];
            let one = Array::new(vec![1, 1, n + 1], x.to_vec())?;
            let t = sched.time(k - 1);
            let g = sched.rate(sched.time(k));
            let qt = Generator::masked(theta.predict(&one, t, None)?.data(), g)?;
            let qp = Generator::masked(model.predict(&one, t, None)?.data(), g)?;
            general += sched.dt() * kl_rate(x, &qt, &qp)?;
        }
        gap = gap.max((kl.value.data()[b] - general).abs());
    }
    let same = kl_simplified(&states, &model, &model.constants(), &model, &sched, false)?;
    let zero = same.value.data().iter().all(|&v| v == 0.0);
    out.push(check(
        "simplified kl",
        gap <= 1e-10 && zero,
        format!("gap to the path kl {gap:.1e}, zero at theta_pre: {zero}"),
    ));

    let smc = smc_sample(
        &model,
        &reward,
        &TableProxy { table: &table },
        &sched,
        &SmcConfig {
            particles: config.particles,
            alpha,
            proposal: Proposal::Pretrained,
            seed: derive(config.seed, 3),
            ..Default::default()
        },
    )?;
    let tv = tv_distance(&smc.histogram(n + 1)[..n], &target)?;
    out.push(check("smc terminal law", tv <= 0.05, format!("TV {tv:.4}")));

    if config.finetune {
        let cfg = FinetuneConfig {
            alpha,
            batch_size: 128,
            iterations: 1500,
            steps: config.steps,
            tau0: 0.1,
            temperature_schedule: TemperatureSchedule::Constant,
            truncation: 0,
            learning_rate: 0.01,
            seed: derive(config.seed, 4),
            ..FinetuneConfig::dna()
        };
        let tuned = finetune(&model, &reward, &cfg)?;
        let marginal = exact_marginal(model_step_rates(&tuned.model, &sched), &sched)?;
        let tv = tv_distance(&marginal.terminal_tokens(), &target)?;
        out.push(check("drakes terminal law", tv <= 0.05, format!("TV {tv:.4}")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let cfg = OracleSuiteConfig {
            rollouts: 20_000,
            particles: 2048,
            ..Default::default()
        };
        let checks = run_oracle_suite(&cfg).unwrap();
        assert_eq!(checks.len(), 7);
        for c in &checks {
            assert!(c.pass, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn mismatched_reward_is_rejected() {
        let cfg = OracleSuiteConfig {
            reward: vec![0.0],
            ..Default::default()
        };
        assert!(run_oracle_suite(&cfg).is_err());
    }
}
