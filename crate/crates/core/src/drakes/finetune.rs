use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{invalid, Error, Result};
use crate::grad::{Adam, AdamConfig, Array, Tape};
use crate::reward::RewardSpec;
use crate::rng::derive;

use super::config::FinetuneConfig;
use super::rollout::rollout_relaxed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_reward: f64,
    pub kl: f64,
    pub grad_norm: f64,
    /// Seconds since the start of fine-tuning.
    pub wallclock: f64,
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    pub model: Denoiser,
    pub metrics: Vec<IterationMetrics>,
    pub kl_clamped: usize,
}

/// Reward fine-tuning from `pretrained`: each iteration rolls out a relaxed
/// batch, forms `g(θ) = mean r(x̄_T) − α·mean KL` and takes an Adam ascent
/// step on `g`.
pub fn finetune(pretrained: &Denoiser, reward: &RewardSpec, config: &FinetuneConfig) -> Result<Finetuned> {
    finetune_from(pretrained, pretrained.clone(), reward, config, |_| {})
}

/// [`finetune`] starting from `init`, reporting every iteration to
/// `observe`.
pub fn finetune_from<F>(
    pretrained: &Denoiser,
    init: Denoiser,
    reward: &RewardSpec,
    config: &FinetuneConfig,
    mut observe: F,
) -> Result<Finetuned>
where
    F: FnMut(&IterationMetrics),
{
    config.validate()?;
    reward.validate(pretrained.spec())?;
    if init.spec() != pretrained.spec() {
        return invalid("fine-tuned and pretrained models must share the sequence shape");
    }
    let schedule = config.schedule()?;
    let mut model = init;
    let mut opt = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..Default::default()
    });
    let start = Instant::now();
    let mut metrics = Vec::with_capacity(config.iterations);
    let mut kl_clamped = 0;
    for iteration in 0..config.iterations {
        let tape = Tape::new();
        let params = model.track(&tape);
        let seed = derive(config.seed, iteration as u64);
        let out = rollout_relaxed(&model, &params, pretrained, reward, &schedule, config, seed)?;
        let mean_reward = out.reward.value().sum() / config.batch_size as f64;
        let kl = out.kl.value().sum() / config.batch_size as f64;
        let objective = out.reward.mean().sub(&out.kl.mean().scale(config.alpha))?;
        if !objective.item().is_finite() {
            return Err(Error::Diverged {
                iteration,
                message: format!("objective is {} (reward {mean_reward}, kl {kl})", objective.item()),
                last_good: Box::new(model),
            });
        }
        let grads = objective.neg().backward()?;
        let mut g: Vec<Array> = params.iter().map(|p| grads.get(p)).collect();
        let grad_norm = g
            .iter()
            .map(|a| a.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                iteration,
                message: "gradient is not finite".into(),
                last_good: Box::new(model),
            });
        }
        if config.max_grad_norm > 0.0 && grad_norm > config.max_grad_norm {
            let c = config.max_grad_norm / grad_norm;
            g.iter_mut().for_each(|a| a.data_mut().iter_mut().for_each(|v| *v *= c));
        }
        opt.step(model.params_mut(), &g);
        if out.kl_clamped > 0 && kl_clamped == 0 {
            warn!("pretrained probabilities below the KL floor were clamped at iteration {iteration}");
        }
        kl_clamped += out.kl_clamped;
        let m = IterationMetrics {
            iteration,
            mean_reward,
            kl,
            grad_norm,
            wallclock: start.elapsed().as_secs_f64(),
        };
        if iteration % 50 == 0 || iteration + 1 == config.iterations {
            info!("finetune iteration {iteration}: reward {mean_reward:.5}, kl {kl:.5}, |g| {grad_norm:.3e}");
        }
        observe(&m);
        metrics.push(m);
    }
    Ok(Finetuned {
        model,
        metrics,
        kl_clamped,
    })
}
