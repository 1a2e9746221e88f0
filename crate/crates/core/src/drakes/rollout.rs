use crate::denoiser::Denoiser;
use crate::diffusion::{one_hot, step_distribution_var, NoiseSchedule};
use crate::error::Result;
use crate::grad::{Array, Var};
use crate::reward::RewardSpec;
use crate::rng::{stream, StreamRng};

use super::config::{FinetuneConfig, Relaxation};
use super::kl::{kl_step, kl_weight, plain_logits};
use super::relax::{gumbel_noise, gumbel_softmax_with, straight_through};

/// A batch of relaxed trajectories with their loss components.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// `x̄_0, …, x̄_K`, each `[B, M, N+1]`.
    pub states: Vec<Array>,
    /// State handed to the reward (straight-through one-hot when enabled).
    pub terminal: Var,
    /// `[B]`
    pub reward: Var,
    /// `[B]`
    pub kl: Var,
    pub kl_clamped: usize,
}

/// Batch of relaxed DRAKES rollouts under `params`.
///
/// Element `b` draws its Gumbel noise from stream `b` of `seed`. Steps
/// `k ≤ k_trunc` run on detached values with constant parameters, so
/// neither the state nor the KL term of those steps carries gradient.
pub fn rollout_relaxed(
    model: &Denoiser,
    params: &[Var],
    pretrained: &Denoiser,
    reward: &RewardSpec,
    schedule: &NoiseSchedule,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<Rollout> {
    let spec = *model.spec();
    let batch = config.batch_size;
    let shape = [batch, spec.len, spec.n_states()];
    let mut rngs: Vec<StreamRng> = (0..batch).map(|b| stream(seed, b as u64)).collect();
    let frozen = model.constants();
    let all_mask = Var::constant(one_hot(&vec![vec![spec.mask(); spec.len]; batch], &spec));
    let mut x = all_mask.clone();
    let mut states = vec![x.value().clone()];
    let carry = config.relaxation == Relaxation::Carry;
    let mut kl: Option<Var> = None;
    let mut clamped = 0;
    for k in 1..=schedule.steps() {
        let tracked = k > config.truncation;
        let p = if tracked { params } else { &frozen[..] };
        let t = schedule.time(k - 1);
        let u = schedule.checked_unmask_prob(k)?;
        let logits = model.logits(p, &x, t, None)?;
        let pre = plain_logits(pretrained, x.value(), t)?;
        let base = if carry { all_mask.clone() } else { x.clone() };
        let step_kl = kl_step(&x, &logits, &pre, kl_weight(schedule, k, config.flat_kl_weight))?;
        clamped += step_kl.clamped;
        kl = Some(match kl {
            None => step_kl.value,
            Some(acc) => acc.add(&step_kl.value)?,
        });
        let pi = step_distribution_var(&base, &logits.softmax(), u)?;
        let mut noise = Array::zeros(&shape);
        let per = spec.len * spec.n_states();
        for (b, rng) in rngs.iter_mut().enumerate() {
            let g = gumbel_noise(&[per], rng);
            noise.data_mut()[b * per..(b + 1) * per].copy_from_slice(g.data());
        }
        let tau = config.temperature(schedule.time(k), schedule);
        let y = gumbel_softmax_with(&pi, tau, &noise, config.gumbel_on_probs)?;
        x = if carry {
            let mask_mass = x.select_last(&[spec.mask()])?;
            x.add(&mask_mass.mul(&y.sub(&all_mask)?)?)?
        } else {
            y
        };
        states.push(x.value().clone());
    }
    let terminal = if config.straight_through {
        straight_through(&x)?
    } else {
        x
    };
    let r = reward.relaxed(&terminal)?;
    Ok(Rollout {
        states,
        terminal,
        reward: r,
        kl: kl.expect("at least one step"),
        kl_clamped: clamped,
    })
}
