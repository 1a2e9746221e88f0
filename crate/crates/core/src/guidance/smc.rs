use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{one_hot, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::grad::Var;
use crate::reward::RewardSpec;
use crate::rng::{categorical, stream, StreamRng};

use super::cg::{classifier_guidance_step, pretrained_step, CgVariant};
use super::proxy::ValueProxy;

/// Proposal kernel of the particle sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Proposal {
    /// Plain SMC.
    #[default]
    Pretrained,
    /// TDS: classifier-guided proposal with the twist as proxy.
    Guided { variant: CgVariant },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    pub particles: usize,
    pub alpha: f64,
    pub proposal: Proposal,
    /// Resample when ESS falls below this fraction of the particle count.
    pub ess_fraction: f64,
    pub seed: u64,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            particles: 64,
            alpha: 0.1,
            proposal: Proposal::Pretrained,
            ess_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Terminal particles with their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub sequences: Vec<Vec<usize>>,
    pub log_weights: Vec<f64>,
    /// Normalized weights; sum to one.
    pub weights: Vec<f64>,
    pub ess: f64,
    /// Steps at which resampling happened.
    pub resampled_at: Vec<usize>,
    /// Estimate of `log E_pre[exp(r(x_T)/α)]`.
    pub log_normalizer: f64,
}

impl ParticleSet {
    /// `count` equally weighted sequences by systematic resampling.
    pub fn resample(&self, count: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = stream(seed, 0);
        systematic(&self.weights, count, &mut rng)
            .into_iter()
            .map(|i| self.sequences[i].clone())
            .collect()
    }

    /// Weighted histogram over single-token states.
    pub fn histogram(&self, n_states: usize) -> Vec<f64> {
        let mut h = vec![0.0; n_states];
        for (x, w) in self.sequences.iter().zip(&self.weights) {
            h[x[0]] += w;
        }
        h
    }
}

/// Twisted SMC toward `p_pre(x)·exp(r(x)/α)`.
///
/// Particles start all-masked with log-weight 0. On step `k` each particle
/// moves under the proposal and picks up the incremental log-weight
/// `log h_k(x_k) − log h_{k-1}(x_{k-1}) + log p_pre(x_k|x_{k-1}) − log q(x_k|x_{k-1})`
/// with `log h` from `twist`, replaced by `r/α` at `t = T`. Systematic
/// resampling runs whenever the ESS drops below `ess_fraction·P`.
pub fn smc_sample(
    model: &Denoiser,
    reward: &RewardSpec,
    twist: &dyn ValueProxy,
    schedule: &NoiseSchedule,
    config: &SmcConfig,
) -> Result<ParticleSet> {
    let p = config.particles;
    if p < 2 {
        return invalid("smc needs at least two particles");
    }
    if !(config.alpha > 0.0) {
        return invalid("alpha must be positive");
    }
    let spec = *model.spec();
    let (m, s) = (spec.len, spec.n_states());
    let k_steps = schedule.steps();
    let mut rng = stream(config.seed, 0);
    let mut x = vec![vec![spec.mask(); m]; p];
    let mut log_w = vec![0.0; p];
    let mut twist_prev = log_twist(twist, &x, 0, &spec)?;
    let mut log_z = twist_prev[0];
    let mut resampled_at = Vec::new();
    for k in 1..=k_steps {
        let pre = pretrained_step(model, &x, k, schedule)?;
        let q = match config.proposal {
            Proposal::Pretrained => pre.clone(),
            Proposal::Guided { variant } => classifier_guidance_step(model, twist, &x, k, schedule, variant)?,
        };
        let mut log_ratio = vec![0.0; p];
        for (b, seq) in x.iter_mut().enumerate() {
            for i in 0..m {
                if seq[i] != spec.mask() {
                    continue;
                }
                let row = (b * m + i) * s;
                let qrow = &q.data()[row..row + s];
                let y = categorical(&mut rng, qrow);
                log_ratio[b] += pre.data()[row + y].ln() - qrow[y].ln();
                seq[i] = y;
            }
        }
        let twist_next = if k == k_steps {
            x.iter().map(|seq| reward.evaluate(seq) / config.alpha).collect()
        } else {
            log_twist(twist, &x, k, &spec)?
        };
        let inc: Vec<f64> = (0..p).map(|b| twist_next[b] - twist_prev[b] + log_ratio[b]).collect();
        let prev_norm = normalize(&log_w)?;
        let updated: Vec<f64> = log_w.iter().zip(&inc).map(|(w, i)| w + i).collect();
        log_z += log_sum_exp(&prev_norm.iter().zip(&inc).map(|(w, i)| w.ln() + i).collect::<Vec<_>>());
        let weights = normalize(&updated).map_err(|_| {
            Error::NonFinite(format!(
                "all particle weights vanished at step {k}; the twist is degenerate"
            ))
        })?;
        log_w = updated;
        twist_prev = twist_next;
        let ess = ess(&weights);
        if k < k_steps && ess < config.ess_fraction * p as f64 {
            let idx = systematic(&weights, p, &mut rng);
            x = idx.iter().map(|&i| x[i].clone()).collect();
            twist_prev = idx.iter().map(|&i| twist_prev[i]).collect();
            log_w = vec![0.0; p];
            resampled_at.push(k);
            debug!("smc resampled at step {k} (ess {ess:.1})");
        }
    }
    let weights = normalize(&log_w)?;
    Ok(ParticleSet {
        ess: ess(&weights),
        sequences: x,
        log_weights: log_w,
        weights,
        resampled_at,
        log_normalizer: log_z,
    })
}

fn log_twist(
    twist: &dyn ValueProxy,
    x: &[Vec<usize>],
    j: usize,
    spec: &crate::diffusion::SequenceSpec,
) -> Result<Vec<f64>> {
    let v = twist.log_value(&Var::constant(one_hot(x, spec)), j)?;
    Ok(v.data().to_vec())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

fn normalize(log_w: &[f64]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return Err(Error::NonFinite("particle weights are all zero or infinite".into()));
    }
    Ok(log_w.iter().map(|w| (w - lse).exp()).collect())
}

/// Effective sample size `1/Σw²` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling indices; one uniform offset for all draws.
pub fn systematic(weights: &[f64], count: usize, rng: &mut StreamRng) -> Vec<usize> {
    let offset: f64 = rng.random();
    let mut out = Vec::with_capacity(count);
    let mut cum = weights[0];
    let mut i = 0;
    for c in 0..count {
        let target = (c as f64 + offset) / count as f64;
        while cum < target && i + 1 < weights.len() {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SequenceSpec;
    use crate::guidance::{exact_value_backward, TableProxy};
    use crate::oracle::{target_distribution, tv_distance};

    fn instance() -> (Denoiser, NoiseSchedule, RewardSpec) {
        let spec = SequenceSpec::new(3, 1).unwrap();
        let sched = NoiseSchedule::linear(32).unwrap();
        let m = Denoiser::tabular_from_probs(spec, 32, 1.0, false, &[0.5, 0.3, 0.2]).unwrap();
        (
            m,
            sched,
            RewardSpec::Tabular {
                values: vec![0.0, 0.8, 1.5],
            },
        )
    }

    #[test]
    fn zero_reward_keeps_weights_uniform() {
        let (m, s, _) = instance();
        let r = RewardSpec::Tabular { values: vec![0.0; 3] };
        let table = exact_value_backward(&m, &r, 1.0, &s).unwrap();
        let cfg = SmcConfig {
            particles: 32,
            alpha: 1.0,
            ..Default::default()
        };
        let out = smc_sample(&m, &r, &TableProxy { table: &table }, &s, &cfg).unwrap();
        assert!(out.resampled_at.is_empty());
        assert!(out.weights.iter().all(|w| (w - 1.0 / 32.0).abs() < 1e-12));
        assert!(out.log_normalizer.abs() < 1e-12);
    }

    #[test]
    fn weighted_histogram_matches_the_target() {
        let (m, s, r) = instance();
        let table = exact_value_backward(&m, &r, 0.5, &s).unwrap();
        let target = target_distribution(&[0.5, 0.3, 0.2], &[0.0, 0.8, 1.5], 0.5).unwrap();
        for proposal in [
            Proposal::Pretrained,
            Proposal::Guided {
                variant: CgVariant::ExactRatio,
            },
        ] {
            let cfg = SmcConfig {
                particles: 4096,
                alpha: 0.5,
                proposal,
                seed: 3,
                ..Default::default()
            };
            let out = smc_sample(&m, &r, &TableProxy { table: &table }, &s, &cfg).unwrap();
            let h = out.histogram(4);
            assert!(tv_distance(&h[..3], &target).unwrap() < 0.05);
        }
    }

    #[test]
    fn systematic_resampling_follows_weights() {
        let mut rng = stream(1, 0);
        let idx = systematic(&[0.5, 0.0, 0.25, 0.25], 8, &mut rng);
        assert_eq!(idx.iter().filter(|&&i| i == 0).count(), 4);
        assert!(!idx.contains(&1));
        assert_eq!(idx.iter().filter(|&&i| i == 2).count(), 2);
    }

    #[test]
    fn too_few_particles_fail() {
        let (m, s, r) = instance();
        let table = exact_value_backward(&m, &r, 0.5, &s).unwrap();
        let cfg = SmcConfig {
            particles: 1,
            ..Default::default()
        };
        assert!(smc_sample(&m, &r, &TableProxy { table: &table }, &s, &cfg).is_err());
    }
}
