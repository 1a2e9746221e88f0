use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{masked_step, one_hot, sample_with, NoiseSchedule, SequenceSpec};
use crate::error::{invalid, Error, Result};
use crate::grad::{Adam, AdamConfig, Array, Tape, Var};
use crate::reward::RewardSpec;
use crate::rng::stream;

use super::proxy::ValueProxy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub n_rollouts: usize,
    /// States recorded per rollout, at uniformly drawn grid times.
    pub pairs_per_rollout: usize,
    pub hidden: usize,
    pub time_features: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 2000,
            pairs_per_rollout: 4,
            hidden: 64,
            time_features: 8,
            epochs: 20,
            batch_size: 256,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Learned `h(x, t) ≈ E_pre[exp(r(x_T)/α) | x_t = x]`, stored as
/// `exp(offset + f(x, t))` with `f` a one-hidden-layer tanh network on the
/// flattened relaxed state plus sinusoidal time features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub spec: SequenceSpec,
    pub alpha: f64,
    /// `max r/α` over the training rollouts; keeps targets in `(0, 1]`.
    pub offset: f64,
    pub time_features: usize,
    pub times: Vec<f64>,
    pub params: Vec<Array>,
}

impl ValueNet {
    /// `f(x, t)` under explicit parameters, `[B]`.
    fn raw(&self, params: &[Var], x: &Var, times: &[f64]) -> Result<Var> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.spec.len || s[2] != self.spec.n_states() {
            return invalid("value network input must be [B, M, N+1]");
        }
        let b = s[0];
        let tf = Var::constant(time_features(times, self.time_features, b));
        let h = x
            .reshape(&[b, s[1] * s[2]])?
            .matmul(&params[0])?
            .add(&tf.matmul(&params[1])?)?
            .add(&params[2])?
            .tanh();
        h.matmul(&params[3])?.add(&params[4])?.reshape(&[b])
    }

    /// `h` itself on hard states at grid index `j`.
    pub fn value(&self, states: &[Vec<usize>], j: usize) -> Result<Vec<f64>> {
        let v = self.log_value(&Var::constant(one_hot(states, &self.spec)), j)?;
        Ok(v.data().iter().map(|l| l.exp()).collect())
    }
}

impl ValueProxy for ValueNet {
    fn log_value(&self, x: &Var, j: usize) -> Result<Var> {
        let Some(&t) = self.times.get(j) else {
            return invalid(format!("grid index {j} outside the value network's schedule"));
        };
        let params: Vec<Var> = self.params.iter().map(|p| Var::constant(p.clone())).collect();
        self.raw(&params, x, &[t])?.add_scalar(self.offset)
    }
}

/// Rows `[B, F]` of sinusoidal features; a single time is broadcast.
fn time_features(times: &[f64], f: usize, b: usize) -> Array {
    let mut v = Vec::with_capacity(b * f);
    for r in 0..b {
        let t = times[if times.len() == 1 { 0 } else { r }];
        for i in 0..f / 2 {
            let w = std::f64::consts::PI * (i + 1) as f64;
            v.push((w * t).sin());
            v.push((w * t).cos());
        }
    }
    Array::new(vec![b, f], v).expect("time feature shape")
}

/// Least-squares fit of `h(x_t, t)` to `exp(r(x_T)/α)` on states recorded
/// along pretrained rollouts.
pub fn mc_value_regression(
    model: &Denoiser,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
    config: &RegressionConfig,
) -> Result<ValueNet> {
    if !(alpha > 0.0) {
        return invalid("alpha must be positive");
    }
    if config.n_rollouts == 0 || config.pairs_per_rollout == 0 || config.epochs == 0 || config.batch_size == 0 {
        return invalid("regression sizes must be positive");
    }
    if config.hidden == 0 || config.time_features == 0 || !config.time_features.is_multiple_of(2) {
        return invalid("hidden width must be positive and time_features even and positive");
    }
    if config.n_rollouts < 100 {
        warn!(
            "value regression on {} rollouts will have high variance",
            config.n_rollouts
        );
    }
    let spec = *model.spec();
    let k_steps = schedule.steps();
    let mut pick = stream(config.seed, 1);
    let chosen: Vec<Vec<usize>> = (0..config.n_rollouts)
        .map(|_| {
            (0..config.pairs_per_rollout)
                .map(|_| pick.random_range(0..=k_steps))
                .collect()
        })
        .collect();
    let mut recorded: Vec<(Vec<usize>, usize, usize)> = Vec::new();
    let finals = sample_with(&spec, schedule, config.n_rollouts, config.seed, |k, states| {
        for (b, js) in chosen.iter().enumerate() {
            for &j in js.iter().filter(|&&j| j == k - 1) {
                recorded.push((states[b].clone(), j, b));
            }
        }
        let u = schedule.checked_unmask_prob(k)?;
        let probs = model.predict_tokens(states, schedule.time(k - 1), None)?;
        let onehot = one_hot(states, &spec);
        let mut pi = Array::zeros(onehot.shape());
        for (r, out) in pi.data_mut().chunks_exact_mut(spec.n_states()).enumerate() {
            masked_step(onehot.row(r), probs.row(r), u, out);
        }
        Ok(pi)
    })?;
    for (b, js) in chosen.iter().enumerate() {
        for _ in js.iter().filter(|&&j| j == k_steps) {
            recorded.push((finals[b].clone(), k_steps, b));
        }
    }
    let scores: Vec<f64> = finals.iter().map(|x| reward.evaluate(x) / alpha).collect();
    let offset = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let targets: Vec<f64> = recorded.iter().map(|&(_, _, b)| (scores[b] - offset).exp()).collect();
    let mean_target = targets.iter().sum::<f64>() / targets.len() as f64;

    let d_in = spec.len * spec.n_states();
    let mut init = stream(config.seed, 2);
    let mut uniform = |rows: usize| -> Result<Array> {
        let a = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * config.hidden).map(|_| init.random_range(-a..a)).collect();
        Array::new(vec![rows, config.hidden], data)
    };
    let mut net = ValueNet {
        spec,
        alpha,
        offset,
        time_features: config.time_features,
        times: (0..=k_steps).map(|k| schedule.time(k)).collect(),
        params: vec![
            uniform(d_in)?,
            uniform(config.time_features)?,
            Array::zeros(&[config.hidden]),
            Array::zeros(&[config.hidden, 1]),
            Array::vector(vec![mean_target.ln()]),
        ],
    };
    let mut opt = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..recorded.len()).collect();
    let mut shuffle = stream(config.seed, 3);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for idx in order.chunks(config.batch_size) {
            let states: Vec<Vec<usize>> = idx.iter().map(|&i| recorded[i].0.clone()).collect();
            let times: Vec<f64> = idx.iter().map(|&i| schedule.time(recorded[i].1)).collect();
            let y = Var::constant(Array::vector(idx.iter().map(|&i| targets[i]).collect()));
            let tape = Tape::new();
            let params: Vec<Var> = net.params.iter().map(|p| tape.leaf(p.clone())).collect();
            let pred = net.raw(&params, &Var::constant(one_hot(&states, &spec)), &times)?.exp();
            let diff = pred.sub(&y)?;
            let loss = diff.mul(&diff)?.mean();
            if !loss.item().is_finite() {
                return Err(Error::NonFinite(format!("value regression diverged in epoch {epoch}")));
            }
            let grads = loss.backward()?;
            let g: Vec<Array> = params.iter().map(|p| grads.get(p)).collect();
            opt.step(&mut net.params, &g);
            total += loss.item() * idx.len() as f64;
        }
        info!(
            "value regression epoch {epoch}: mse {:.3e}",
            total / recorded.len() as f64
        );
    }
    Ok(net)
}
