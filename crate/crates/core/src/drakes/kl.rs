use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::grad::{Array, Var};

/// Smallest pretrained probability used inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-12;

/// Per-sequence KL estimate `[B]` and the number of clamped pretrained
/// probabilities.
#[derive(Debug, Clone)]
pub struct KlValue {
    pub value: Var,
    pub clamped: usize,
}

/// Step weight of the KL sum: `γ(t_k)Δt`, or `γ(t_k)/T` for the flat
/// variant.
pub fn kl_weight(schedule: &NoiseSchedule, k: usize, flat: bool) -> f64 {
    let g = schedule.rate(schedule.time(k));
    if flat {
        g / schedule.horizon()
    } else {
        g * schedule.dt()
    }
}

/// One step of the simplified KL:
/// `w·Σ_i [x̄_{k-1}]_{i,Mask} Σ_y {−p̂θ_y + p̂pre_y + p̂θ_y log(p̂θ_y/p̂pre_y)}`.
///
/// `state` is `[B, M, N+1]`; `logits` and `pre_logits` are the fine-tuned
/// and pretrained scores `[B, M, N]`. Both sides go through the same
/// softmax so identical models give exactly zero.
pub fn kl_step(state: &Var, logits: &Var, pre_logits: &Array, weight: f64) -> Result<KlValue> {
    let s = state.shape();
    if s.len() != 3
        || logits.shape() != pre_logits.shape()
        || logits.shape()[..2] != s[..2]
        || s[2] != pre_logits.last_dim() + 1
    {
        return invalid("kl_step: state [B, M, N+1], logits and pre_logits [B, M, N] required");
    }
    let (b, m, n) = (s[0], s[1], pre_logits.last_dim());
    let pre_var = Var::constant(pre_logits.clone());
    let mut pre = pre_var.softmax().value().clone();
    let mut log_pre = pre_var.log_softmax().value().clone();
    let mut clamped = 0;
    for (p, lp) in pre.data_mut().iter_mut().zip(log_pre.data_mut()) {
        if *p < KL_FLOOR {
            clamped += 1;
            *p = KL_FLOOR;
            *lp = KL_FLOOR.ln();
        }
    }
    let log_theta = logits.log_softmax();
    let theta = logits.softmax();
    let bracket = Var::constant(pre)
        .sub(&theta)?
        .add(&theta.mul(&log_theta.sub(&Var::constant(log_pre))?)?)?
        .sum_last();
    let mask = state.select_last(&[n])?.reshape(&[b, m])?;
    let per_pos = mask.mul(&bracket)?.reshape(&[b, m])?;
    let value = per_pos
        .matmul(&Var::constant(Array::full(&[m, 1], 1.0)))?
        .reshape(&[b])?
        .scale(weight);
    Ok(KlValue { value, clamped })
}

/// Untracked scores of `model` at relaxed input `x`.
pub(crate) fn plain_logits(model: &Denoiser, x: &Array, t: f64) -> Result<Array> {
    Ok(model
        .logits(&model.constants(), &Var::constant(x.clone()), t, None)?
        .value()
        .clone())
}

/// Simplified KL between the fine-tuned and pretrained chains along a
/// recorded relaxed trajectory `states = [x̄_0, …, x̄_K]`, each `[B, M, N+1]`.
/// Deterministic in the states and both parameter sets.
pub fn kl_simplified(
    states: &[Array],
    model: &Denoiser,
    params: &[Var],
    pretrained: &Denoiser,
    schedule: &NoiseSchedule,
    flat: bool,
) -> Result<KlValue> {
    if states.len() != schedule.steps() + 1 {
        return invalid("trajectory must hold K + 1 states");
    }
    let mut total: Option<Var> = None;
    let mut clamped = 0;
    for k in 1..=schedule.steps() {
        let t = schedule.time(k - 1);
        let x = Var::constant(states[k - 1].clone());
        let logits = model.logits(params, &x, t, None)?;
        let pre = plain_logits(pretrained, &states[k - 1], t)?;
        let step = kl_step(&x, &logits, &pre, kl_weight(schedule, k, flat))?;
        clamped += step.clamped;
        total = Some(match total {
            None => step.value,
            Some(acc) => acc.add(&step.value)?,
        });
    }
    Ok(KlValue {
        value: total.expect("at least one step"),
        clamped,
    })
}
