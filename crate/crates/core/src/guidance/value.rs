use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{Generator, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::oracle::{model_step_rates, transition};
use crate::reward::RewardSpec;

/// `h_k(x) = exp(V_{t_k}(x)/α)` for every single-token state and grid time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub alpha: f64,
    pub times: Vec<f64>,
    /// `K + 1` rows over the `N + 1` states.
    pub h: Vec<Vec<f64>>,
}

impl ValueTable {
    /// `V_{t_k}(x)`.
    pub fn value(&self, k: usize, x: usize) -> f64 {
        self.alpha * self.h[k][x].ln()
    }

    pub fn steps(&self) -> usize {
        self.h.len() - 1
    }
}

/// Backward Feynman-Kac recursion `h_k = P_{k+1} h_{k+1}` of the pretrained
/// chain with `h_K(y) = exp(r(y)/α)` on tokens.
///
/// The mask state cannot survive to `t = T`; its terminal entry is set to
/// `h_{K-1}(mask)`, the value of unmasking on the final step.
pub fn exact_value_backward(
    model: &Denoiser,
    reward: &RewardSpec,
    alpha: f64,
    schedule: &NoiseSchedule,
) -> Result<ValueTable> {
    let spec = *model.spec();
    if spec.len != 1 {
        return invalid("exact value tables need single-token sequences; use mc_value_regression for longer ones");
    }
    if !(alpha > 0.0) {
        return invalid("alpha must be positive");
    }
    let r = reward.token_values(&spec)?;
    value_backward_from_rates(model_step_rates(model, schedule), &r, alpha, schedule)
}

/// [`exact_value_backward`] for arbitrary step generators.
pub fn value_backward_from_rates<F>(
    step_rates: F,
    r: &[f64],
    alpha: f64,
    schedule: &NoiseSchedule,
) -> Result<ValueTable>
where
    F: Fn(usize) -> Result<Generator>,
{
    let n = r.len();
    let k_steps = schedule.steps();
    let mut terminal: Vec<f64> = r.iter().map(|v| (v / alpha).exp()).collect();
    terminal.push(0.0);
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("exp(r/α) overflows at α = {alpha}")));
    }
    let mut h = vec![vec![0.0; n + 1]; k_steps + 1];
    h[k_steps] = terminal;
    for k in (0..k_steps).rev() {
        let p = transition(&step_rates(k + 1)?, schedule.dt(), schedule.time(k + 1))?;
        for x in 0..=n {
            h[k][x] = (0..=n).map(|y| p[x * (n + 1) + y] * h[k + 1][y]).sum();
        }
    }
    h[k_steps][n] = if k_steps > 0 { h[k_steps - 1][n] } else { 1.0 };
    Ok(ValueTable {
        alpha,
        times: (0..=k_steps).map(|k| schedule.time(k)).collect(),
        h,
    })
}

/// Value-tilted generator `Q*_{xy} = Q_{xy}·h(y)/h(x)` with the diagonal
/// recomputed. `h` holds `exp(V/α)` over all states at the time the rates
/// are applied; rows of states with zero value are left at zero.
pub fn doob_guided_rates(q_pre: &Generator, h: &[f64], state: usize) -> Result<Generator> {
    let n = q_pre.n_states();
    if h.len() != n {
        return invalid("value vector must cover every state");
    }
    if !(h[state] > 0.0) {
        return invalid(format!(
            "value at the current state {state} is zero; the guided rate ratio is undefined"
        ));
    }
    Generator::from_offdiag(n, |x, y| {
        if h[x] > 0.0 {
            q_pre.rate(x, y) * h[y] / h[x]
        } else {
            0.0
        }
    })
}
