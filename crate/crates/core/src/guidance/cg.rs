use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{masked_step, one_hot, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grad::{Array, Tape, Var};

use super::proxy::ValueProxy;

/// How classifier guidance forms the value ratio of a substitution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CgVariant {
    /// Evaluates the proxy on every single-token substitution.
    ExactRatio,
    /// First-order expansion `(e_y − e_Mask)ᵀ∇_x̄ log h` at the current state.
    #[default]
    Taylor,
}

/// Rows of substitution states evaluated per proxy call.
const CHUNK: usize = 2048;

/// Guided step distribution π `[B, M, N+1]` for step `k` from hard states
/// `x_{k-1}`.
///
/// Masked position `i` moves to token `y` with weight `u·p̂_y·h(x^{i←y})/h(x)`
/// where `h` is the proxy at `t_{k-1}`; the rest stays masked. If the token
/// weights exceed one (always at the final step, where `u = 1`) they are
/// renormalized and the mask gets no mass. A zero proxy gives the unguided π.
pub fn classifier_guidance_step(
    model: &Denoiser,
    proxy: &dyn ValueProxy,
    states: &[Vec<usize>],
    k: usize,
    schedule: &NoiseSchedule,
    variant: CgVariant,
) -> Result<Array> {
    let spec = *model.spec();
    let (m, n, s) = (spec.len, spec.n_tokens(), spec.n_states());
    let u = schedule.checked_unmask_prob(k)?;
    let probs = model.predict_tokens(states, schedule.time(k - 1), None)?;
    let ratios = match variant {
        CgVariant::ExactRatio => exact_log_ratios(proxy, states, k - 1, &spec)?,
        CgVariant::Taylor => taylor_log_ratios(proxy, states, k - 1, &spec)?,
    };
    let onehot = one_hot(states, &spec);
    let mut pi = Array::zeros(&[states.len(), m, s]);
    for (row, out) in pi.data_mut().chunks_exact_mut(s).enumerate() {
        let (b, i) = (row / m, row % m);
        if states[b][i] != spec.mask() {
            out.copy_from_slice(onehot.row(row));
            continue;
        }
        let lr = &ratios.row(row)[..n];
        let top = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::NonFinite(format!(
                "guidance log-ratio {top} at sequence {b}, position {i}"
            )));
        }
        // ratios can be huge; keep the scale factor separate
        let scaled: Vec<f64> = (0..n).map(|y| u * probs.row(row)[y] * (lr[y] - top).exp()).collect();
        let total: f64 = scaled.iter().sum();
        let mass = total * top.exp();
        if u >= 1.0 || !(mass <= 1.0) {
            for y in 0..n {
                out[y] = scaled[y] / total;
            }
            out[n] = 0.0;
        } else {
            let plain: Vec<f64> = scaled.iter().map(|v| v * top.exp()).collect();
            out[..n].copy_from_slice(&plain);
            out[n] = 1.0 - mass;
        }
    }
    Ok(pi)
}

/// Unguided π of the pretrained chain for step `k`.
pub fn pretrained_step(model: &Denoiser, states: &[Vec<usize>], k: usize, schedule: &NoiseSchedule) -> Result<Array> {
    let spec = *model.spec();
    let u = schedule.checked_unmask_prob(k)?;
    let probs = model.predict_tokens(states, schedule.time(k - 1), None)?;
    let onehot = one_hot(states, &spec);
    let mut pi = Array::zeros(onehot.shape());
    for (r, out) in pi.data_mut().chunks_exact_mut(spec.n_states()).enumerate() {
        masked_step(onehot.row(r), probs.row(r), u, out);
    }
    Ok(pi)
}

/// `log h(x^{i←y}) − log h(x)` as `[B·M, N]` rows (zero on unmasked rows).
fn exact_log_ratios(
    proxy: &dyn ValueProxy,
    states: &[Vec<usize>],
    j: usize,
    spec: &crate::diffusion::SequenceSpec,
) -> Result<Array> {
    let (m, n) = (spec.len, spec.n_tokens());
    let base = proxy.log_value(&Var::constant(one_hot(states, spec)), j)?;
    let mut jobs = Vec::new();
    for (b, x) in states.iter().enumerate() {
        for i in 0..m {
            if x[i] == spec.mask() {
                for y in 0..n {
                    jobs.push((b, i, y));
                }
            }
        }
    }
    let mut out = Array::zeros(&[states.len() * m, n]);
    for chunk in jobs.chunks(CHUNK) {
        let subs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&(b, i, y)| {
                let mut x = states[b].clone();
                x[i] = y;
                x
            })
            .collect();
        let vals = proxy.log_value(&Var::constant(one_hot(&subs, spec)), j)?;
        for (&(b, i, y), v) in chunk.iter().zip(vals.data()) {
            out.data_mut()[(b * m + i) * n + y] = v - base.data()[b];
        }
    }
    Ok(out)
}

/// `∂log h/∂x̄_{i,y} − ∂log h/∂x̄_{i,Mask}` as `[B·M, N]` rows.
fn taylor_log_ratios(
    proxy: &dyn ValueProxy,
    states: &[Vec<usize>],
    j: usize,
    spec: &crate::diffusion::SequenceSpec,
) -> Result<Array> {
    let (n, s) = (spec.n_tokens(), spec.n_states());
    let tape = Tape::new();
    let x = tape.leaf(one_hot(states, spec));
    let g = proxy.log_value(&x, j)?.sum().backward()?.get(&x);
    let mut out = Array::zeros(&[g.len() / s, n]);
    for (o, row) in out.data_mut().chunks_exact_mut(n).zip(g.rows()) {
        for y in 0..n {
            o[y] = row[y] - row[n];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SequenceSpec;
    use crate::guidance::{doob_guided_rates, exact_value_backward, RelaxedRewardProxy, TableProxy};
    use crate::oracle::model_step_rates;
    use crate::reward::RewardSpec;
    use crate::Architecture;

    fn mlp() -> (Denoiser, NoiseSchedule) {
        let spec = SequenceSpec::new(4, 5).unwrap();
        let mut m = Denoiser::new(spec, Architecture::Mlp(Default::default()), 3).unwrap();
        let k = m.params().len();
        m.params_mut()[k - 2]
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.7).sin());
        (m, NoiseSchedule::linear(10).unwrap())
    }

    fn states() -> Vec<Vec<usize>> {
        vec![vec![4, 1, 4, 4, 2], vec![4; 5], vec![0, 4, 3, 4, 1]]
    }

    #[test]
    fn zero_reward_returns_the_unguided_step() {
        let (m, s) = mlp();
        let r = RewardSpec::LinearPwm {
            pwm: Array::zeros(&[2, 4]),
        };
        let proxy = RelaxedRewardProxy { reward: &r, alpha: 0.5 };
        let plain = pretrained_step(&m, &states(), 4, &s).unwrap();
        for v in [CgVariant::ExactRatio, CgVariant::Taylor] {
            let pi = classifier_guidance_step(&m, &proxy, &states(), 4, &s, v).unwrap();
            for (a, b) in pi.data().iter().zip(plain.data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn taylor_is_exact_for_linear_proxies() {
        let (m, _) = mlp();
        let pwm = Array::new(vec![2, 4], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0, 0.6]).unwrap();
        let r = RewardSpec::LinearPwm { pwm };
        let proxy = RelaxedRewardProxy { reward: &r, alpha: 0.7 };
        let a = exact_log_ratios(&proxy, &states(), 2, m.spec()).unwrap();
        let b = taylor_log_ratios(&proxy, &states(), 2, m.spec()).unwrap();
        for (row, (x, y)) in a.rows().zip(b.rows()).enumerate() {
            let (s, i) = (row / 5, row % 5);
            if states()[s][i] == 4 {
                for (p, q) in x.iter().zip(y) {
                    assert!((p - q).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn exact_ratio_with_the_true_value_reproduces_doob() {
        let spec = SequenceSpec::new(3, 1).unwrap();
        let sched = NoiseSchedule::linear(16).unwrap();
        let m = Denoiser::tabular_from_probs(spec, 16, 1.0, false, &[0.5, 0.3, 0.2]).unwrap();
        let r = RewardSpec::Tabular {
            values: vec![0.0, 0.8, 1.5],
        };
        let table = exact_value_backward(&m, &r, 0.5, &sched).unwrap();
        let proxy = TableProxy { table: &table };
        let rates = model_step_rates(&m, &sched);
        for k in 1..=16 {
            let pi = classifier_guidance_step(&m, &proxy, &[vec![3]], k, &sched, CgVariant::ExactRatio).unwrap();
            let q = doob_guided_rates(&rates(k).unwrap(), &table.h[k - 1], 3).unwrap();
            for y in 0..3 {
                assert!((pi.data()[y] - q.rate(3, y) * sched.dt()).abs() < 1e-9);
            }
            assert!((pi.data()[3] - (1.0 + q.rate(3, 3) * sched.dt())).abs() < 1e-9);
        }
    }

    #[test]
    fn guided_rows_are_distributions() {
        let (m, s) = mlp();
        let pwm = Array::full(&[3, 4], 2.0);
        let r = RewardSpec::LinearPwm { pwm };
        let proxy = RelaxedRewardProxy {
            reward: &r,
            alpha: 0.01,
        };
        for k in [1, 5, 10] {
            let pi = classifier_guidance_step(&m, &proxy, &states(), k, &s, CgVariant::Taylor).unwrap();
            for row in pi.rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
