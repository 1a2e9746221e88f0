//! Exact single-token references: discretized marginals, tilted targets,
//! distances, the general path KL and Kolmogorov/HJB residuals.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{one_hot, Generator, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::guidance::ValueTable;

/// Marginal of the discretized chain at every grid time `t_0..=t_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactMarginal {
    pub times: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
}

impl ExactMarginal {
    pub fn terminal(&self) -> &[f64] {
        self.probs.last().expect("at least the initial slice")
    }

    /// Terminal marginal restricted to the real tokens.
    pub fn terminal_tokens(&self) -> Vec<f64> {
        let p = self.terminal();
        p[..p.len() - 1].to_vec()
    }
}

/// Propagates `p_k = (I + Q_kΔt)ᵀ p_{k-1}` from the all-mask state.
/// `step_rates(k)` is the generator applied on step `k ∈ 1..=K`.
pub fn exact_marginal<F>(step_rates: F, schedule: &NoiseSchedule) -> Result<ExactMarginal>
where
    F: Fn(usize) -> Result<Generator>,
{
    let first = step_rates(1)?;
    let mut init = vec![0.0; first.n_states()];
    *init.last_mut().expect("nonempty") = 1.0;
    exact_marginal_from(&init, step_rates, schedule)
}

/// [`exact_marginal`] from an arbitrary initial distribution.
pub fn exact_marginal_from<F>(initial: &[f64], step_rates: F, schedule: &NoiseSchedule) -> Result<ExactMarginal>
where
    F: Fn(usize) -> Result<Generator>,
{
    let dt = schedule.dt();
    let n = initial.len();
    let mut times = vec![0.0];
    let mut probs = vec![initial.to_vec()];
    for k in 1..=schedule.steps() {
        let q = step_rates(k)?;
        if q.n_states() != n {
            return invalid("generator size does not match the distribution");
        }
        let p = transition(&q, dt, schedule.time(k))?;
        let prev = probs.last().expect("nonempty");
        let mut next = vec![0.0; n];
        for x in 0..n {
            if prev[x] == 0.0 {
                continue;
            }
            for y in 0..n {
                next[y] += prev[x] * p[x * n + y];
            }
        }
        times.push(schedule.time(k));
        probs.push(next);
    }
    Ok(ExactMarginal { times, probs })
}

/// `I + QΔt`, rejecting negative transition mass.
pub(crate) fn transition(q: &Generator, dt: f64, time: f64) -> Result<Vec<f64>> {
    let n = q.n_states();
    for x in 0..n {
        let leave = -q.rate(x, x) * dt;
        if leave > 1.0 + 1e-12 {
            return Err(Error::StepTooLarge { product: leave, time });
        }
    }
    q.transition(dt)
}

/// Step generators of a single-token denoiser: step `k` unmasks at rate
/// `γ(t_k)` toward the prediction made at `t_{k-1}`.
pub fn model_step_rates<'a>(
    model: &'a Denoiser,
    schedule: &'a NoiseSchedule,
) -> impl Fn(usize) -> Result<Generator> + 'a {
    move |k| {
        let spec = model.spec();
        if spec.len != 1 {
            return invalid("exact oracles need single-token sequences");
        }
        let p = model.predict(&one_hot(&[vec![spec.mask()]], spec), schedule.time(k - 1), None)?;
        Generator::masked(p.row(0), schedule.rate(schedule.time(k)))
    }
}

/// Normalized `exp(r/α)·p_pre`.
pub fn target_distribution(p_pre: &[f64], r: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if p_pre.len() != r.len() {
        return invalid("reward and distribution lengths differ");
    }
    if !(alpha > 0.0) {
        return invalid("alpha must be positive");
    }
    if (p_pre.iter().sum::<f64>() - 1.0).abs() > 1e-9 || p_pre.iter().any(|&p| p < 0.0) {
        return invalid("p_pre must be a probability vector");
    }
    let top = r
        .iter()
        .zip(p_pre)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&v, _)| v / alpha)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = r
        .iter()
        .zip(p_pre)
        .map(|(&v, &p)| if p > 0.0 { p * (v / alpha - top).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    if !(z > 0.0) || !z.is_finite() {
        return invalid("target distribution has zero total mass");
    }
    Ok(w.iter().map(|v| v / z).collect())
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "tv_distance",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Path-KL rate between two generators at a (relaxed) state:
/// `Σ_x x̄_x Σ_{y≠x} [Q^θ_{xy} log(Q^θ_{xy}/Q^pre_{xy}) − Q^θ_{xy} + Q^pre_{xy}]`.
pub fn kl_rate(state: &[f64], q_theta: &Generator, q_pre: &Generator) -> Result<f64> {
    let n = q_theta.n_states();
    if q_pre.n_states() != n || state.len() != n {
        return invalid("state and generators must share the state space");
    }
    let mut total = 0.0;
    for (x, &mass) in state.iter().enumerate() {
        for y in 0..n {
            if x == y {
                continue;
            }
            let (a, b) = (q_theta.rate(x, y), q_pre.rate(x, y));
            let term = if a > 0.0 { a * (a / b).ln() - a + b } else { b };
            total += mass * term;
        }
    }
    Ok(total)
}

/// Residuals of the discretized chain against its continuous-time
/// equations, one entry per step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub dt: Vec<f64>,
    /// `max_k ‖(p(t_{k+1}) − p(t_k))/Δt − Q(t_k)ᵀ p(t_k)‖∞` on the
    /// continuous-time marginal.
    pub forward: Vec<f64>,
    /// Successive ratios `forward[i+1] / forward[i]`.
    pub forward_ratios: Vec<f64>,
    pub backward: Option<f64>,
    pub hjb: Option<f64>,
}

/// Forward-equation residual at step size `T/steps`. The continuous
/// marginal is integrated with RK4 on a grid 64 times finer.
pub fn forward_residual<F>(rate_fn: F, initial: &[f64], horizon: f64, steps: usize) -> Result<f64>
where
    F: Fn(f64) -> Result<Generator>,
{
    let dt = horizon / steps as f64;
    let sub = 64;
    let h = dt / sub as f64;
    let deriv = |t: f64, p: &[f64]| -> Result<Vec<f64>> {
        let q = rate_fn(t)?;
        let n = p.len();
        let mut d = vec![0.0; n];
        for x in 0..n {
            for y in 0..n {
                d[y] += p[x] * q.rate(x, y);
            }
        }
        Ok(d)
    };
    let axpy = |p: &[f64], k: &[f64], c: f64| -> Vec<f64> { p.iter().zip(k).map(|(a, b)| a + c * b).collect() };
    let mut p = initial.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..steps {
        let t0 = k as f64 * dt;
        let start = p.clone();
        let slope = deriv(t0, &start)?;
        for s in 0..sub {
            let t = t0 + s as f64 * h;
            let k1 = deriv(t, &p)?;
            let k2 = deriv(t + h / 2.0, &axpy(&p, &k1, h / 2.0))?;
            let k3 = deriv(t + h / 2.0, &axpy(&p, &k2, h / 2.0))?;
            let k4 = deriv(t + h, &axpy(&p, &k3, h))?;
            for i in 0..p.len() {
                p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        for i in 0..p.len() {
            worst = worst.max(((p[i] - start[i]) / dt - slope[i]).abs());
        }
    }
    Ok(worst)
}

/// `max |h_k(x) − Σ_y P_{k+1}(x→y) h_{k+1}(y)|` over the table.
pub fn backward_residual<F>(step_rates: F, schedule: &NoiseSchedule, table: &ValueTable) -> Result<f64>
where
    F: Fn(usize) -> Result<Generator>,
{
    let dt = schedule.dt();
    let mut worst: f64 = 0.0;
    for k in 0..schedule.steps() {
        let p = transition(&step_rates(k + 1)?, dt, schedule.time(k + 1))?;
        let (now, next) = (&table.h[k], &table.h[k + 1]);
        let n = now.len();
        for x in 0..n {
            let expect: f64 = (0..n).map(|y| p[x * n + y] * next[y]).sum();
            worst = worst.max((now[x] - expect).abs());
        }
    }
    Ok(worst)
}

/// Discretized HJB residual of `V = α log h`:
/// `(V_{k+1}(x) − V_k(x))/Δt + α Σ_{y≠x} Q_{xy}(exp((V_{k+1}(y) − V_{k+1}(x))/α) − 1)`.
pub fn hjb_residual<F>(step_rates: F, schedule: &NoiseSchedule, table: &ValueTable) -> Result<f64>
where
    F: Fn(usize) -> Result<Generator>,
{
    let dt = schedule.dt();
    let alpha = table.alpha;
    let mut worst: f64 = 0.0;
    for k in 0..schedule.steps() {
        let q = step_rates(k + 1)?;
        let v_now: Vec<f64> = table.h[k].iter().map(|h| alpha * h.ln()).collect();
        let v_next: Vec<f64> = table.h[k + 1].iter().map(|h| alpha * h.ln()).collect();
        let n = v_now.len();
        for x in 0..n {
            let mut r = (v_next[x] - v_now[x]) / dt;
            for y in 0..n {
                if y != x {
                    r += alpha * q.rate(x, y) * (((v_next[y] - v_next[x]) / alpha).exp() - 1.0);
                }
            }
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

/// Discrete-chain inputs for the backward and HJB residuals.
pub struct DiscreteChain<'a, F> {
    pub step_rates: F,
    pub schedule: &'a NoiseSchedule,
    pub table: &'a ValueTable,
}

/// Forward residuals over `step_counts`, plus backward and HJB residuals of
/// a value table when one is supplied.
pub fn kolmogorov_residuals<F, G>(
    rate_fn: F,
    initial: &[f64],
    horizon: f64,
    step_counts: &[usize],
    chain: Option<DiscreteChain<'_, G>>,
) -> Result<ResidualReport>
where
    F: Fn(f64) -> Result<Generator>,
    G: Fn(usize) -> Result<Generator>,
{
    let mut dt = Vec::new();
    let mut forward = Vec::new();
    for &s in step_counts {
        dt.push(horizon / s as f64);
        forward.push(forward_residual(&rate_fn, initial, horizon, s)?);
    }
    let forward_ratios = forward.windows(2).map(|w| w[1] / w[0]).collect();
    let (backward, hjb) = match chain {
        Some(c) => (
            Some(backward_residual(&c.step_rates, c.schedule, c.table)?),
            Some(hjb_residual(&c.step_rates, c.schedule, c.table)?),
        ),
        None => (None, None),
    };
    Ok(ResidualReport {
        dt,
        forward,
        forward_ratios,
        backward,
        hjb,
    })
}
