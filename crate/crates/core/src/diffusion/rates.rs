use rand::Rng;

use super::schedule::{NoiseSchedule, SequenceSpec};
use crate::error::{invalid, Error, Result};
use crate::grad::{Array, Var};

/// Per-position rate matrix over the `N + 1` states (source-major:
/// `rate(x, y)` is the rate of jumping from `x` to `y`).
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    n_states: usize,
    rates: Vec<f64>,
}

impl Generator {
    pub fn zeros(n_states: usize) -> Self {
        Self {
            n_states,
            rates: vec![0.0; n_states * n_states],
        }
    }

    /// Masked-diffusion reverse rates: from Mask to token `y` at rate
    /// `γ·x0_probs[y]`, and no jumps out of real tokens.
    pub fn masked(x0_probs: &[f64], gamma: f64) -> Result<Self> {
        check_probs(x0_probs)?;
        if !(gamma >= 0.0) {
            return invalid(format!("unmask rate must be nonnegative, got {gamma}"));
        }
        let n = x0_probs.len();
        let mut g = Self::zeros(n + 1);
        for (y, &p) in x0_probs.iter().enumerate() {
            g.set(n, y, gamma * p);
        }
        g.set(n, n, -gamma);
        Ok(g)
    }

    /// Builds a generator from off-diagonal rates; the diagonal is filled
    /// so rows sum to zero.
    pub fn from_offdiag(n_states: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut g = Self::zeros(n_states);
        for x in 0..n_states {
            let mut out = 0.0;
            for y in 0..n_states {
                if x != y {
                    let r = f(x, y);
                    if !(r >= 0.0) || !r.is_finite() {
                        return invalid(format!("rate {x}->{y} must be finite and nonnegative, got {r}"));
                    }
                    g.set(x, y, r);
                    out += r;
                }
            }
            g.set(x, x, -out);
        }
        Ok(g)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.rates[from * self.n_states + to]
    }

    pub fn set(&mut self, from: usize, to: usize, r: f64) {
        self.rates[from * self.n_states + to] = r;
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.rates[from * self.n_states..(from + 1) * self.n_states]
    }

    /// Largest absolute row-sum deviation from zero.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.n_states)
            .map(|x| self.row(x).iter().sum::<f64>().abs())
            .fold(0.0, f64::max)
    }

    /// Rows sum to zero and off-diagonals are nonnegative.
    pub fn is_valid(&self, tol: f64) -> bool {
        let offdiag_ok = (0..self.n_states).all(|x| (0..self.n_states).all(|y| x == y || self.rate(x, y) >= 0.0));
        offdiag_ok && self.row_sum_error() <= tol
    }

    /// One-step transition matrix `I + QΔt`, source-major.
    pub fn transition(&self, dt: f64) -> Result<Vec<f64>> {
        let n = self.n_states;
        let mut p = vec![0.0; n * n];
        for x in 0..n {
            let stay = 1.0 + self.rate(x, x) * dt;
            if stay < -1e-12 {
                return Err(Error::StepTooLarge {
                    product: -self.rate(x, x) * dt,
                    time: f64::NAN,
                });
            }
            for y in 0..n {
                p[x * n + y] = if x == y { stay.max(0.0) } else { self.rate(x, y) * dt };
            }
        }
        Ok(p)
    }
}

fn check_probs(p: &[f64]) -> Result<()> {
    if let Some(bad) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return invalid(format!("probabilities must be finite and nonnegative, got {bad}"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return invalid(format!("probabilities must sum to 1, got {s}"));
    }
    Ok(())
}

/// Reverse rates for one position; `state` is its (possibly relaxed) value
/// and only matters through its mask mass, which [`step_distribution`]
/// applies. Returned as a full generator for inspection.
pub fn reverse_rates(x0_probs: &[f64], gamma: f64) -> Result<Generator> {
    Generator::masked(x0_probs, gamma)
}

/// Euler step of one position: `π_y = x̄_y + Δt·Σ_x x̄_x·Q(x→y)`.
pub fn step_distribution(state: &[f64], rates: &Generator, dt: f64) -> Result<Vec<f64>> {
    let n = rates.n_states();
    if state.len() != n {
        return Err(Error::Shape {
            op: "step_distribution",
            lhs: vec![state.len()],
            rhs: vec![n],
        });
    }
    for x in 0..n {
        let leave = -rates.rate(x, x) * dt;
        if leave > 1.0 + 1e-12 {
            return Err(Error::StepTooLarge {
                product: leave,
                time: f64::NAN,
            });
        }
    }
    let mut pi = state.to_vec();
    for (x, &mass) in state.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        for (y, p) in pi.iter_mut().enumerate() {
            *p += dt * mass * rates.rate(x, y);
        }
    }
    // the final step cancels the mask mass up to rounding
    for p in &mut pi {
        if p.abs() < 1e-15 {
            *p = 0.0;
        }
    }
    Ok(pi)
}

/// Masked-diffusion step in closed form: tokens keep their mass and the mask
/// mass moves to tokens with probability `u = γΔt`, split by `x0_probs`.
pub fn masked_step(state: &[f64], x0_probs: &[f64], u: f64, out: &mut [f64]) {
    let n = x0_probs.len();
    let m = state[n];
    for y in 0..n {
        out[y] = state[y] + m * u * x0_probs[y];
    }
    out[n] = if u >= 1.0 { 0.0 } else { m * (1.0 - u) };
}

/// Batched differentiable version of [`masked_step`].
///
/// `state` is `[B, M, N+1]`, `x0_probs` is `[B, M, N]`; returns π with the
/// shape of `state`.
pub fn step_distribution_var(state: &Var, x0_probs: &Var, u: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&u) {
        if u > 1.0 {
            return Err(Error::StepTooLarge {
                product: u,
                time: f64::NAN,
            });
        }
        return invalid(format!("unmask probability must be nonnegative, got {u}"));
    }
    let s = state.shape().to_vec();
    let p = x0_probs.shape().to_vec();
    if s.len() != 3 || p.len() != 3 || s[..2] != p[..2] || s[2] != p[2] + 1 {
        return Err(Error::Shape {
            op: "step_distribution",
            lhs: s,
            rhs: p,
        });
    }
    let n = p[2];
    let rows = s[0] * s[1];
    // [p̂, 0] − e_mask, scaled by u
    let mut pad = Array::zeros(&[n, n + 1]);
    for y in 0..n {
        pad.data_mut()[y * (n + 1) + y] = u;
    }
    let mut shift = Array::zeros(&[n + 1]);
    shift.data_mut()[n] = -u;
    let delta = x0_probs
        .reshape(&[rows, n])?
        .matmul(&Var::constant(pad))?
        .add(&Var::constant(shift))?
        .reshape(&s)?;
    let mask_mass = state.select_last(&[n])?;
    let pi = state.add(&mask_mass.mul(&delta)?)?;
    Ok(pi)
}

/// Replaces each position of `x0` by the mask with probability `m(t)`.
pub fn forward_mask<R: Rng + ?Sized>(
    x0: &[usize],
    t: f64,
    schedule: &NoiseSchedule,
    spec: &SequenceSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=schedule.horizon()).contains(&t) {
        return invalid(format!("time {t} outside [0, {}]", schedule.horizon()));
    }
    let m = schedule.mask_prob(t);
    Ok(mask_with_prob(x0, m, spec.mask(), rng))
}

pub(crate) fn mask_with_prob<R: Rng + ?Sized>(x0: &[usize], m: f64, mask: usize, rng: &mut R) -> Vec<usize> {
    x0.iter()
        .map(|&x| if m >= 1.0 || rng.random::<f64>() < m { mask } else { x })
        .collect()
}

/// One-hot encoding of hard sequences as a `[B, M, N+1]` array.
pub fn one_hot(seqs: &[Vec<usize>], spec: &SequenceSpec) -> Array {
    let s = spec.n_states();
    let mut data = vec![0.0; seqs.len() * spec.len * s];
    for (b, seq) in seqs.iter().enumerate() {
        for (i, &x) in seq.iter().enumerate() {
            data[(b * spec.len + i) * s + x] = 1.0;
        }
    }
    Array::new(vec![seqs.len(), spec.len, s], data).expect("one-hot shape")
}

/// Checks that every position of a `[.., N+1]` array lies on the simplex.
pub fn check_simplex(x: &Array, tol: f64) -> Result<()> {
    for row in x.rows() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol || row.iter().any(|&v| v < -tol || !v.is_finite()) {
            return invalid(format!("input is off the simplex: {row:?}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn masked_rates_match_closed_form() {
        let g = reverse_rates(&[0.7, 0.3], 2.0).unwrap();
        assert!(close(g.row(2), &[1.4, 0.6, -2.0], 1e-15));
        assert!(close(g.row(0), &[0.0, 0.0, 0.0], 0.0));
        assert!(g.is_valid(1e-12));
        assert!(reverse_rates(&[1.2, -0.2], 1.0).is_err());
    }

    #[test]
    fn step_from_mask_and_relaxed_state() {
        let g = reverse_rates(&[0.7, 0.3], 1.0).unwrap();
        let pi = step_distribution(&[0.0, 0.0, 1.0], &g, 0.1).unwrap();
        assert!(close(&pi, &[0.07, 0.03, 0.9], 1e-12));

        let pi = step_distribution(&[0.0, 1.0, 0.0], &g, 0.1).unwrap();
        assert_eq!(pi, vec![0.0, 1.0, 0.0]);

        let g = reverse_rates(&[0.5, 0.5], 1.0).unwrap();
        let pi = step_distribution(&[0.2, 0.0, 0.8], &g, 0.5).unwrap();
        assert!(close(&pi, &[0.4, 0.2, 0.4], 1e-12));
    }

    #[test]
    fn oversized_step_is_an_error() {
        let g = reverse_rates(&[0.5, 0.5], 4.0).unwrap();
        let err = step_distribution(&[0.0, 0.0, 1.0], &g, 0.5).unwrap_err();
        assert!(err.to_string().contains("smaller"));
    }

    #[test]
    fn var_step_matches_scalar_step() {
        let state = Array::new(vec![1, 2, 3], vec![0.2, 0.0, 0.8, 0.1, 0.3, 0.6]).unwrap();
        let probs = Array::new(vec![1, 2, 2], vec![0.5, 0.5, 0.9, 0.1]).unwrap();
        let pi = step_distribution_var(&Var::constant(state.clone()), &Var::constant(probs.clone()), 0.5).unwrap();
        for i in 0..2 {
            let g = reverse_rates(probs.row(i), 1.0).unwrap();
            let want = step_distribution(state.row(i), &g, 0.5).unwrap();
            assert!(close(pi.value().row(i), &want, 1e-14));
        }
    }

    #[test]
    fn forward_mask_frequency() {
        let spec = SequenceSpec::new(4, 1).unwrap();
        let sched = NoiseSchedule::linear(8).unwrap();
        let mut rng = stream(3, 0);
        assert_eq!(forward_mask(&[2], 0.0, &sched, &spec, &mut rng).unwrap(), vec![4]);
        assert_eq!(forward_mask(&[2], 1.0, &sched, &spec, &mut rng).unwrap(), vec![2]);
        assert!(forward_mask(&[2], 1.5, &sched, &spec, &mut rng).is_err());
        let n = 100_000;
        let masked = (0..n)
            .filter(|_| forward_mask(&[1], 0.5, &sched, &spec, &mut rng).unwrap()[0] == 4)
            .count();
        assert!((masked as f64 / n as f64 - 0.5).abs() < 0.01);
    }
}
