use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TemperatureSchedule {
    /// `τ(t) = τ₀·T/(t + Δt)`, capped at `10·τ₀`.
    #[default]
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Relaxation {
    /// π is built from the relaxed state itself and every position is
    /// re-drawn through Gumbel-Softmax at every step.
    Mixture,
    /// Unmasked mass is kept; the mask mass `x̄_Mask` is redistributed by a
    /// Gumbel-Softmax draw from `[u p̂θ, 1 − u]`.
    #[default]
    Carry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// KL strength α.
    pub alpha: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Step count K; `Δt = horizon / K`.
    pub steps: usize,
    pub horizon: f64,
    pub tau0: f64,
    pub temperature_schedule: TemperatureSchedule,
    /// Steps `1..=truncation` carry no gradient.
    pub truncation: usize,
    pub learning_rate: f64,
    pub straight_through: bool,
    pub relaxation: Relaxation,
    /// Add the Gumbel noise to π instead of `log π`.
    pub gumbel_on_probs: bool,
    /// Weight the KL sum by `γ(t)/T` instead of `γ(t)Δt`.
    pub flat_kl_weight: bool,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::dna()
    }
}

impl FinetuneConfig {
    /// DNA-benchmark defaults.
    pub fn dna() -> Self {
        Self {
            alpha: 0.001,
            batch_size: 128,
            iterations: 1000,
            steps: 128,
            horizon: 1.0,
            tau0: 1.0,
            temperature_schedule: TemperatureSchedule::Linear,
            truncation: 50,
            learning_rate: 1e-3,
            straight_through: true,
            relaxation: Relaxation::Carry,
            gumbel_on_probs: false,
            flat_kl_weight: false,
            max_grad_norm: 0.0,
            seed: 0,
        }
    }

    /// Protein-like defaults.
    pub fn protein() -> Self {
        Self {
            alpha: 0.0003,
            steps: 50,
            truncation: 25,
            tau0: 0.5,
            ..Self::dna()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return invalid("alpha must be nonnegative");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return invalid("steps and batch size must be positive");
        }
        if self.truncation > self.steps {
            return invalid(format!(
                "truncation step {} exceeds the step count {}",
                self.truncation, self.steps
            ));
        }
        if !(self.tau0 > 0.0) || !(self.horizon > 0.0) || !(self.learning_rate > 0.0) {
            return invalid("tau0, horizon and learning rate must be positive");
        }
        if !(self.max_grad_norm >= 0.0) {
            return invalid("max_grad_norm must be nonnegative");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.horizon, self.steps)
    }

    /// Gumbel temperature used for the state at time `t`.
    pub fn temperature(&self, t: f64, schedule: &NoiseSchedule) -> f64 {
        match self.temperature_schedule {
            TemperatureSchedule::Constant => self.tau0,
            TemperatureSchedule::Linear => (self.tau0 * schedule.horizon() / (t + schedule.dt())).min(10.0 * self.tau0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let d = FinetuneConfig::dna();
        assert_eq!(
            (d.steps, d.truncation, d.tau0, d.alpha, d.batch_size, d.iterations),
            (128, 50, 1.0, 0.001, 128, 1000)
        );
        let p = FinetuneConfig::protein();
        assert_eq!((p.steps, p.truncation, p.tau0, p.alpha), (50, 25, 0.5, 0.0003));
        assert!(d.validate().is_ok() && p.validate().is_ok());
    }

    #[test]
    fn linear_temperature_is_capped_and_decreasing() {
        let c = FinetuneConfig::dna();
        let s = c.schedule().unwrap();
        assert_eq!(c.temperature(0.0, &s), 10.0);
        let end = c.temperature(1.0, &s);
        assert!((end - 1.0 / (1.0 + s.dt())).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for k in 0..=s.steps() {
            let tau = c.temperature(s.time(k), &s);
            assert!(tau <= last);
            last = tau;
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            FinetuneConfig {
                alpha: -1.0,
                ..Default::default()
            },
            FinetuneConfig {
                truncation: 200,
                ..Default::default()
            },
            FinetuneConfig {
                tau0: 0.0,
                ..Default::default()
            },
        ];
        assert!(bad.iter().all(|c| c.validate().is_err()));
    }
}
