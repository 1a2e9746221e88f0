use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Real tokens `0..n` plus the mask state at index `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    n_tokens: usize,
}

impl Vocabulary {
    pub fn new(n_tokens: usize) -> Result<Self> {
        if n_tokens < 2 {
            return invalid(format!("vocabulary needs at least 2 tokens, got {n_tokens}"));
        }
        Ok(Self { n_tokens })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    /// Real tokens plus mask.
    pub fn n_states(&self) -> usize {
        self.n_tokens + 1
    }

    pub fn mask(&self) -> usize {
        self.n_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub vocab: Vocabulary,
    pub len: usize,
}

impl SequenceSpec {
    pub fn new(n_tokens: usize, len: usize) -> Result<Self> {
        if len == 0 {
            return invalid("sequence length must be at least 1");
        }
        Ok(Self {
            vocab: Vocabulary::new(n_tokens)?,
            len,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.vocab.n_tokens()
    }

    pub fn n_states(&self) -> usize {
        self.vocab.n_states()
    }

    pub fn mask(&self) -> usize {
        self.vocab.mask()
    }
}

/// Unmasking rate γ(t) of the reverse chain.
#[derive(Clone, Default)]
pub enum UnmaskRate {
    /// γ(t) = 1 / (T − t + Δt): unmask times are uniform on the grid and the
    /// final step unmasks with probability one.
    #[default]
    Reciprocal,
    /// γ = 0 everywhere except the final step, where everything unmasks.
    FinalStep,
    /// Arbitrary rate `γ(t)`.
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for UnmaskRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Reciprocal => f.write_str("Reciprocal"),
            Self::FinalStep => f.write_str("FinalStep"),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Time grid and unmasking rate.
///
/// Time runs from `t = 0` (every position masked) to `t = T` (data). Step
/// `k ∈ 1..=K` moves the chain from `t_{k-1}` to `t_k = kΔt`; its rates are
/// evaluated at `t_k` while the denoiser sees the state at `t_{k-1}`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    horizon: f64,
    steps: usize,
    rate: UnmaskRate,
}

impl NoiseSchedule {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        Self::with_rate(horizon, steps, UnmaskRate::Reciprocal)
    }

    pub fn with_rate(horizon: f64, steps: usize, rate: UnmaskRate) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return invalid(format!("horizon must be positive, got {horizon}"));
        }
        if steps == 0 {
            return invalid("schedule needs at least one step");
        }
        Ok(Self { horizon, steps, rate })
    }

    /// Unit horizon with `steps` steps.
    pub fn linear(steps: usize) -> Result<Self> {
        Self::new(1.0, steps)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn rate_kind(&self) -> &UnmaskRate {
        &self.rate
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Grid time `t_k`.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    /// γ(t).
    pub fn rate(&self, t: f64) -> f64 {
        let dt = self.dt();
        match &self.rate {
            UnmaskRate::Reciprocal => 1.0 / (self.horizon - t + dt),
            UnmaskRate::FinalStep => {
                if t >= self.horizon - 0.5 * dt {
                    1.0 / dt
                } else {
                    0.0
                }
            }
            UnmaskRate::Custom(f) => f(t),
        }
    }

    /// Per-step unmask probability γ(t_k)·Δt for step `k ∈ 1..=K`.
    pub fn unmask_prob(&self, k: usize) -> f64 {
        let p = self.rate(self.time(k)) * self.dt();
        // absorb the rounding of 1/(Δt)·Δt at the final step
        if (p - 1.0).abs() < 1e-12 {
            1.0
        } else {
            p
        }
    }

    /// Checked version of [`Self::unmask_prob`].
    pub fn checked_unmask_prob(&self, k: usize) -> Result<f64> {
        let p = self.unmask_prob(k);
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            if p > 1.0 {
                return Err(Error::StepTooLarge {
                    product: p,
                    time: self.time(k),
                });
            }
            return invalid(format!("unmask rate must be nonnegative, got γΔt = {p}"));
        }
        Ok(p)
    }

    /// Probability that a position is still masked at time `t` under the
    /// forward coupling, `m(t) = 1 − t/T`.
    pub fn mask_prob(&self, t: f64) -> f64 {
        (1.0 - t / self.horizon).clamp(0.0, 1.0)
    }

    /// Π_k (1 − γ(t_k)Δt): probability that a position never unmasks.
    pub fn survival(&self) -> f64 {
        (1..=self.steps).map(|k| 1.0 - self.unmask_prob(k)).product()
    }

    /// Checks every step for valid transition mass and full unmasking.
    pub fn validate(&self) -> Result<()> {
        for k in 1..=self.steps {
            self.checked_unmask_prob(k)?;
        }
        let s = self.survival();
        if s.abs() > 1e-12 {
            return Err(Error::Schedule(format!(
                "positions remain masked at t = T with probability {s}"
            )));
        }
        Ok(())
    }
}
