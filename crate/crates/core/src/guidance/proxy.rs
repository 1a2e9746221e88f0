use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::grad::{Array, Var};
use crate::reward::RewardSpec;

use super::value::ValueTable;

/// Estimate of `log h_j(x) = V_{t_j}(x)/α` on relaxed states.
///
/// `x` is `[B, M, N+1]` and the result `[B]`. Implementations are
/// differentiable in `x` so the Taylor variant of classifier guidance can
/// use them.
pub trait ValueProxy {
    fn log_value(&self, x: &Var, j: usize) -> Result<Var>;
}

/// Exact single-token table, linear in the relaxed state:
/// `Σ_s x̄_s log h_j(s)`.
#[derive(Debug, Clone, Copy)]
pub struct TableProxy<'a> {
    pub table: &'a ValueTable,
}

impl ValueProxy for TableProxy<'_> {
    fn log_value(&self, x: &Var, j: usize) -> Result<Var> {
        let s = x.shape();
        if s.len() != 3 || s[1] != 1 || s[2] != self.table.h[0].len() {
            return invalid("value table proxy needs single-token states [B, 1, N+1]");
        }
        let Some(row) = self.table.h.get(j) else {
            return invalid(format!("grid index {j} outside the value table"));
        };
        let logs: Vec<f64> = row.iter().map(|v| v.ln()).collect();
        if logs.iter().any(|v| !v.is_finite()) {
            return invalid(format!("value table row {j} has non-positive entries"));
        }
        let w = Var::constant(Array::new(vec![logs.len(), 1], logs)?);
        x.reshape(&[s[0], s[2]])?.matmul(&w)?.reshape(&[s[0]])
    }
}

/// Posterior-mean proxy `r(x̂0)/α` where `x̂0` keeps unmasked tokens and
/// replaces the mask mass by the model's clean-token prediction.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorMeanProxy<'a> {
    pub model: &'a Denoiser,
    pub reward: &'a RewardSpec,
    pub alpha: f64,
    pub schedule: &'a NoiseSchedule,
}

impl ValueProxy for PosteriorMeanProxy<'_> {
    fn log_value(&self, x: &Var, j: usize) -> Result<Var> {
        let spec = self.model.spec();
        let n = spec.n_tokens();
        let probs = self
            .model
            .forward(&self.model.constants(), x, self.schedule.time(j), None)?;
        let tokens: Vec<usize> = (0..n).collect();
        let x0 = x.select_last(&tokens)?.add(&x.select_last(&[n])?.mul(&probs)?)?;
        Ok(self.reward.relaxed(&x0)?.scale(1.0 / self.alpha))
    }
}

/// `r(x̄)/α` on the relaxed state itself; mask mass scores zero.
#[derive(Debug, Clone, Copy)]
pub struct RelaxedRewardProxy<'a> {
    pub reward: &'a RewardSpec,
    pub alpha: f64,
}

impl ValueProxy for RelaxedRewardProxy<'_> {
    fn log_value(&self, x: &Var, _j: usize) -> Result<Var> {
        Ok(self.reward.relaxed(x)?.scale(1.0 / self.alpha))
    }
}
