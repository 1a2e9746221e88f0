//! Terminal rewards. Position-weight-matrix rewards accept relaxed
//! sequences (the mask column carries no weight) and are differentiable.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::SequenceSpec;
use crate::error::{invalid, Error, Result};
use crate::grad::{Array, Var};
use crate::rng::{derive, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardSpec {
    /// Sum over every window of `Σ_o pwm[o, x_{w+o}]`; `pwm` is `[W, N]`.
    LinearPwm { pwm: Array },
    /// `scale·tanh(linear score / scale)`.
    SaturatingMotif { pwm: Array, scale: f64 },
    /// Per-token values for single-token sequences.
    Tabular { values: Vec<f64> },
}

impl RewardSpec {
    pub fn constant(spec: &SequenceSpec, c: f64) -> Self {
        Self::Tabular {
            values: vec![c; spec.n_tokens()],
        }
    }

    pub fn validate(&self, spec: &SequenceSpec) -> Result<()> {
        match self {
            Self::LinearPwm { pwm } | Self::SaturatingMotif { pwm, .. } => {
                let s = pwm.shape();
                if s.len() != 2 || s[1] != spec.n_tokens() || s[0] == 0 {
                    return invalid(format!("pwm must be [width, {}], got {s:?}", spec.n_tokens()));
                }
                if s[0] > spec.len {
                    return invalid(format!("pwm width {} exceeds sequence length {}", s[0], spec.len));
                }
                if let Self::SaturatingMotif { scale, .. } = self {
                    if !(*scale > 0.0) {
                        return invalid("saturation scale must be positive");
                    }
                }
            }
            Self::Tabular { values } => {
                if spec.len != 1 || values.len() != spec.n_tokens() {
                    return invalid("tabular reward needs single-token sequences and one value per token");
                }
            }
        }
        Ok(())
    }

    /// Linear score weights unrolled over positions: entry `i·width + y`
    /// multiplies `x̄_{i,y}`. `width` is `N` or `N + 1` (mask weight 0).
    fn unrolled(&self, m: usize, width: usize) -> Vec<f64> {
        let mut u = vec![0.0; m * width];
        match self {
            Self::LinearPwm { pwm } | Self::SaturatingMotif { pwm, .. } => {
                let (w, n) = (pwm.shape()[0], pwm.shape()[1]);
                for start in 0..=m - w {
                    for o in 0..w {
                        for y in 0..n {
                            u[(start + o) * width + y] += pwm.row(o)[y];
                        }
                    }
                }
            }
            Self::Tabular { values } => u[..values.len()].copy_from_slice(values),
        }
        u
    }

    /// Reward of a batch of relaxed sequences `[B, M, N+1]` (or clean-token
    /// distributions `[B, M, N]`), returned as `[B]`.
    pub fn relaxed(&self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::Shape {
                op: "reward",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (b, m, w) = (s[0], s[1], s[2]);
        let u = Array::new(vec![m * w, 1], self.unrolled(m, w))?;
        let score = x.reshape(&[b, m * w])?.matmul(&Var::constant(u))?.reshape(&[b])?;
        Ok(match self {
            Self::SaturatingMotif { scale, .. } => score.scale(1.0 / scale).tanh().scale(*scale),
            _ => score,
        })
    }

    /// Reward of a hard token sequence.
    pub fn evaluate(&self, seq: &[usize]) -> f64 {
        match self {
            Self::Tabular { values } => values[seq[0]],
            Self::LinearPwm { pwm } | Self::SaturatingMotif { pwm, .. } => {
                let w = pwm.shape()[0];
                let mut score = 0.0;
                for start in 0..=seq.len() - w {
                    for o in 0..w {
                        score += pwm.row(o)[seq[start + o]];
                    }
                }
                match self {
                    Self::SaturatingMotif { scale, .. } => scale * (score / scale).tanh(),
                    _ => score,
                }
            }
        }
    }

    pub fn evaluate_batch(&self, seqs: &[Vec<usize>]) -> Vec<f64> {
        seqs.iter().map(|s| self.evaluate(s)).collect()
    }

    /// Per-token values of a single-token reward.
    pub fn token_values(&self, spec: &SequenceSpec) -> Result<Vec<f64>> {
        if spec.len != 1 {
            return invalid("token values exist for single-token sequences only");
        }
        Ok((0..spec.n_tokens()).map(|y| self.evaluate(&[y])).collect())
    }

    /// `-r`, expressed in the same family.
    pub fn negated(&self) -> Self {
        match self {
            Self::LinearPwm { pwm } => Self::LinearPwm { pwm: pwm.map(|v| -v) },
            Self::SaturatingMotif { pwm, scale } => Self::SaturatingMotif {
                pwm: pwm.map(|v| -v),
                scale: *scale,
            },
            Self::Tabular { values } => Self::Tabular {
                values: values.iter().map(|v| -v).collect(),
            },
        }
    }
}

/// `scale·tanh(Σ_windows Σ_o Σ_y pwm[o, y]·x̄_{w+o, y} / scale)` on relaxed
/// input `[B, M, N+1]`.
pub fn soft_motif_reward(x: &Var, pwm: &Array, scale: f64) -> Result<Var> {
    let s = x.shape();
    if s.len() != 3 {
        return invalid("relaxed input must be [B, M, N+1]");
    }
    let spec = SequenceSpec::new(s[2] - 1, s[1])?;
    let r = RewardSpec::SaturatingMotif {
        pwm: pwm.clone(),
        scale,
    };
    r.validate(&spec)?;
    r.relaxed(x)
}

/// Fine-tuning and evaluation reward pair with correlated PWMs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardPair {
    pub finetune: RewardSpec,
    pub eval: RewardSpec,
    /// Correlation of the two rewards on uniform random sequences.
    pub score_correlation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinConfig {
    pub width: usize,
    /// Standard deviation of PWM entries.
    pub entry_scale: f64,
    /// Saturation scale in units of the linear score standard deviation on
    /// uniform sequences.
    pub saturation: f64,
    /// Entry-level correlation between the two PWMs.
    pub correlation: f64,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            width: 6,
            entry_scale: 1.0,
            saturation: 4.0,
            correlation: 0.9,
        }
    }
}

/// Draws `pwm_a = √ρ·Z + √(1−ρ)·Z_a` and `pwm_b = √ρ·Z + √(1−ρ)·Z_b`, measures
/// the score correlation on 10⁴ uniform sequences and redraws (with derived
/// seeds) until it lies in `[0.85, 0.95]`.
pub fn twin_reward_split(spec: &SequenceSpec, cfg: &TwinConfig, seed: u64) -> Result<RewardPair> {
    let n = spec.n_tokens();
    if cfg.width == 0 || cfg.width > spec.len {
        return invalid(format!("pwm width {} must be in 1..={}", cfg.width, spec.len));
    }
    let rho = cfg.correlation.clamp(0.0, 1.0);
    for attempt in 0..64u64 {
        let mut rng = stream(derive(seed, attempt), 0);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let len = cfg.width * n;
        let common: Vec<f64> = (0..len).map(|_| draw()).collect();
        let make = |draw: &mut dyn FnMut() -> f64| -> Array {
            let data = common
                .iter()
                .map(|c| cfg.entry_scale * (rho.sqrt() * c + (1.0 - rho).sqrt() * draw()))
                .collect();
            Array::new(vec![cfg.width, n], data).expect("pwm shape")
        };
        let pa = make(&mut draw);
        let pb = make(&mut draw);
        let lin = RewardSpec::LinearPwm { pwm: pa.clone() };
        let sd = score_sd(&lin, spec, seed);
        let scale = cfg.saturation * sd.max(f64::MIN_POSITIVE);
        let finetune = RewardSpec::SaturatingMotif { pwm: pa, scale };
        let eval = RewardSpec::SaturatingMotif { pwm: pb, scale };
        let corr = score_correlation(&finetune, &eval, spec, seed)?;
        if (0.85..=0.95).contains(&corr) || rho >= 0.999 {
            return Ok(RewardPair {
                finetune,
                eval,
                score_correlation: corr,
            });
        }
    }
    Err(Error::InvalidArgument(
        "could not draw a reward pair with score correlation in [0.85, 0.95]".into(),
    ))
}

fn uniform_sequences(spec: &SequenceSpec, count: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::Rng;
    let mut rng = stream(seed, 1);
    (0..count)
        .map(|_| (0..spec.len).map(|_| rng.random_range(0..spec.n_tokens())).collect())
        .collect()
}

fn score_sd(r: &RewardSpec, spec: &SequenceSpec, seed: u64) -> f64 {
    let v = r.evaluate_batch(&uniform_sequences(spec, 10_000, seed));
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Pearson correlation of two rewards on 10⁴ uniform random sequences.
pub fn score_correlation(a: &RewardSpec, b: &RewardSpec, spec: &SequenceSpec, seed: u64) -> Result<f64> {
    let seqs = uniform_sequences(spec, 10_000, seed);
    pearson(&a.evaluate_batch(&seqs), &b.evaluate_batch(&seqs))
}

pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return invalid("pearson needs two equal-length nonempty vectors");
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return invalid("pearson correlation undefined for zero-variance input");
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::one_hot;
    use crate::grad::Tape;

    fn pwm() -> Array {
        Array::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.5]).unwrap()
    }

    #[test]
    fn motif_score_in_linear_regime() {
        let spec = SequenceSpec::new(3, 2).unwrap();
        let x = Var::constant(one_hot(&[vec![2, 0]], &spec));
        let r = soft_motif_reward(&x, &pwm(), 1e9).unwrap();
        assert!((r.item() - 3.5).abs() < 1e-9);
    }

    #[test]
    fn negation_flips_every_score() {
        let r = RewardSpec::SaturatingMotif { pwm: pwm(), scale: 2.0 };
        for x in [vec![0, 1], vec![2, 2], vec![1, 0]] {
            assert_eq!(r.negated().evaluate(&x), -r.evaluate(&x));
        }
    }

    #[test]
    fn uniform_input_scores_mean_entry_times_width() {
        let spec = SequenceSpec::new(3, 2).unwrap();
        let x = Var::constant(Array::new(vec![1, 2, 4], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0].repeat(2)).unwrap());
        let r = RewardSpec::LinearPwm { pwm: pwm() };
        r.validate(&spec).unwrap();
        let mean = pwm().sum() / 6.0;
        assert!((r.relaxed(&x).unwrap().item() - mean * 2.0).abs() < 1e-12);
    }

    #[test]
    fn hard_and_relaxed_agree_on_one_hot() {
        let spec = SequenceSpec::new(3, 5).unwrap();
        let r = RewardSpec::SaturatingMotif { pwm: pwm(), scale: 2.0 };
        let seqs = vec![vec![0, 1, 2, 2, 1], vec![2, 2, 0, 1, 0]];
        let relaxed = r.relaxed(&Var::constant(one_hot(&seqs, &spec))).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            assert!((relaxed.data()[b] - r.evaluate(s)).abs() < 1e-12);
        }
    }

    #[test]
    fn width_larger_than_sequence_is_rejected() {
        let x = Var::constant(Array::full(&[1, 1, 4], 0.25));
        assert!(soft_motif_reward(&x, &pwm(), 1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = SequenceSpec::new(3, 4).unwrap();
        let base: Vec<f64> = (0..16).map(|i| 0.1 + ((i * 7) % 5) as f64 * 0.1).collect();
        let x0 = Array::new(vec![1, 4, 4], base).unwrap();
        let r = RewardSpec::SaturatingMotif { pwm: pwm(), scale: 1.5 };
        r.validate(&spec).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = r.relaxed(&x).unwrap().sum().backward().unwrap().get(&x);
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            let mut m = x0.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let f = |a: Array| r.relaxed(&Var::constant(a)).unwrap().item();
            let fd = (f(p) - f(m)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-3));
        }
    }

    #[test]
    fn twin_split_is_deterministic_and_correlated() {
        let spec = SequenceSpec::new(4, 20).unwrap();
        let cfg = TwinConfig::default();
        let a = twin_reward_split(&spec, &cfg, 4).unwrap();
        let b = twin_reward_split(&spec, &cfg, 4).unwrap();
        assert_eq!(a, b);
        let corr = score_correlation(&a.finetune, &a.eval, &spec, 99).unwrap();
        assert!((0.8..=0.97).contains(&corr), "{corr}");
        let swapped = score_correlation(&a.eval, &a.finetune, &spec, 99).unwrap();
        assert!((corr - swapped).abs() < 1e-12);
    }
}
