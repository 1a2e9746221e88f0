use rand::Rng;

use super::rates::mask_with_prob;
use super::schedule::NoiseSchedule;
use crate::denoiser::Denoiser;
use crate::error::{invalid, Result};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub draws: usize,
}

/// Monte Carlo ELBO of `log p(x)` under the discretized model.
///
/// Each draw picks a grid time `t_j` (stratified over `j ∈ 0..K`), masks
/// every position with probability `m(t_j) = (K − j)/K` and scores the
/// masked positions with weight `1/m(t_j)`. That weight turns the uniform
/// time draw into the per-step unmasking probability of the reverse chain,
/// so the estimate is unbiased for the discrete-time bound, which is tight
/// for a single token.
pub fn approx_log_likelihood(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    x: &[usize],
    n_mc: usize,
    seed: u64,
) -> Result<LikelihoodEstimate> {
    Ok(approx_log_likelihood_batch(model, schedule, std::slice::from_ref(&x.to_vec()), n_mc, seed)?[0])
}

/// Batched [`approx_log_likelihood`]: all sequences share each draw's grid
/// time (one model call per draw) and mask with their own streams.
pub fn approx_log_likelihood_batch(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    xs: &[Vec<usize>],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<LikelihoodEstimate>> {
    if n_mc < 1 {
        return invalid("approx_log_likelihood needs at least one draw");
    }
    let spec = *model.spec();
    for x in xs {
        if x.len() != spec.len || x.iter().any(|&v| v >= spec.n_tokens()) {
            return invalid("likelihood input must be a full-length sequence without mask tokens");
        }
    }
    let k_steps = schedule.steps();
    let mut time_rng = stream(seed, u64::MAX);
    let mut rngs: Vec<StreamRng> = (0..xs.len()).map(|i| stream(seed, i as u64)).collect();
    let mut sums = vec![0.0; xs.len()];
    let mut squares = vec![0.0; xs.len()];
    for d in 0..n_mc {
        let v = (d as f64 + time_rng.random::<f64>()) / n_mc as f64;
        let j = ((v * k_steps as f64) as usize).min(k_steps - 1);
        let m = (k_steps - j) as f64 / k_steps as f64;
        let w = 1.0 / m;
        let masked: Vec<Vec<usize>> = xs
            .iter()
            .zip(rngs.iter_mut())
            .map(|(x, rng)| mask_with_prob(x, m, spec.mask(), rng))
            .collect();
        let probs = model.predict_tokens(&masked, schedule.time(j), None)?;
        for (b, (x, xt)) in xs.iter().zip(&masked).enumerate() {
            let mut value = 0.0;
            for i in 0..spec.len {
                if xt[i] == spec.mask() {
                    value += probs.row(b * spec.len + i)[x[i]].ln();
                }
            }
            value *= w;
            sums[b] += value;
            squares[b] += value * value;
        }
    }
    let n = n_mc as f64;
    Ok(sums
        .iter()
        .zip(&squares)
        .map(|(&s, &q)| {
            let mean = s / n;
            let var = if n_mc > 1 {
                ((q - n * mean * mean) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            LikelihoodEstimate {
                mean,
                std_err: (var / n).sqrt(),
                draws: n_mc,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SequenceSpec;

    #[test]
    fn single_token_bound_is_tight() {
        let spec = SequenceSpec::new(3, 1).unwrap();
        let sched = NoiseSchedule::linear(128).unwrap();
        let p = [0.5, 0.3, 0.2];
        let m = Denoiser::tabular_from_probs(spec, 128, 1.0, true, &p).unwrap();
        for x in 0..3 {
            let est = approx_log_likelihood(&m, &sched, &[x], 400_000, 11).unwrap();
            assert!((est.mean - p[x].ln()).abs() < 0.02, "{x}: {est:?}");
        }
    }

    #[test]
    fn perfect_denoiser_scores_zero() {
        let spec = SequenceSpec::new(2, 1).unwrap();
        let sched = NoiseSchedule::linear(16).unwrap();
        let mut m = Denoiser::tabular_from_probs(spec, 16, 1.0, true, &[0.5, 0.5]).unwrap();
        m.params_mut()[0] = crate::Array::new(vec![1, 2], vec![800.0, 0.0]).unwrap();
        let est = approx_log_likelihood(&m, &sched, &[0], 100, 1).unwrap();
        assert!(est.mean.abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = SequenceSpec::new(2, 1).unwrap();
        let sched = NoiseSchedule::linear(4).unwrap();
        let m = Denoiser::tabular_from_probs(spec, 4, 1.0, true, &[0.5, 0.5]).unwrap();
        assert!(approx_log_likelihood(&m, &sched, &[0], 0, 1).is_err());
        assert!(approx_log_likelihood(&m, &sched, &[2], 5, 1).is_err());
    }
}
