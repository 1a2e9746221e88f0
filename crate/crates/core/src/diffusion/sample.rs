use rand::Rng;

use super::rates::{masked_step, one_hot};
use super::schedule::{NoiseSchedule, SequenceSpec};
use super::trajectory::{Trajectory, TrajectoryStep};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::grad::Array;
use crate::rng::{categorical, stream, StreamRng};

#[derive(Debug, Clone, Default)]
pub struct SampleOptions {
    pub batch: usize,
    pub seed: u64,
    /// One condition label per batch element.
    pub labels: Option<Vec<usize>>,
    /// Record a full trajectory per element (calls the model every step).
    pub record: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Samples {
    pub sequences: Vec<Vec<usize>>,
    pub trajectories: Vec<Trajectory>,
}

/// Batched ancestral sampling of the Euler-discretized reverse chain.
///
/// Element `b` draws from stream `b` of `seed`, so outputs do not depend on
/// the batch size. Each step first decides which masked positions unmask
/// (probability `γ(t_k)Δt`) and then draws their tokens from the model's
/// prediction at `t_{k-1}`; this is the same categorical as π and skips
/// model calls on steps where nothing unmasks.
pub fn ancestral_sample(model: &Denoiser, schedule: &NoiseSchedule, opts: &SampleOptions) -> Result<Samples> {
    let spec = *model.spec();
    let mask = spec.mask();
    let mut rngs: Vec<StreamRng> = (0..opts.batch).map(|b| stream(opts.seed, b as u64)).collect();
    let mut states = vec![vec![mask; spec.len]; opts.batch];
    let mut trajectories = Vec::new();
    if opts.record {
        trajectories = states
            .iter()
            .map(|s| Trajectory {
                steps: vec![TrajectoryStep {
                    step: 0,
                    time: 0.0,
                    pi: rows(s, &spec),
                    state: rows(s, &spec),
                }],
            })
            .collect();
    }
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); opts.batch];
    for k in 1..=schedule.steps() {
        let u = schedule.checked_unmask_prob(k)?;
        let t_prev = schedule.time(k - 1);
        for (b, rng) in rngs.iter_mut().enumerate() {
            chosen[b].clear();
            for (i, &x) in states[b].iter().enumerate() {
                if x == mask && (u >= 1.0 || rng.random::<f64>() < u) {
                    chosen[b].push(i);
                }
            }
        }
        let active: Vec<usize> = (0..opts.batch)
            .filter(|&b| opts.record || !chosen[b].is_empty())
            .collect();
        if active.is_empty() {
            continue;
        }
        let sub: Vec<Vec<usize>> = active.iter().map(|&b| states[b].clone()).collect();
        let labels: Option<Vec<usize>> = opts.labels.as_ref().map(|l| active.iter().map(|&b| l[b]).collect());
        let probs = model.predict_tokens(&sub, t_prev, labels.as_deref())?;
        for (r, &b) in active.iter().enumerate() {
            if opts.record {
                let onehot = one_hot(std::slice::from_ref(&states[b]), &spec);
                let mut pi = vec![vec![0.0; spec.n_states()]; spec.len];
                for (i, row) in pi.iter_mut().enumerate() {
                    masked_step(onehot.row(i), probs.row(r * spec.len + i), u, row);
                }
                for &i in &chosen[b] {
                    states[b][i] = categorical(&mut rngs[b], probs.row(r * spec.len + i));
                }
                trajectories[b].steps.push(TrajectoryStep {
                    step: k,
                    time: schedule.time(k),
                    pi,
                    state: rows(&states[b], &spec),
                });
            } else {
                for &i in &chosen[b] {
                    states[b][i] = categorical(&mut rngs[b], probs.row(r * spec.len + i));
                }
            }
        }
    }
    ensure_unmasked(&states, mask)?;
    Ok(Samples {
        sequences: states,
        trajectories,
    })
}

/// Sampling under an arbitrary per-step policy. `policy(k, states)` returns
/// π as a `[B, M, N+1]` array for step `k`; each position then draws its
/// next state from π with its element's stream.
pub fn sample_with<F>(
    spec: &SequenceSpec,
    schedule: &NoiseSchedule,
    batch: usize,
    seed: u64,
    mut policy: F,
) -> Result<Vec<Vec<usize>>>
where
    F: FnMut(usize, &[Vec<usize>]) -> Result<Array>,
{
    let mut rngs: Vec<StreamRng> = (0..batch).map(|b| stream(seed, b as u64)).collect();
    let mut states = vec![vec![spec.mask(); spec.len]; batch];
    for k in 1..=schedule.steps() {
        schedule.checked_unmask_prob(k)?;
        let pi = policy(k, &states)?;
        for (b, rng) in rngs.iter_mut().enumerate() {
            for i in 0..spec.len {
                if states[b][i] == spec.mask() {
                    states[b][i] = categorical(rng, pi.row(b * spec.len + i));
                }
            }
        }
    }
    ensure_unmasked(&states, spec.mask())?;
    Ok(states)
}

fn ensure_unmasked(states: &[Vec<usize>], mask: usize) -> Result<()> {
    let left = states.iter().flatten().filter(|&&x| x == mask).count();
    if left > 0 {
        return Err(Error::Schedule(format!(
            "{left} positions still masked at t = T; the unmask rate must reach γΔt = 1 at the final step"
        )));
    }
    Ok(())
}

fn rows(seq: &[usize], spec: &SequenceSpec) -> Vec<Vec<f64>> {
    seq.iter()
        .map(|&x| {
            let mut r = vec![0.0; spec.n_states()];
            r[x] = 1.0;
            r
        })
        .collect()
}
