//! Masked discrete diffusion: state spaces, schedule, reverse rates,
//! Euler-discretized sampling and the ELBO.

mod elbo;
mod rates;
mod sample;
mod schedule;
mod trajectory;

pub use elbo::{approx_log_likelihood, approx_log_likelihood_batch, LikelihoodEstimate};
pub(crate) use rates::mask_with_prob;
pub use rates::{
    check_simplex, forward_mask, masked_step, one_hot, reverse_rates, step_distribution, step_distribution_var,
    Generator,
};
pub use sample::{ancestral_sample, sample_with, SampleOptions, Samples};
pub use schedule::{NoiseSchedule, SequenceSpec, UnmaskRate, Vocabulary};
pub use trajectory::{Trajectory, TrajectoryStep};
