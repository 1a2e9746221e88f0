//! Reward-directed fine-tuning of masked discrete diffusion models.
//!
//! The crate is organised bottom-up:
//!
//! - [`grad`]: reverse-mode differentiation over dense arrays.
//! - [`diffusion`]: masked diffusion state spaces, schedules, reverse rates,
//!   Euler-discretized sampling and the ELBO likelihood estimate.
//! - [`denoiser`]: the learnable clean-token predictor (residual MLP or
//!   tabular) and its checkpoint format.
//! - [`pretrain`]: synthetic data with exact probabilities and denoiser
//!   pretraining.
//! - [`drakes`]: Gumbel-Softmax relaxed rollouts, the KL penalty and the
//!   reward-backpropagation fine-tuning loop.
//! - [`guidance`]: inference-time baselines (exact value / Doob guidance,
//!   classifier guidance, SMC, TDS, classifier-free guidance).
//! - [`oracle`]: exact single-token references used by the test suites.
//! - [`reward`] and [`harness`]: rewards, metrics and the benchmark driver.

// NaN-rejecting `!(x > 0.0)` checks and index loops over several arrays
// are deliberate throughout the numerics.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod denoiser;
pub mod diffusion;
pub mod drakes;
mod error;
pub mod grad;
pub mod guidance;
pub mod harness;
pub mod oracle;
pub mod pretrain;
pub mod reward;
pub mod rng;

pub use denoiser::{Architecture, Denoiser, MlpConfig};
pub use diffusion::{NoiseSchedule, SequenceSpec, UnmaskRate, Vocabulary};
pub use error::{Error, Result};
pub use grad::{Array, Tape, Var};
pub use reward::RewardSpec;
