//! Reward fine-tuning by backpropagating through Gumbel-Softmax relaxed
//! trajectories, with a KL penalty toward the pretrained chain.

mod config;
mod finetune;
mod kl;
mod relax;
mod rollout;

pub use config::{FinetuneConfig, Relaxation, TemperatureSchedule};
pub use finetune::{finetune, finetune_from, Finetuned, IterationMetrics};
pub use kl::{kl_simplified, kl_step, kl_weight, KlValue, KL_FLOOR};
pub use relax::{gumbel_noise, gumbel_softmax, gumbel_softmax_with, hard_argmax, straight_through};
pub use rollout::{rollout_relaxed, Rollout};
