//! Inference-time guidance baselines.

mod cfg;
mod cg;
mod proxy;
mod regression;
mod smc;
mod value;

pub use cfg::{cfg_train_and_sample, CfgConfig, CfgOutcome};
pub use cg::{classifier_guidance_step, pretrained_step, CgVariant};
pub use proxy::{PosteriorMeanProxy, RelaxedRewardProxy, TableProxy, ValueProxy};
pub use regression::{mc_value_regression, RegressionConfig, ValueNet};
pub use smc::{ess, smc_sample, systematic, ParticleSet, Proposal, SmcConfig};
pub use value::{doob_guided_rates, exact_value_backward, value_backward_from_rates, ValueTable};
