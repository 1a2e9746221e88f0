use log::info;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::diffusion::{ancestral_sample, NoiseSchedule, SampleOptions};
use crate::error::{invalid, Result};
use crate::pretrain::{sample_data, train_denoiser, Labeled, PretrainConfig, SyntheticDistribution};
use crate::reward::RewardSpec;
use crate::rng::stream;

/// Label given to sequences at or above the reward quantile.
pub const HIGH_LABEL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfgConfig {
    /// Training schedule and optimizer; `n_train` is the labeled set size.
    pub train: PretrainConfig,
    pub quantile: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for CfgConfig {
    fn default() -> Self {
        Self {
            train: PretrainConfig {
                n_train: 10_000,
                epochs: 5,
                ..Default::default()
            },
            quantile: 0.95,
            n_samples: 640,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CfgOutcome {
    pub model: Denoiser,
    pub threshold: f64,
    pub n_high: usize,
    pub sequences: Vec<Vec<usize>>,
}

/// Binary labels `r(x) ≥ q-quantile` with the quantile threshold.
pub fn quantile_labels(scores: &[f64], quantile: f64) -> Result<(Vec<usize>, f64)> {
    if scores.is_empty() || !(0.0..1.0).contains(&quantile) {
        return invalid("quantile labels need scores and a quantile in [0, 1)");
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((quantile * sorted.len() as f64).ceil() as usize).min(sorted.len() - 1);
    let threshold = sorted[idx];
    let labels = scores.iter().map(|&s| usize::from(s >= threshold)).collect();
    Ok((labels, threshold))
}

/// Trains a two-label conditional denoiser on `(x, 1[r(x) ≥ q])` pairs drawn
/// from `dist` and samples at the high label.
///
/// With `init` the conditional model starts from that unconditional
/// model with a zero label table; otherwise it is trained from scratch.
pub fn cfg_train_and_sample(
    dist: &SyntheticDistribution,
    reward: &RewardSpec,
    init: Option<&Denoiser>,
    schedule: &NoiseSchedule,
    config: &CfgConfig,
) -> Result<CfgOutcome> {
    let mut rng = stream(config.seed, 0);
    let data = sample_data(dist, config.train.n_train, &mut rng)?;
    let holdout = sample_data(dist, config.train.n_holdout, &mut rng)?;
    let (labels, threshold) = quantile_labels(&reward.evaluate_batch(&data), config.quantile)?;
    let holdout_labels: Vec<usize> = reward
        .evaluate_batch(&holdout)
        .iter()
        .map(|&s| usize::from(s >= threshold))
        .collect();
    let n_high = labels.iter().filter(|&&l| l == HIGH_LABEL).count();
    if n_high < 10 {
        return invalid(format!(
            "only {n_high} high-label examples; conditional training needs at least 10"
        ));
    }
    info!(
        "cfg: {n_high} of {} examples above threshold {threshold:.4}",
        data.len()
    );
    let model = match init {
        Some(m) => m.with_labels(2)?,
        None => {
            let crate::denoiser::Architecture::Mlp(c) = config.train.architecture else {
                return invalid("cfg needs the mlp architecture");
            };
            let arch = crate::denoiser::Architecture::Mlp(crate::denoiser::MlpConfig { n_labels: 2, ..c });
            Denoiser::new(dist.spec, arch, config.seed)?
        }
    };
    let train = config.train;
    let trained = train_denoiser(
        model,
        Labeled {
            seqs: &data,
            labels: Some(&labels),
        },
        Labeled {
            seqs: &holdout,
            labels: Some(&holdout_labels),
        },
        &train,
    )?;
    let samples = ancestral_sample(
        &trained.model,
        schedule,
        &SampleOptions {
            batch: config.n_samples,
            seed: config.seed,
            labels: Some(vec![HIGH_LABEL; config.n_samples]),
            record: false,
        },
    )?;
    Ok(CfgOutcome {
        model: trained.model,
        threshold,
        n_high,
        sequences: samples.sequences,
    })
}
