//! Shared fixtures for the kernel benchmarks: a benchmark-shaped denoiser,
//! its schedule and a motif reward.

use drakes_core::denoiser::{Architecture, Denoiser, MlpConfig};
use drakes_core::diffusion::{NoiseSchedule, SequenceSpec};
use drakes_core::drakes::{FinetuneConfig, TemperatureSchedule};
use drakes_core::reward::{twin_reward_split, RewardSpec, TwinConfig};

pub struct Fixture {
    pub model: Denoiser,
    pub schedule: NoiseSchedule,
    pub reward: RewardSpec,
    pub finetune: FinetuneConfig,
}

/// DNA-benchmark shapes (N = 4, M = 20) with `steps` grid points and an
/// untrained MLP of the benchmark width.
pub fn fixture(steps: usize, batch: usize) -> Fixture {
    let spec = SequenceSpec::new(4, 20).expect("spec");
    let arch = Architecture::Mlp(MlpConfig {
        width: 32,
        depth: 2,
        ..Default::default()
    });
    let model = Denoiser::new(spec, arch, 1).expect("model");
    let reward = twin_reward_split(&spec, &TwinConfig::default(), 1)
        .expect("reward")
        .finetune;
    Fixture {
        model,
        schedule: NoiseSchedule::new(1.0, steps).expect("schedule"),
        reward,
        finetune: FinetuneConfig {
            batch_size: batch,
            steps,
            truncation: steps / 2,
            tau0: 0.3,
            temperature_schedule: TemperatureSchedule::Constant,
            ..FinetuneConfig::dna()
        },
    }
}
