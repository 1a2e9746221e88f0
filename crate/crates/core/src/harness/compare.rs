use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Architecture, Denoiser, MlpConfig};
use crate::diffusion::{
    ancestral_sample, approx_log_likelihood_batch, sample_with, NoiseSchedule, SampleOptions, SequenceSpec,
};
use crate::drakes::{finetune, FinetuneConfig, Relaxation, TemperatureSchedule};
use crate::error::{invalid, Error, Result};
use crate::guidance::{
    cfg_train_and_sample, classifier_guidance_step, mc_value_regression, smc_sample, CfgConfig, CgVariant,
    PosteriorMeanProxy, Proposal, RegressionConfig, SmcConfig,
};
use crate::pretrain::{parse_tokens, sample_data, train_pretrained, PretrainConfig, SyntheticDistribution};
use crate::reward::{pearson, twin_reward_split, RewardPair, TwinConfig};
use crate::rng::{derive, stream};

use super::config::KvConfig;
use super::metrics::{kmer_correlation, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pretrained,
    Cg,
    Smc,
    Tds,
    Cfg,
    DrakesNoKl,
    Drakes,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Pretrained,
        Method::Cg,
        Method::Smc,
        Method::Tds,
        Method::Cfg,
        Method::DrakesNoKl,
        Method::Drakes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pretrained => "pretrained",
            Method::Cg => "cg",
            Method::Smc => "smc",
            Method::Tds => "tds",
            Method::Cfg => "cfg",
            Method::DrakesNoKl => "drakes-no-kl",
            Method::Drakes => "drakes",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Synthetic DNA benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub len: usize,
    pub motif: String,
    pub plant_prob: f64,
    pub steps: usize,
    pub pretrain: PretrainConfig,
    pub twin: TwinConfig,
    pub finetune: FinetuneConfig,
    /// Tilt strength of CG, SMC and TDS.
    pub guide_alpha: f64,
    pub smc_particles: usize,
    pub regression: RegressionConfig,
    pub cfg: CfgConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub n_eval: usize,
    pub likelihood_draws: usize,
    pub kmer: usize,
    /// Data samples drawn for the k-mer reference set.
    pub n_reference: usize,
    /// Seed of the data distribution, reward pair and pretraining.
    pub base_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let steps = 128;
        let arch = Architecture::Mlp(MlpConfig {
            width: 32,
            depth: 2,
            time_features: 8,
            n_labels: 0,
            conv_radius: 5,
        });
        let pretrain = PretrainConfig {
            architecture: arch,
            steps,
            epochs: 12,
            batch_size: 128,
            learning_rate: 2e-3,
            n_train: 20_000,
            ..Default::default()
        };
        Self {
            len: 20,
            motif: "TATAAT".into(),
            plant_prob: 0.5,
            steps,
            pretrain,
            twin: TwinConfig {
                entry_scale: 1e-4,
                ..Default::default()
            },
            finetune: FinetuneConfig {
                batch_size: 32,
                iterations: 120,
                learning_rate: 3e-3,
                tau0: 0.3,
                temperature_schedule: TemperatureSchedule::Constant,
                ..FinetuneConfig::dna()
            },
            guide_alpha: 1e-3,
            smc_particles: 32,
            regression: RegressionConfig {
                n_rollouts: 1000,
                epochs: 10,
                ..Default::default()
            },
            cfg: CfgConfig {
                train: PretrainConfig {
                    n_train: 10_000,
                    epochs: 3,
                    ..pretrain
                },
                ..Default::default()
            },
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            n_eval: 640,
            likelihood_draws: 16,
            kmer: 3,
            n_reference: 10_000,
            base_seed: 7,
        }
    }
}

impl BenchConfig {
    /// Reads every benchmark key from `kv`, falling back to the defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let steps = kv.get("steps", d.steps)?;
        let Architecture::Mlp(mlp) = d.pretrain.architecture else {
            unreachable!("default architecture is an mlp")
        };
        let arch = Architecture::Mlp(MlpConfig {
            width: kv.get("width", mlp.width)?,
            depth: kv.get("depth", mlp.depth)?,
            time_features: kv.get("time_features", mlp.time_features)?,
            n_labels: 0,
            conv_radius: kv.get("conv_radius", mlp.conv_radius)?,
        });
        let pretrain = PretrainConfig {
            architecture: arch,
            steps,
            horizon: 1.0,
            epochs: kv.get("pretrain_epochs", d.pretrain.epochs)?,
            batch_size: kv.get("pretrain_batch_size", d.pretrain.batch_size)?,
            learning_rate: kv.get("pretrain_learning_rate", d.pretrain.learning_rate)?,
            n_train: kv.get("n_train", d.pretrain.n_train)?,
            n_holdout: kv.get("n_holdout", d.pretrain.n_holdout)?,
            seed: kv.get("base_seed", d.base_seed)?,
        };
        let schedule = match kv.get("temperature_schedule", "constant".to_string())?.as_str() {
            "linear" => TemperatureSchedule::Linear,
            "constant" => TemperatureSchedule::Constant,
            other => return Err(Error::Config(format!("unknown temperature schedule `{other}`"))),
        };
        let relaxation = match kv.get("relaxation", "carry".to_string())?.as_str() {
            "carry" => Relaxation::Carry,
            "mixture" => Relaxation::Mixture,
            other => return Err(Error::Config(format!("unknown relaxation `{other}`"))),
        };
        let finetune = FinetuneConfig {
            alpha: kv.get("alpha", d.finetune.alpha)?,
            batch_size: kv.get("batch_size", d.finetune.batch_size)?,
            iterations: kv.get("iterations", d.finetune.iterations)?,
            steps,
            tau0: kv.get("tau0", d.finetune.tau0)?,
            temperature_schedule: schedule,
            truncation: kv.get("truncation", d.finetune.truncation)?,
            learning_rate: kv.get("learning_rate", d.finetune.learning_rate)?,
            straight_through: kv.get("straight_through", d.finetune.straight_through)?,
            max_grad_norm: kv.get("max_grad_norm", d.finetune.max_grad_norm)?,
            relaxation,
            gumbel_on_probs: kv.get("gumbel_on_probs", d.finetune.gumbel_on_probs)?,
            flat_kl_weight: kv.get("flat_kl_weight", d.finetune.flat_kl_weight)?,
            ..d.finetune
        };
        let cfg = CfgConfig {
            train: PretrainConfig {
                epochs: kv.get("cfg_epochs", d.cfg.train.epochs)?,
                n_train: kv.get("cfg_n_train", d.cfg.train.n_train)?,
                ..pretrain
            },
            quantile: kv.get("cfg_quantile", d.cfg.quantile)?,
            ..d.cfg
        };
        let methods = kv.list::<String>("methods", &[])?;
        let methods = if methods.is_empty() {
            d.methods.clone()
        } else {
            methods.iter().map(|m| m.parse()).collect::<Result<_>>()?
        };
        Ok(Self {
            len: kv.get("len", d.len)?,
            motif: kv.get("motif", d.motif.clone())?,
            plant_prob: kv.get("plant_prob", d.plant_prob)?,
            steps,
            pretrain,
            twin: TwinConfig {
                width: kv.get("pwm_width", d.twin.width)?,
                entry_scale: kv.get("entry_scale", d.twin.entry_scale)?,
                saturation: kv.get("saturation", d.twin.saturation)?,
                correlation: kv.get("pwm_correlation", d.twin.correlation)?,
            },
            finetune,
            guide_alpha: kv.get("guide_alpha", d.guide_alpha)?,
            smc_particles: kv.get("smc_particles", d.smc_particles)?,
            regression: RegressionConfig {
                n_rollouts: kv.get("value_rollouts", d.regression.n_rollouts)?,
                epochs: kv.get("value_epochs", d.regression.epochs)?,
                ..d.regression
            },
            cfg,
            methods,
            seeds: kv.list("seeds", &d.seeds)?,
            n_eval: kv.get("n_eval", d.n_eval)?,
            likelihood_draws: kv.get("likelihood_draws", d.likelihood_draws)?,
            kmer: kv.get("kmer", d.kmer)?,
            n_reference: kv.get("n_reference", d.n_reference)?,
            base_seed: kv.get("base_seed", d.base_seed)?,
        })
    }

    pub fn spec(&self) -> Result<SequenceSpec> {
        SequenceSpec::new(4, self.len)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(1.0, self.steps)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

/// Flips the pair's sign when the fine-tuning reward correlates positively
/// with the data log-probability, so that high reward is atypical under the
/// data distribution.
fn oriented(pair: RewardPair, dist: &SyntheticDistribution, seed: u64) -> Result<RewardPair> {
    let mut rng = stream(derive(seed, 12), 0);
    let data = sample_data(dist, 10_000, &mut rng)?;
    let log_p = data.iter().map(|x| dist.log_prob(x)).collect::<Result<Vec<_>>>()?;
    let score = pair.finetune.evaluate_batch(&data);
    if pearson(&score, &log_p)? <= 0.0 {
        return Ok(pair);
    }
    Ok(RewardPair {
        finetune: pair.finetune.negated(),
        eval: pair.eval.negated(),
        score_correlation: pair.score_correlation,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Shared state of a benchmark: data distribution, reward pair, pretrained
/// model and the data samples used as the k-mer reference.
#[derive(Debug, Clone)]
pub struct Bench {
    pub config: BenchConfig,
    pub dist: SyntheticDistribution,
    pub rewards: RewardPair,
    pub pretrained: Denoiser,
    pub schedule: NoiseSchedule,
    pub reference: Vec<Vec<usize>>,
}

impl Bench {
    /// Builds the benchmark, pretraining a model unless one is supplied.
    pub fn prepare(config: BenchConfig, pretrained: Option<Denoiser>) -> Result<Self> {
        let spec = config.spec()?;
        let (dist, rewards) = Self::task(&config)?;
        let pretrained = match pretrained {
            Some(m) => {
                if *m.spec() != spec {
                    return invalid("pretrained checkpoint does not match the benchmark sequence shape");
                }
                m
            }
            None => {
                let start = Instant::now();
                let out = train_pretrained(&dist, &config.pretrain)?;
                info!("pretraining took {:.1}s", start.elapsed().as_secs_f64());
                out.model
            }
        };
        let mut rng = stream(derive(config.base_seed, 11), 0);
        let reference = sample_data(&dist, config.n_reference, &mut rng)?;
        Ok(Self {
            schedule: config.schedule()?,
            config,
            dist,
            rewards,
            pretrained,
            reference,
        })
    }

    /// Data distribution and the oriented fine-tuning / evaluation reward
    /// pair of `config`.
    pub fn task(config: &BenchConfig) -> Result<(SyntheticDistribution, RewardPair)> {
        let spec = config.spec()?;
        let dist = SyntheticDistribution::motif_mixture(spec, &config.motif, config.plant_prob)?;
        let rewards = oriented(
            twin_reward_split(&spec, &config.twin, config.base_seed)?,
            &dist,
            config.base_seed,
        )?;
        Ok((dist, rewards))
    }

    /// Sequences of one method under one seed.
    pub fn generate(&self, method: Method, seed: u64) -> Result<Vec<Vec<usize>>> {
        self.generate_with(method, seed, self.config.finetune.alpha)
    }

    /// [`Bench::generate`] with an explicit DRAKES α.
    pub fn generate_with(&self, method: Method, seed: u64, alpha: f64) -> Result<Vec<Vec<usize>>> {
        let c = &self.config;
        let n = c.n_eval;
        let sample_seed = derive(seed, 1);
        match method {
            Method::Pretrained => Ok(self.sample_model(&self.pretrained, sample_seed)?),
            Method::Cg => {
                let proxy = PosteriorMeanProxy {
                    model: &self.pretrained,
                    reward: &self.rewards.finetune,
                    alpha: c.guide_alpha,
                    schedule: &self.schedule,
                };
                sample_with(self.pretrained.spec(), &self.schedule, n, sample_seed, |k, states| {
                    classifier_guidance_step(&self.pretrained, &proxy, states, k, &self.schedule, CgVariant::Taylor)
                })
            }
            Method::Smc | Method::Tds => {
                let twist = mc_value_regression(
                    &self.pretrained,
                    &self.rewards.finetune,
                    c.guide_alpha,
                    &self.schedule,
                    &RegressionConfig {
                        seed: derive(seed, 2),
                        ..c.regression
                    },
                )?;
                let proposal = if method == Method::Tds {
                    Proposal::Guided {
                        variant: CgVariant::Taylor,
                    }
                } else {
                    Proposal::Pretrained
                };
                let p = c.smc_particles;
                let groups = n.div_ceil(p);
                let mut out = Vec::with_capacity(groups * p);
                for g in 0..groups {
                    let cfg = SmcConfig {
                        particles: p,
                        alpha: c.guide_alpha,
                        proposal,
                        ess_fraction: 0.5,
                        seed: derive(sample_seed, g as u64),
                    };
                    let set = smc_sample(&self.pretrained, &self.rewards.finetune, &twist, &self.schedule, &cfg)?;
                    out.extend(set.resample(p, derive(cfg.seed, 1)));
                }
                out.truncate(n);
                Ok(out)
            }
            Method::Cfg => {
                let cfg = CfgConfig {
                    n_samples: n,
                    seed: sample_seed,
                    train: PretrainConfig {
                        seed: derive(seed, 3),
                        ..c.cfg.train
                    },
                    ..c.cfg
                };
                Ok(cfg_train_and_sample(
                    &self.dist,
                    &self.rewards.finetune,
                    Some(&self.pretrained),
                    &self.schedule,
                    &cfg,
                )?
                .sequences)
            }
            Method::DrakesNoKl | Method::Drakes => {
                let alpha = if method == Method::DrakesNoKl { 0.0 } else { alpha };
                let model = self.finetuned(alpha, seed)?;
                self.sample_model(&model, sample_seed)
            }
        }
    }

    /// DRAKES fine-tuned model at KL strength `alpha`.
    pub fn finetuned(&self, alpha: f64, seed: u64) -> Result<Denoiser> {
        let cfg = FinetuneConfig {
            alpha,
            seed: derive(seed, 4),
            ..self.config.finetune
        };
        let start = Instant::now();
        let out = finetune(&self.pretrained, &self.rewards.finetune, &cfg)?;
        let last = out.metrics.last().copied();
        info!(
            "finetune α={alpha} seed={seed}: {:.1}s, final reward {:?}, kl {:?}",
            start.elapsed().as_secs_f64(),
            last.map(|m| m.mean_reward),
            last.map(|m| m.kl)
        );
        Ok(out.model)
    }

    fn sample_model(&self, model: &Denoiser, seed: u64) -> Result<Vec<Vec<usize>>> {
        Ok(ancestral_sample(
            model,
            &self.schedule,
            &SampleOptions {
                batch: self.config.n_eval,
                seed,
                ..Default::default()
            },
        )?
        .sequences)
    }

    /// Metrics of one sample set.
    pub fn evaluate(&self, seqs: &[Vec<usize>], seed: u64) -> Result<Metrics> {
        if seqs.is_empty() {
            return invalid("cannot evaluate an empty sample set");
        }
        let eval = self.rewards.eval.evaluate_batch(seqs);
        let ft = self.rewards.finetune.evaluate_batch(seqs);
        let ll = approx_log_likelihood_batch(
            &self.pretrained,
            &self.schedule,
            seqs,
            self.config.likelihood_draws,
            derive(seed, 5),
        )?;
        let ll: Vec<f64> = ll.iter().map(|e| e.mean).collect();
        let n_tokens = self.pretrained.spec().n_tokens();
        let kmer = kmer_correlation(seqs, &self.reference, self.config.kmer, n_tokens)?;
        let mut distinct = seqs.to_vec();
        distinct.sort();
        distinct.dedup();
        Ok(Metrics {
            eval_reward: Summary::of(&eval),
            finetune_reward: Summary::of(&ft),
            log_likelihood: Summary::of(&ll),
            kmer_correlation: kmer,
            distinct: distinct.len(),
            n: seqs.len(),
        })
    }
}

/// Metrics of one method under one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub eval_reward: Summary,
    pub finetune_reward: Summary,
    pub log_likelihood: Summary,
    pub kmer_correlation: f64,
    pub distinct: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: Method,
    pub seed: u64,
    /// KL strength for DRAKES rows.
    pub alpha: Option<f64>,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
    pub wallclock: f64,
}

/// Mean and standard deviation over seeds of a per-seed scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: Method,
    pub alpha: Option<f64>,
    pub eval_reward_median: Cell,
    pub eval_reward_mean: Cell,
    pub log_likelihood_median: Cell,
    pub kmer_correlation: Cell,
    pub failed_seeds: Vec<u64>,
}

/// Per-seed rows plus the mean(std) table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<Row>,
    pub table: Vec<TableRow>,
}

/// Scalar metrics exported as one CSV each.
pub const METRICS: [&str; 5] = [
    "eval_reward_median",
    "eval_reward_mean",
    "log_likelihood_median",
    "kmer_correlation",
    "distinct",
];

fn metric(m: &Metrics, name: &str) -> f64 {
    match name {
        "eval_reward_median" => m.eval_reward.median,
        "eval_reward_mean" => m.eval_reward.mean,
        "log_likelihood_median" => m.log_likelihood.median,
        "kmer_correlation" => m.kmer_correlation,
        "distinct" => m.distinct as f64,
        _ => f64::NAN,
    }
}

impl EvalReport {
    pub fn from_rows(config: &BenchConfig, rows: Vec<Row>) -> Self {
        let mut keys: Vec<(Method, Option<u64>)> = Vec::new();
        for r in &rows {
            let key = (r.method, r.alpha.map(f64::to_bits));
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let table = keys
            .into_iter()
            .map(|(method, alpha)| {
                let group: Vec<&Row> = rows
                    .iter()
                    .filter(|r| r.method == method && r.alpha.map(f64::to_bits) == alpha)
                    .collect();
                let ok: Vec<&Metrics> = group.iter().filter_map(|r| r.metrics.as_ref()).collect();
                let cell = |name: &str| {
                    let v: Vec<f64> = ok.iter().map(|m| metric(m, name)).collect();
                    let s = Summary::of(&v);
                    Cell {
                        mean: s.mean,
                        std: s.std,
                        n_seeds: v.len(),
                        n_samples: ok.iter().map(|m| m.n).sum(),
                    }
                };
                TableRow {
                    method,
                    alpha: alpha.map(f64::from_bits),
                    eval_reward_median: cell("eval_reward_median"),
                    eval_reward_mean: cell("eval_reward_mean"),
                    log_likelihood_median: cell("log_likelihood_median"),
                    kmer_correlation: cell("kmer_correlation"),
                    failed_seeds: group.iter().filter(|r| r.metrics.is_none()).map(|r| r.seed).collect(),
                }
            })
            .collect();
        Self {
            config_hash: config.hash(),
            seeds: config.seeds.clone(),
            rows,
            table,
        }
    }

    pub fn row(&self, method: Method, alpha: Option<f64>) -> Option<&TableRow> {
        self.table
            .iter()
            .find(|r| r.method == method && (alpha.is_none() || r.alpha == alpha))
    }

    /// Plain-text `mean(std)` table.
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<14} {:>9} {:>22} {:>22} {:>22} {:>18}\n",
            "method", "alpha", "eval reward (median)", "eval reward (mean)", "log-lik (median)", "3-mer corr"
        );
        let fmt = |c: &Cell| format!("{:.4}({:.4})", c.mean, c.std);
        for r in &self.table {
            s += &format!(
                "{:<14} {:>9} {:>22} {:>22} {:>22} {:>18}{}\n",
                r.method.name(),
                r.alpha.map_or("-".into(), |a| format!("{a:e}")),
                fmt(&r.eval_reward_median),
                fmt(&r.eval_reward_mean),
                fmt(&r.log_likelihood_median),
                fmt(&r.kmer_correlation),
                if r.failed_seeds.is_empty() {
                    String::new()
                } else {
                    format!("  failed seeds {:?}", r.failed_seeds)
                }
            );
        }
        s
    }

    /// Writes one CSV per metric, `report.json` and `manifest.json`.
    pub fn write_artifacts(&self, dir: &Path, config: &BenchConfig, wallclock: f64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for name in METRICS {
            let mut csv = String::from("method,alpha,seed,n,value\n");
            for r in &self.rows {
                let alpha = r.alpha.map_or(String::new(), |a| a.to_string());
                match &r.metrics {
                    Some(m) => csv += &format!("{},{alpha},{},{},{}\n", r.method, r.seed, m.n, metric(m, name)),
                    None => csv += &format!("{},{alpha},{},0,failed\n", r.method, r.seed),
                }
            }
            std::fs::write(dir.join(format!("{name}.csv")), csv)?;
        }
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        let manifest = Manifest {
            config_hash: config.hash(),
            revision: revision(),
            seeds: config.seeds.clone(),
            wallclock,
            config: config.clone(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        std::fs::write(dir.join("table.txt"), self.render())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub revision: String,
    pub seeds: Vec<u64>,
    pub wallclock: f64,
    pub config: BenchConfig,
}

/// `git describe`-style revision of the working tree, or the crate version.
pub fn revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short=12", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

fn run_one(bench: &Bench, method: Method, seed: u64, alpha: Option<f64>) -> Row {
    let start = Instant::now();
    let result = match alpha {
        Some(a) => bench.generate_with(method, seed, a),
        None => bench.generate(method, seed),
    }
    .and_then(|seqs| bench.evaluate(&seqs, seed));
    let wallclock = start.elapsed().as_secs_f64();
    match result {
        Ok(m) => {
            info!(
                "{method} seed {seed}: eval reward median {:.4}, log-lik median {:.2}, 3-mer corr {:.3} ({wallclock:.1}s)",
                m.eval_reward.median, m.log_likelihood.median, m.kmer_correlation
            );
            Row {
                method,
                seed,
                alpha,
                metrics: Some(m),
                error: None,
                wallclock,
            }
        }
        Err(e) => {
            warn!("{method} seed {seed} failed: {e}");
            Row {
                method,
                seed,
                alpha,
                metrics: None,
                error: Some(e.to_string()),
                wallclock,
            }
        }
    }
}

/// Runs every configured method under every seed. Failures become rows
/// with an error message; the run continues.
pub fn run_comparison(bench: &Bench) -> EvalReport {
    let mut rows = Vec::new();
    for &method in &bench.config.methods {
        for &seed in &bench.config.seeds {
            let alpha = matches!(method, Method::Drakes).then_some(bench.config.finetune.alpha);
            rows.push(run_one(bench, method, seed, alpha));
        }
    }
    EvalReport::from_rows(&bench.config, rows)
}

/// DRAKES at each KL strength in `alphas` under every seed.
pub fn run_alpha_sweep(bench: &Bench, alphas: &[f64]) -> EvalReport {
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &seed in &bench.config.seeds {
            rows.push(run_one(bench, Method::Drakes, seed, Some(alpha)));
        }
    }
    EvalReport::from_rows(&bench.config, rows)
}

/// One named pass/fail check with the numbers behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn cell_of(report: &EvalReport, method: Method, alpha: Option<f64>, f: fn(&TableRow) -> Cell) -> Option<f64> {
    report
        .row(method, alpha)
        .filter(|r| r.failed_seeds.is_empty())
        .map(|r| f(r).mean)
}

fn compare_check(name: &str, lhs: Option<f64>, rhs: Option<f64>, strict: bool) -> Check {
    let (pass, detail) = match (lhs, rhs) {
        (Some(a), Some(b)) => (if strict { a > b } else { a >= b }, format!("{a:.6} vs {b:.6}")),
        _ => (false, "missing or failed rows".into()),
    };
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

/// Orderings of the method comparison: reward gain over the pretrained
/// model, the reward given up by the KL term, and the naturalness kept by it.
/// Orderings that involve a method absent from the report are skipped.
pub fn ordering_checks(report: &EvalReport) -> Vec<Check> {
    use Method::*;
    let reward = |r: &TableRow| r.eval_reward_median;
    let ll = |r: &TableRow| r.log_likelihood_median;
    let kmer = |r: &TableRow| r.kmer_correlation;
    type Ordering = (&'static str, Method, Method, fn(&TableRow) -> Cell, bool);
    let pairs: [Ordering; 6] = [
        ("eval reward: drakes-no-kl >= drakes", DrakesNoKl, Drakes, reward, false),
        ("eval reward: drakes > pretrained", Drakes, Pretrained, reward, true),
        ("log-likelihood: drakes > drakes-no-kl", Drakes, DrakesNoKl, ll, true),
        (
            "3-mer correlation: drakes > drakes-no-kl",
            Drakes,
            DrakesNoKl,
            kmer,
            true,
        ),
        ("eval reward: smc > pretrained", Smc, Pretrained, reward, true),
        ("eval reward: tds > pretrained", Tds, Pretrained, reward, true),
    ];
    let ran = |m: Method| report.rows.iter().any(|r| r.method == m);
    pairs
        .into_iter()
        .filter(|&(_, a, b, _, _)| ran(a) && ran(b))
        .map(|(name, a, b, f, strict)| {
            compare_check(name, cell_of(report, a, None, f), cell_of(report, b, None, f), strict)
        })
        .collect()
}

/// Monotonicity of DRAKES over increasing `alphas`: mean eval reward
/// non-increasing, median log-likelihood non-decreasing.
pub fn tradeoff_checks(report: &EvalReport, alphas: &[f64]) -> Vec<Check> {
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    for w in sorted.windows(2) {
        let (lo, hi) = (Some(w[0]), Some(w[1]));
        out.push(compare_check(
            &format!("mean eval reward: alpha {:e} >= alpha {:e}", w[0], w[1]),
            cell_of(report, Method::Drakes, lo, |r| r.eval_reward_mean),
            cell_of(report, Method::Drakes, hi, |r| r.eval_reward_mean),
            false,
        ));
        out.push(compare_check(
            &format!("log-likelihood: alpha {:e} >= alpha {:e}", w[1], w[0]),
            cell_of(report, Method::Drakes, hi, |r| r.log_likelihood_median),
            cell_of(report, Method::Drakes, lo, |r| r.log_likelihood_median),
            false,
        ));
    }
    out
}

/// Reads a FASTA-style file of ACGT sequences.
pub fn read_fasta(text: &str) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    let mut current = String::new();
    for line in text.lines().map(str::trim) {
        if line.starts_with('>') {
            if !current.is_empty() {
                out.push(parse_tokens(&std::mem::take(&mut current), 4)?);
            }
        } else {
            current += line;
        }
    }
    if !current.is_empty() {
        out.push(parse_tokens(&current, 4)?);
    }
    Ok(out)
}

/// FASTA text with one record per sequence; tokens are ACGT for
/// four-letter vocabularies and space-separated integers otherwise.
pub fn write_fasta(seqs: &[Vec<usize>], n_tokens: usize, label: &str) -> String {
    let mut s = String::new();
    for (i, x) in seqs.iter().enumerate() {
        s += &format!(">{label}_{i}\n");
        if n_tokens == 4 {
            s.extend(x.iter().map(|&t| ['A', 'C', 'G', 'T'][t]));
        } else {
            s += &x.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        }
        s.push('\n');
    }
    s
}
