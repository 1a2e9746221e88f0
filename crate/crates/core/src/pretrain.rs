//! Synthetic data with exact probabilities and masked-diffusion pretraining.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Architecture, Denoiser};
use crate::diffusion::{mask_with_prob, one_hot, SequenceSpec};
use crate::error::{invalid, Error, Result};
use crate::grad::{Adam, AdamConfig, Array, Tape, Var};
use crate::rng::{categorical, stream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DistributionKind {
    Uniform,
    /// Every position drawn independently from `probs`.
    Independent {
        probs: Vec<f64>,
    },
    /// With probability `plant_prob` the motif is planted at a uniform
    /// offset over a uniform background; otherwise fully uniform.
    MotifMixture {
        motif: Vec<usize>,
        plant_prob: f64,
    },
}

/// Ground-truth data distribution with an exact log-probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDistribution {
    pub spec: SequenceSpec,
    pub kind: DistributionKind,
}

impl SyntheticDistribution {
    pub fn new(spec: SequenceSpec, kind: DistributionKind) -> Result<Self> {
        let n = spec.n_tokens();
        match &kind {
            DistributionKind::Uniform => {}
            DistributionKind::Independent { probs } => {
                if probs.len() != n
                    || probs.iter().any(|&p| !(p >= 0.0))
                    || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return invalid("independent distribution needs one probability per token summing to 1");
                }
            }
            DistributionKind::MotifMixture { motif, plant_prob } => {
                if motif.is_empty() || motif.len() > spec.len {
                    return invalid(format!(
                        "motif length {} must be between 1 and the sequence length {}",
                        motif.len(),
                        spec.len
                    ));
                }
                if motif.iter().any(|&m| m >= n) {
                    return invalid("motif contains a token outside the vocabulary");
                }
                if !(0.0..=1.0).contains(plant_prob) {
                    return invalid("plant probability must lie in [0, 1]");
                }
            }
        }
        Ok(Self { spec, kind })
    }

    /// Parses a motif written in the `ACGT` alphabet (or digits for larger
    /// vocabularies).
    pub fn motif_mixture(spec: SequenceSpec, motif: &str, plant_prob: f64) -> Result<Self> {
        let motif = parse_tokens(motif, spec.n_tokens())?;
        Self::new(spec, DistributionKind::MotifMixture { motif, plant_prob })
    }

    pub fn log_prob(&self, x: &[usize]) -> Result<f64> {
        let (n, m) = (self.spec.n_tokens(), self.spec.len);
        if x.len() != m || x.iter().any(|&v| v >= n) {
            return invalid("log_prob needs a full sequence of real tokens");
        }
        let uniform = -(m as f64) * (n as f64).ln();
        Ok(match &self.kind {
            DistributionKind::Uniform => uniform,
            DistributionKind::Independent { probs } => x.iter().map(|&v| probs[v].ln()).sum(),
            DistributionKind::MotifMixture { motif, plant_prob } => {
                let w = motif.len();
                let offsets = m - w + 1;
                let hits = (0..offsets).filter(|&j| x[j..j + w] == motif[..]).count();
                let background = (n as f64).powi((m - w) as i32);
                let p = (1.0 - plant_prob) * uniform.exp() + plant_prob * hits as f64 / (offsets as f64 * background);
                p.ln()
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let (n, m) = (self.spec.n_tokens(), self.spec.len);
        match &self.kind {
            DistributionKind::Uniform => (0..m).map(|_| rng.random_range(0..n)).collect(),
            DistributionKind::Independent { probs } => (0..m).map(|_| categorical(rng, probs)).collect(),
            DistributionKind::MotifMixture { motif, plant_prob } => {
                let mut x: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
                if rng.random::<f64>() < *plant_prob {
                    let j = rng.random_range(0..=m - motif.len());
                    x[j..j + motif.len()].copy_from_slice(motif);
                }
                x
            }
        }
    }

    /// Total probability over the enumerated sequence space (`Nᴹ ≤ 10⁶`).
    pub fn total_probability(&self) -> Result<f64> {
        let (n, m) = (self.spec.n_tokens(), self.spec.len);
        let size = (n as f64).powi(m as i32);
        if size > 1e6 {
            return invalid(format!("sequence space of size {size:.0} is too large to enumerate"));
        }
        let mut x = vec![0; m];
        let mut total = 0.0;
        for _ in 0..size as usize {
            total += self.log_prob(&x)?.exp();
            for v in x.iter_mut().rev() {
                *v += 1;
                if *v < n {
                    break;
                }
                *v = 0;
            }
        }
        Ok(total)
    }
}

/// `n` i.i.d. draws.
pub fn sample_data<R: Rng + ?Sized>(dist: &SyntheticDistribution, n: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if n < 1 {
        return invalid("sample_data needs n ≥ 1");
    }
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Token string to indices: `ACGT` for four-letter vocabularies, otherwise
/// comma- or space-separated integers.
pub fn parse_tokens(text: &str, n_tokens: usize) -> Result<Vec<usize>> {
    let text = text.trim();
    let out: Vec<usize> = if n_tokens == 4 && text.chars().all(|c| "ACGTacgt".contains(c)) {
        text.chars()
            .map(|c| "ACGT".find(c.to_ascii_uppercase()).expect("checked alphabet"))
            .collect()
    } else {
        text.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad token {s:?}")))
            })
            .collect::<Result<_>>()?
    };
    if out.iter().any(|&v| v >= n_tokens) {
        return invalid(format!("token out of range for a vocabulary of {n_tokens}"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub architecture: Architecture,
    /// Grid of training times; matches the sampler's step count.
    pub steps: usize,
    pub horizon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_train: usize,
    pub n_holdout: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp(Default::default()),
            steps: 128,
            horizon: 1.0,
            epochs: 20,
            batch_size: 128,
            learning_rate: 1e-3,
            n_train: 20_000,
            n_holdout: 1_000,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.epochs == 0 || self.batch_size == 0 || self.n_train == 0 || self.n_holdout == 0 {
            return invalid("pretrain step count, epochs, batch size and data sizes must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.horizon > 0.0) {
            return invalid("pretrain learning rate and horizon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub model: Denoiser,
    pub log: Vec<EpochLog>,
}

/// Masked-diffusion loss of one batch: each sequence gets its own grid time
/// `t_j`, `j ~ U{0..K-1}`, positions are masked with probability
/// `(K − j)/K` and every masked position contributes `−log p_θ(x0⟨i⟩|x_t)`.
/// Normalized per position.
pub fn masked_loss(
    model: &Denoiser,
    params: &[Var],
    batch: &[Vec<usize>],
    steps: usize,
    horizon: f64,
    labels: Option<&[usize]>,
    rng: &mut StreamRng,
) -> Result<Var> {
    let spec = *model.spec();
    let mut masked = Vec::with_capacity(batch.len());
    let mut times = Vec::with_capacity(batch.len());
    let mut targets = Array::zeros(&[batch.len(), spec.len, spec.n_tokens()]);
    for (b, x) in batch.iter().enumerate() {
        let j = rng.random_range(0..steps);
        let xt = mask_with_prob(x, (steps - j) as f64 / steps as f64, spec.mask(), rng);
        for i in 0..spec.len {
            if xt[i] == spec.mask() {
                targets.data_mut()[(b * spec.len + i) * spec.n_tokens() + x[i]] = 1.0;
            }
        }
        masked.push(xt);
        times.push(horizon * j as f64 / steps as f64);
    }
    let logits = model.logits_at(params, &Var::constant(one_hot(&masked, &spec)), &times, labels)?;
    let nll = logits.log_softmax().mul(&Var::constant(targets))?.sum().neg();
    Ok(nll.scale(1.0 / (batch.len() * spec.len) as f64))
}

/// Sequences with optional condition labels.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub seqs: &'a [Vec<usize>],
    pub labels: Option<&'a [usize]>,
}

impl<'a> Labeled<'a> {
    pub fn plain(seqs: &'a [Vec<usize>]) -> Self {
        Self { seqs, labels: None }
    }
}

/// Trains a fresh denoiser on samples of `dist` with Adam.
pub fn train_pretrained(dist: &SyntheticDistribution, config: &PretrainConfig) -> Result<Pretrained> {
    config.validate()?;
    let model = Denoiser::new(dist.spec, config.architecture, config.seed)?;
    let mut data_rng = stream(config.seed, 1);
    let train = sample_data(dist, config.n_train, &mut data_rng)?;
    let holdout = sample_data(dist, config.n_holdout, &mut data_rng)?;
    train_denoiser(model, Labeled::plain(&train), Labeled::plain(&holdout), config)
}

/// Fits `model` to `train` with the masked-diffusion loss. The data sizes in
/// `config` are ignored; the seed drives shuffling and masking.
pub fn train_denoiser(
    mut model: Denoiser,
    train: Labeled,
    holdout: Labeled,
    config: &PretrainConfig,
) -> Result<Pretrained> {
    config.validate()?;
    if train.seqs.is_empty() || holdout.seqs.is_empty() {
        return invalid("training and holdout sets must be nonempty");
    }
    if train.labels.is_some_and(|l| l.len() != train.seqs.len())
        || holdout.labels.is_some_and(|l| l.len() != holdout.seqs.len())
    {
        return invalid("one label per training sequence required");
    }
    let mut order: Vec<usize> = (0..train.seqs.len()).collect();
    let mut shuffle_rng = stream(config.seed, 4);
    let mut opt = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..Default::default()
    });
    let mut mask_rng = stream(config.seed, 2);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<Vec<usize>> = idx.iter().map(|&i| train.seqs[i].clone()).collect();
            let labels: Option<Vec<usize>> = train.labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let tape = Tape::new();
            let params = model.track(&tape);
            let loss = masked_loss(
                &model,
                &params,
                &batch,
                config.steps,
                config.horizon,
                labels.as_deref(),
                &mut mask_rng,
            )?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch}, batch {batches}: {}",
                    loss.item()
                )));
            }
            let grads = loss.backward()?;
            let g: Vec<Array> = params.iter().map(|p| grads.get(p)).collect();
            opt.step(model.params_mut(), &g);
            total += loss.item();
            batches += 1;
        }
        let holdout_loss = holdout_loss(&model, holdout, config)?;
        let entry = EpochLog {
            epoch,
            train_loss: total / batches as f64,
            holdout_loss,
        };
        info!(
            "epoch {epoch}: train {:.5}, holdout {:.5}",
            entry.train_loss, entry.holdout_loss
        );
        log.push(entry);
    }
    Ok(Pretrained { model, log })
}

/// Held-out loss with a fixed masking stream, so epochs are comparable.
pub fn holdout_loss(model: &Denoiser, holdout: Labeled, config: &PretrainConfig) -> Result<f64> {
    let mut rng = stream(config.seed, 3);
    let params = model.constants();
    let mut total = 0.0;
    let chunk = config.batch_size.max(256);
    for (c, batch) in holdout.seqs.chunks(chunk).enumerate() {
        let labels = holdout.labels.map(|l| &l[c * chunk..c * chunk + batch.len()]);
        let loss = masked_loss(model, &params, batch, config.steps, config.horizon, labels, &mut rng)?;
        total += loss.item() * batch.len() as f64;
    }
    Ok(total / holdout.seqs.len() as f64)
}
