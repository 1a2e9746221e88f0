//! Clean-token predictors `E[x0 = y | x_t]`.
//!
//! Relaxed inputs are mixed into the embedding table
//! (`embed(x̄) = Σ_y x̄_y·embed(y)`), so the same network accepts one-hot
//! hard states and Gumbel-Softmax samples.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};

use crate::diffusion::{check_simplex, one_hot, SequenceSpec};
use crate::error::{invalid, Error, Result};
use crate::grad::{Array, Tape, Var};
use crate::rng::stream;

/// Residual MLP hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub width: usize,
    pub depth: usize,
    /// Number of sinusoidal time features.
    pub time_features: usize,
    /// Size of the condition-label table; 0 for unconditional models.
    pub n_labels: usize,
    /// Reach of the per-channel convolution over neighboring positions in
    /// each block; 0 disables it.
    #[serde(default)]
    pub conv_radius: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 3,
            time_features: 8,
            n_labels: 0,
            conv_radius: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Mlp(MlpConfig),
    /// Logit table indexed by grid step; single-token sequences only.
    /// With `shared`, one row serves every step.
    Tabular {
        steps: usize,
        horizon: f64,
        shared: bool,
    },
}

/// A denoiser: architecture, sequence shape and parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    spec: SequenceSpec,
    arch: Architecture,
    params: Vec<Array>,
}

impl Denoiser {
    /// Freshly initialized model. Weights are centered uniform with scale
    /// `1/√fan_in`; the output head starts at zero so initial predictions
    /// are uniform.
    pub fn new(spec: SequenceSpec, arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, 0);
        let params = match arch {
            Architecture::Mlp(c) => {
                if c.width == 0 || c.time_features == 0 || !c.time_features.is_multiple_of(2) {
                    return invalid("mlp width must be positive and time_features even and positive");
                }
                let (s, m, d, n) = (spec.n_states(), spec.len, c.width, spec.n_tokens());
                let mut p = vec![
                    uniform(&mut rng, &[s, d], s),
                    uniform(&mut rng, &[m, d], d),
                    uniform(&mut rng, &[c.time_features, d], c.time_features),
                ];
                if c.n_labels > 0 {
                    p.push(uniform(&mut rng, &[c.n_labels, d], d));
                }
                for _ in 0..c.depth {
                    p.push(uniform(&mut rng, &[m * d, d], m * d));
                    if c.conv_radius > 0 {
                        let k = 2 * c.conv_radius + 1;
                        p.push(uniform(&mut rng, &[k, d], k));
                    }
                    p.push(uniform(&mut rng, &[d, d], d));
                    p.push(Array::zeros(&[d]));
                    p.push(uniform(&mut rng, &[d, d], d));
                    p.push(Array::zeros(&[d]));
                }
                p.push(Array::zeros(&[d, n]));
                p.push(Array::zeros(&[n]));
                p
            }
            Architecture::Tabular { steps, horizon, shared } => {
                if spec.len != 1 {
                    return invalid("tabular denoiser supports single-token sequences only");
                }
                if steps == 0 || !(horizon > 0.0) {
                    return invalid("tabular denoiser needs a positive step count and horizon");
                }
                let rows = if shared { 1 } else { steps };
                vec![Array::zeros(&[rows, spec.n_tokens()])]
            }
        };
        Ok(Self { spec, arch, params })
    }

    /// Tabular model whose every row predicts `probs`.
    pub fn tabular_from_probs(
        spec: SequenceSpec,
        steps: usize,
        horizon: f64,
        shared: bool,
        probs: &[f64],
    ) -> Result<Self> {
        if probs.len() != spec.n_tokens() || probs.iter().any(|&p| !(p > 0.0)) {
            return invalid("tabular probabilities must be positive, one per token");
        }
        let mut model = Self::new(spec, Architecture::Tabular { steps, horizon, shared }, 0)?;
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let n = spec.n_tokens();
        for row in model.params[0].data_mut().chunks_exact_mut(n) {
            row.copy_from_slice(&logits);
        }
        Ok(model)
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Array] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Array>) -> Result<()> {
        if params.len() != self.params.len() || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape()) {
            return invalid("parameter list does not match the architecture");
        }
        self.params = params;
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Array::len).sum()
    }

    /// Deep copy used as the frozen reference. Parameters are plain arrays,
    /// so nothing recorded against the original can reach the copy.
    pub fn clone_frozen(&self) -> Self {
        self.clone()
    }

    /// Conditional copy of an unconditional MLP with a zero label table of
    /// `n_labels` rows, so every label initially predicts like the original.
    pub fn with_labels(&self, n_labels: usize) -> Result<Self> {
        let Architecture::Mlp(c) = self.arch else {
            return invalid("condition labels need the mlp architecture");
        };
        if c.n_labels != 0 || n_labels == 0 {
            return invalid("with_labels expects an unconditional model and at least one label");
        }
        let mut params = self.params.clone();
        params.insert(3, Array::zeros(&[n_labels, c.width]));
        Ok(Self {
            spec: self.spec,
            arch: Architecture::Mlp(MlpConfig { n_labels, ..c }),
            params,
        })
    }

    /// Parameters registered as leaves of `tape`.
    pub fn track(&self, tape: &Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Parameters as untracked constants.
    pub fn constants(&self) -> Vec<Var> {
        self.params.iter().map(|p| Var::constant(p.clone())).collect()
    }

    /// Unnormalized scores `[B, M, N]` for relaxed inputs `x` (`[B, M, N+1]`)
    /// at time `t`. `labels` holds one condition label per batch row.
    pub fn logits(&self, params: &[Var], x: &Var, t: f64, labels: Option<&[usize]>) -> Result<Var> {
        self.logits_at(params, x, &[t], labels)
    }

    /// [`Denoiser::logits`] with one time per batch row (or a single
    /// shared time).
    pub fn logits_at(&self, params: &[Var], x: &Var, times: &[f64], labels: Option<&[usize]>) -> Result<Var> {
        let (m, s, n) = (self.spec.len, self.spec.n_states(), self.spec.n_tokens());
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != m || shape[2] != s {
            return Err(Error::Shape {
                op: "denoiser",
                lhs: shape.to_vec(),
                rhs: vec![0, m, s],
            });
        }
        check_simplex(x.value(), 1e-6)?;
        if params.len() != self.params.len() {
            return invalid("parameter count does not match the architecture");
        }
        let b = shape[0];
        if times.len() != 1 && times.len() != b {
            return invalid("need one time per batch row or a single shared time");
        }
        match self.arch {
            Architecture::Mlp(c) => {
                let d = c.width;
                let mut it = params.iter();
                let mut next = || it.next().expect("parameter layout");
                let embed = next();
                let pos = next();
                let time_w = next();
                let mut h = x.reshape(&[b * m, s])?.matmul(embed)?.reshape(&[b, m, d])?;
                h = h.add(pos)?;
                let feats = Var::constant(time_features(times, c.time_features));
                h = h.add(&feats.matmul(time_w)?.reshape(&[times.len(), 1, d])?)?;
                if c.n_labels > 0 {
                    let table = next();
                    if let Some(labels) = labels {
                        if labels.len() != b {
                            return invalid("one condition label per batch row required");
                        }
                        let e = table.index_select(labels)?.reshape(&[b, 1, d])?;
                        h = h.add(&e)?;
                    }
                }
                for _ in 0..c.depth {
                    let ctx = next();
                    let mixed = h.reshape(&[b, m * d])?.matmul(ctx)?.reshape(&[b, 1, d])?;
                    h = h.add(&mixed)?;
                    if c.conv_radius > 0 {
                        h = h.add(&local_conv(&h, next(), c.conv_radius)?)?;
                    }
                    let (w1, b1, w2, b2) = (next(), next(), next(), next());
                    let flat = h.reshape(&[b * m, d])?;
                    let inner = flat.matmul(w1)?.add(b1)?.tanh().matmul(w2)?.add(b2)?;
                    h = flat.add(&inner)?.reshape(&[b, m, d])?;
                }
                let (head_w, head_b) = (next(), next());
                h.reshape(&[b * m, d])?.matmul(head_w)?.add(head_b)?.reshape(&[b, m, n])
            }
            Architecture::Tabular { steps, horizon, shared } => {
                let rows: Vec<usize> = (0..b)
                    .map(|i| {
                        let t = times[if times.len() == 1 { 0 } else { i }];
                        if shared {
                            0
                        } else {
                            step_index(t, steps, horizon)
                        }
                    })
                    .collect();
                params[0].index_select(&rows)?.reshape(&[b, 1, n])
            }
        }
    }

    /// Predicted clean-token distribution `[B, M, N]`; rows sum to one.
    pub fn forward(&self, params: &[Var], x: &Var, t: f64, labels: Option<&[usize]>) -> Result<Var> {
        Ok(self.logits(params, x, t, labels)?.softmax())
    }

    pub fn forward_at(&self, params: &[Var], x: &Var, times: &[f64], labels: Option<&[usize]>) -> Result<Var> {
        Ok(self.logits_at(params, x, times, labels)?.softmax())
    }

    /// Untracked prediction on relaxed inputs.
    pub fn predict(&self, x: &Array, t: f64, labels: Option<&[usize]>) -> Result<Array> {
        let out = self.forward(&self.constants(), &Var::constant(x.clone()), t, labels)?;
        Ok(out.value().clone())
    }

    /// Untracked prediction on hard token sequences (mask = `N`).
    pub fn predict_tokens(&self, seqs: &[Vec<usize>], t: f64, labels: Option<&[usize]>) -> Result<Array> {
        self.predict(&one_hot(seqs, &self.spec), t, labels)
    }
}

/// Grid row of the tabular model for time `t`.
fn step_index(t: f64, steps: usize, horizon: f64) -> usize {
    let k = (t / horizon * steps as f64).round();
    (k.max(0.0) as usize).min(steps - 1)
}

/// `[len(times), F]` sinusoidal features.
/// Per-channel convolution along the position axis with zero padding:
/// `out[b, i] = Σ_o w[o] ⊙ h[b, i + o − r]`.
fn local_conv(h: &Var, w: &Var, r: usize) -> Result<Var> {
    let (b, m, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let padded = Var::concat(&[h.reshape(&[b * m, d])?, Var::constant(Array::zeros(&[1, d]))])?;
    let mut out: Option<Var> = None;
    for o in 0..=2 * r {
        let rows: Vec<usize> = (0..b * m)
            .map(|row| {
                let j = (row % m + o) as isize - r as isize;
                if (0..m as isize).contains(&j) {
                    row - row % m + j as usize
                } else {
                    b * m
                }
            })
            .collect();
        let term = padded.index_select(&rows)?.mul(&w.index_select(&[o])?.reshape(&[d])?)?;
        out = Some(match out {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    out.expect("kernel has at least one tap").reshape(&[b, m, d])
}

fn time_features(times: &[f64], f: usize) -> Array {
    let mut v = Vec::with_capacity(f * times.len());
    for &t in times {
        for i in 0..f / 2 {
            let w = std::f64::consts::PI * (i + 1) as f64;
            v.push((w * t).sin());
            v.push((w * t).cos());
        }
    }
    Array::new(vec![times.len(), f], v).expect("time feature shape")
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Array {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-a..a)).collect();
    Array::new(shape.to_vec(), data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Denoiser {
        let spec = SequenceSpec::new(4, 5).unwrap();
        let cfg = MlpConfig {
            width: 8,
            depth: 2,
            time_features: 4,
            n_labels: 3,
            conv_radius: 2,
        };
        let mut m = Denoiser::new(spec, Architecture::Mlp(cfg), 7).unwrap();
        // give the head some weight so outputs are not uniform
        let k = m.params.len();
        m.params[k - 2] = uniform(&mut stream(1, 1), &[8, 4], 8);
        m
    }

    fn random_relaxed(b: usize, m: usize, s: usize, seed: u64) -> Array {
        let mut rng = stream(seed, 0);
        let mut data = Vec::new();
        for _ in 0..b * m {
            let row: Vec<f64> = (0..s).map(|_| rng.random_range(0.01..1.0)).collect();
            let z: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / z));
        }
        Array::new(vec![b, m, s], data).unwrap()
    }

    #[test]
    fn local_conv_matches_a_direct_loop() {
        let (b, m, d, r) = (2, 5, 3, 2);
        let h = uniform(&mut stream(4, 0), &[b, m, d], 1);
        let w = uniform(&mut stream(4, 1), &[2 * r + 1, d], 1);
        let out = local_conv(&Var::constant(h.clone()), &Var::constant(w.clone()), r).unwrap();
        for bi in 0..b {
            for i in 0..m {
                for c in 0..d {
                    let mut want = 0.0;
                    for o in 0..=2 * r {
                        let j = i as isize + o as isize - r as isize;
                        if (0..m as isize).contains(&j) {
                            want += w.data()[o * d + c] * h.data()[(bi * m + j as usize) * d + c];
                        }
                    }
                    let got = out.value().data()[(bi * m + i) * d + c];
                    assert!((got - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn outputs_are_distributions() {
        let m = small();
        let x = random_relaxed(3, 5, 5, 2);
        let p = m.predict(&x, 0.3, None).unwrap();
        assert_eq!(p.shape(), &[3, 5, 4]);
        for row in p.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn one_hot_equals_hard_tokens() {
        let m = small();
        let seqs = vec![vec![0, 4, 2, 4, 1]];
        let a = m.predict_tokens(&seqs, 0.5, None).unwrap();
        let b = m.predict(&one_hot(&seqs, m.spec()), 0.5, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn off_simplex_input_rejected() {
        let m = small();
        let mut x = random_relaxed(1, 5, 5, 3);
        x.data_mut()[0] += 1e-3;
        assert!(m.predict(&x, 0.1, None).is_err());
    }

    #[test]
    fn zero_head_gives_uniform_predictions() {
        let spec = SequenceSpec::new(4, 3).unwrap();
        let m = Denoiser::new(spec, Architecture::Mlp(MlpConfig::default()), 1).unwrap();
        let p = m.predict_tokens(&[vec![4, 4, 4]], 0.0, None).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn position_embedding_breaks_permutation_symmetry() {
        let m = small();
        let x = random_relaxed(1, 5, 5, 4);
        let p = m.predict(&x, 0.2, None).unwrap();
        let mut rev = Vec::new();
        for i in (0..5).rev() {
            rev.extend_from_slice(x.row(i));
        }
        let xr = Array::new(vec![1, 5, 5], rev).unwrap();
        let pr = m.predict(&xr, 0.2, None).unwrap();
        let diff: f64 = (0..5)
            .map(|i| {
                p.row(i)
                    .iter()
                    .zip(pr.row(4 - i))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn clone_is_isolated_and_detached() {
        let mut m = small();
        let frozen = m.clone_frozen();
        let x = random_relaxed(2, 5, 5, 5);
        let before = frozen.predict(&x, 0.4, None).unwrap();
        assert_eq!(before, m.predict(&x, 0.4, None).unwrap());
        m.params_mut()[0].data_mut()[0] += 1.0;
        assert_eq!(before, frozen.predict(&x, 0.4, None).unwrap());

        let tape = Tape::new();
        let live = m.track(&tape);
        let pre = frozen.constants();
        let xv = Var::constant(x);
        let a = m.forward(&live, &xv, 0.4, None).unwrap();
        let b = frozen.forward(&pre, &xv, 0.4, None).unwrap();
        let loss = a.mul(&b).unwrap().sum();
        let g = loss.backward().unwrap();
        assert!(pre.iter().all(|p| g.get(p).max_abs() == 0.0));
        assert!(live.iter().any(|p| g.get(p).max_abs() > 0.0));
    }

    #[test]
    fn zeroed_label_table_matches_unconditional_pass() {
        let mut m = small();
        let x = random_relaxed(2, 5, 5, 6);
        m.params_mut()[3] = Array::zeros(&[3, 8]);
        let c = m.predict(&x, 0.6, Some(&[2, 1])).unwrap();
        let u = m.predict(&x, 0.6, None).unwrap();
        assert_eq!(c, u);
    }

    #[test]
    fn tabular_returns_its_row() {
        let spec = SequenceSpec::new(3, 1).unwrap();
        let m = Denoiser::tabular_from_probs(spec, 8, 1.0, false, &[0.5, 0.3, 0.2]).unwrap();
        let p = m.predict_tokens(&[vec![3], vec![1]], 0.25, None).unwrap();
        for row in p.rows() {
            assert!((row[0] - 0.5).abs() < 1e-15 && (row[2] - 0.2).abs() < 1e-15);
        }
        assert_eq!(step_index(0.25, 8, 1.0), 2);
        assert_eq!(step_index(1.0, 8, 1.0), 7);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = small();
        let x = random_relaxed(1, 5, 5, 8);
        let weights = random_relaxed(1, 5, 4, 9);
        let f = |x: &Array| -> f64 {
            let p = m.predict(x, 0.3, Some(&[1])).unwrap();
            p.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let p = m.forward(&m.constants(), &xv, 0.3, Some(&[1])).unwrap();
        let loss = p.mul(&Var::constant(weights.clone())).unwrap().sum();
        let g = loss.backward().unwrap().get(&xv);
        let h = 1e-6;
        for i in 0..x.len() {
            // perturb along a simplex-preserving direction: e_i − e_j
            let j = (i / 5) * 5 + (i + 1) % 5;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xp.data_mut()[j] -= h;
            xm.data_mut()[i] -= h;
            xm.data_mut()[j] += h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = g.data()[i] - g.data()[j];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {an}");
        }
    }
}
