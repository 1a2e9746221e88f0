use crate::error::{invalid, Result};
use crate::reward::pearson;

/// Normalized frequencies of all `N^k` k-mers over every window of every
/// sequence.
pub fn kmer_frequencies(seqs: &[Vec<usize>], k: usize, n_tokens: usize) -> Result<Vec<f64>> {
    if k == 0 || seqs.is_empty() {
        return invalid("k-mer counts need k ≥ 1 and at least one sequence");
    }
    let size = n_tokens.checked_pow(k as u32).filter(|&s| s <= 1 << 24);
    let Some(size) = size else {
        return invalid(format!("{n_tokens}^{k} k-mers is too many to count"));
    };
    let mut counts = vec![0.0; size];
    let mut total = 0.0;
    for s in seqs {
        if s.len() < k {
            return invalid(format!("k = {k} exceeds sequence length {}", s.len()));
        }
        for w in s.windows(k) {
            let mut code = 0;
            for &x in w {
                if x >= n_tokens {
                    return invalid("k-mer input contains mask or out-of-range tokens");
                }
                code = code * n_tokens + x;
            }
            counts[code] += 1.0;
            total += 1.0;
        }
    }
    Ok(counts.iter().map(|c| c / total).collect())
}

/// Pearson correlation of the k-mer frequency vectors of two sample sets.
pub fn kmer_correlation(a: &[Vec<usize>], b: &[Vec<usize>], k: usize, n_tokens: usize) -> Result<f64> {
    pearson(&kmer_frequencies(a, k, n_tokens)?, &kmer_frequencies(b, k, n_tokens)?)
}

/// Mean, median and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                median: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, median, std, n }
    }
}
