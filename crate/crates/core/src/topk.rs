//! Differentiable Top-K by perturbed maximum.
//!
//! Hard Top-K picks the `K` largest scores and reports their positions in
//! ascending order, so the one-hot matrix `Y ∈ {0,1}^{L×K}` keeps the input
//! order. The smoothed operator averages that matrix over Gaussian
//! perturbations of the score vector:
//!
//! ```text
//! Y_σ(s)   = E_z[ onehot(topk(s + σ z)) ]
//! ∇_s⟨U,Y_σ⟩ = E_z[ ⟨U, onehot(topk(s + σ z))⟩ z ] / σ
//! ```
//!
//! Both expectations are estimated with the same `n` noise vectors, drawn
//! from a ChaCha stream keyed by the configured seed, one stream per sample
//! index. Results are therefore reproducible bit for bit and independent of
//! how many worker threads evaluate the samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// Samples per rayon task. Fixed so that reduction order never depends on
/// the thread count.
const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    #[default]
    Hard,
    Smoothed,
}

/// A hard (one-hot, sorted) or smoothed `L×K` selection matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TopKIndicator {
    len: usize,
    k: usize,
    mode: SelectionMode,
    matrix: Vec<f32>,
    indices: Option<Vec<usize>>,
}

impl TopKIndicator {
    fn from_indices(len: usize, indices: Vec<usize>) -> Self {
        let k = indices.len();
        let mut matrix = vec![0.0; len * k];
        for (col, &row) in indices.iter().enumerate() {
            matrix[row * k + col] = 1.0;
        }
        TopKIndicator {
            len,
            k,
            mode: SelectionMode::Hard,
            matrix,
            indices: Some(indices),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> SelectionMode {
        self.mode
    }

    /// Row-major `L×K` values.
    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.matrix[row * self.k + col]
    }

    /// Sorted selected positions; `None` for smoothed indicators.
    pub fn indices(&self) -> Option<&[usize]> {
        self.indices.as_deref()
    }

    pub fn column_sums(&self) -> Vec<f32> {
        (0..self.k)
            .map(|c| (0..self.len).map(|r| self.at(r, c)).sum())
            .collect()
    }

    /// Total selection mass of each position.
    pub fn row_sums(&self) -> Vec<f32> {
        self.matrix
            .chunks(self.k.max(1))
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len, self.k], self.matrix.clone()).expect("indicator shape")
    }
}

/// Monte-Carlo smoothing parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    pub sigma: f32,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            sigma: 0.0,
            n_samples: 500,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn new(sigma: f32, n_samples: usize, seed: u64) -> Result<Self> {
        let cfg = PerturbConfig {
            sigma,
            n_samples,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(arg_err!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            ));
        }
        if self.n_samples == 0 {
            return Err(arg_err!("n_samples must be at least 1"));
        }
        Ok(())
    }
}

/// Linear decay of σ to zero over a training horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    sigma0: f32,
    total_steps: u64,
}

impl SigmaSchedule {
    pub fn new(sigma0: f32, total_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(arg_err!("sigma schedule needs total_steps > 0"));
        }
        if !sigma0.is_finite() || sigma0 < 0.0 {
            return Err(arg_err!("sigma0 must be finite and >= 0, got {sigma0}"));
        }
        Ok(SigmaSchedule {
            sigma0,
            total_steps,
        })
    }

    pub fn sigma0(&self) -> f32 {
        self.sigma0
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn at(&self, step: u64) -> f32 {
        if step >= self.total_steps {
            return 0.0;
        }
        let frac = 1.0 - step as f64 / self.total_steps as f64;
        (self.sigma0 as f64 * frac) as f32
    }
}

pub fn sigma_at(schedule: &SigmaSchedule, step: u64) -> f32 {
    schedule.at(step)
}

fn check_k(len: usize, k: usize) -> Result<()> {
    if k < 1 || k > len {
        return Err(arg_err!("top-k needs 1 <= K <= L, got K={k}, L={len}"));
    }
    Ok(())
}

fn check_finite(scores: &[f32]) -> Result<()> {
    if scores.iter().all(|s| s.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric("top-k scores must be finite".into()))
    }
}

/// Positions of the `k` largest values, ascending. Ties go to the lower index.
fn topk_positions<T: Copy + PartialOrd>(
    scores: &[T],
    k: usize,
    order: &mut Vec<usize>,
) -> Vec<usize> {
    order.clear();
    order.extend(0..scores.len());
    // The comparator is total on finite inputs; equal scores keep index order.
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Exact sorted Top-K, the inference path.
pub fn hard_topk(scores: &[f32], k: usize) -> Result<TopKIndicator> {
    check_k(scores.len(), k)?;
    check_finite(scores)?;
    let indices = topk_positions(scores, k, &mut Vec::with_capacity(scores.len()));
    Ok(TopKIndicator::from_indices(scores.len(), indices))
}

/// One-hot matrix of a hard indicator: column `k` marks the `k`-th selected
/// position.
pub fn to_onehot(indicator: &TopKIndicator) -> Result<Tensor> {
    if indicator.mode != SelectionMode::Hard {
        return Err(Error::Mode(
            "one-hot extraction needs a hard indicator".into(),
        ));
    }
    Ok(indicator.to_tensor())
}

fn noise_stream(seed: u64, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample as u64);
    rng
}

/// Calls `f(z, selected)` for every perturbation sample in `range`.
fn for_each_sample(
    scores: &[f32],
    k: usize,
    cfg: &PerturbConfig,
    range: std::ops::Range<usize>,
    mut f: impl FnMut(&[f64], &[usize]),
) {
    let len = scores.len();
    let sigma = cfg.sigma as f64;
    let mut z = vec![0.0f64; len];
    let mut perturbed = vec![0.0f64; len];
    let mut order = Vec::with_capacity(len);
    for i in range {
        let mut rng = noise_stream(cfg.seed, i);
        for j in 0..len {
            z[j] = StandardNormal.sample(&mut rng);
            perturbed[j] = scores[j] as f64 + sigma * z[j];
        }
        let picked = topk_positions(&perturbed, k, &mut order);
        f(&z, &picked);
    }
}

fn chunks(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

/// Per-entry selection counts over all perturbation samples.
fn selection_counts(scores: &[f32], k: usize, cfg: &PerturbConfig) -> Vec<u64> {
    let len = scores.len();
    let partial: Vec<Vec<u64>> = chunks(cfg.n_samples)
        .into_par_iter()
        .map(|range| {
            let mut counts = vec![0u64; len * k];
            for_each_sample(scores, k, cfg, range, |_, picked| {
                for (col, &row) in picked.iter().enumerate() {
                    counts[row * k + col] += 1;
                }
            });
            counts
        })
        .collect();
    let mut counts = vec![0u64; len * k];
    for p in partial {
        for (c, v) in counts.iter_mut().zip(p) {
            *c += v;
        }
    }
    counts
}

/// Smoothed indicator `Y_σ`, the Monte-Carlo mean of perturbed hard
/// solutions. With `σ = 0` this is the hard one-hot matrix exactly.
pub fn soft_topk_forward(scores: &[f32], k: usize, cfg: &PerturbConfig) -> Result<TopKIndicator> {
    check_k(scores.len(), k)?;
    check_finite(scores)?;
    cfg.validate()?;
    let len = scores.len();
    if cfg.sigma == 0.0 {
        let hard = hard_topk(scores, k)?;
        return Ok(TopKIndicator {
            mode: SelectionMode::Smoothed,
            indices: None,
            ..hard
        });
    }
    let counts = selection_counts(scores, k, cfg);
    let n = cfg.n_samples as f64;
    let matrix = counts.iter().map(|&c| (c as f64 / n) as f32).collect();
    Ok(TopKIndicator {
        len,
        k,
        mode: SelectionMode::Smoothed,
        matrix,
        indices: None,
    })
}

/// Vector-Jacobian product of the smoothed indicator: the gradient of
/// `⟨upstream, Y_σ(scores)⟩` with respect to the scores. Uses the same noise
/// as [`soft_topk_forward`] under the same config.
pub fn soft_topk_vjp(
    scores: &[f32],
    k: usize,
    cfg: &PerturbConfig,
    upstream: &[f32],
) -> Result<Vec<f32>> {
    check_k(scores.len(), k)?;
    check_finite(scores)?;
    cfg.validate()?;
    let len = scores.len();
    if upstream.len() != len * k {
        return Err(dim_err!(
            "upstream gradient has {} values, expected {}x{}",
            upstream.len(),
            len,
            k
        ));
    }
    if cfg.sigma == 0.0 || upstream.iter().all(|&u| u == 0.0) {
        return Ok(vec![0.0; len]);
    }
    let partial: Vec<Vec<f64>> = chunks(cfg.n_samples)
        .into_par_iter()
        .map(|range| {
            let mut acc = vec![0.0f64; len];
            for_each_sample(scores, k, cfg, range, |z, picked| {
                let inner: f64 = picked
                    .iter()
                    .enumerate()
                    .map(|(col, &row)| upstream[row * k + col] as f64)
                    .sum();
                for (a, zj) in acc.iter_mut().zip(z) {
                    *a += inner * zj;
                }
            });
            acc
        })
        .collect();
    let mut grad = vec![0.0f64; len];
    for p in partial {
        for (g, v) in grad.iter_mut().zip(p) {
            *g += v;
        }
    }
    let scale = 1.0 / (cfg.n_samples as f64 * cfg.sigma as f64);
    Ok(grad.into_iter().map(|g| (g * scale) as f32).collect())
}

fn check_base(scores: &[f32], base: &[f32]) -> Result<()> {
    if base.len() != scores.len() {
        return Err(dim_err!(
            "base scores have {} values, expected {}",
            base.len(),
            scores.len()
        ));
    }
    check_finite(base)
}

/// Likelihood-ratio weight of a sample drawn around `base` when the
/// perturbation is centred on `scores` instead.
fn reweight(scores: &[f32], base: &[f32], sigma: f64, z: &[f64]) -> f64 {
    let mut log_w = 0.0;
    for ((s, b), zj) in scores.iter().zip(base).zip(z) {
        let d = (*s as f64 - *b as f64) / sigma;
        log_w += d * zj - 0.5 * d * d;
    }
    log_w.exp()
}

/// Smoothed indicator at `scores` estimated from the perturbation samples
/// drawn around `base`, each weighted by its likelihood ratio. The samples
/// stay fixed as `scores` moves, so the estimate is smooth in `scores`; at
/// `scores == base` it equals [`soft_topk_forward`] exactly and its
/// gradient there is [`soft_topk_vjp`].
pub fn soft_topk_forward_anchored(
    scores: &[f32],
    base: &[f32],
    k: usize,
    cfg: &PerturbConfig,
) -> Result<TopKIndicator> {
    check_k(scores.len(), k)?;
    check_finite(scores)?;
    check_base(scores, base)?;
    cfg.validate()?;
    if cfg.sigma == 0.0 || scores == base {
        return soft_topk_forward(scores, k, cfg);
    }
    let len = scores.len();
    let sigma = cfg.sigma as f64;
    let partial: Vec<Vec<f64>> = chunks(cfg.n_samples)
        .into_par_iter()
        .map(|range| {
            let mut acc = vec![0.0f64; len * k];
            for_each_sample(base, k, cfg, range, |z, picked| {
                let w = reweight(scores, base, sigma, z);
                for (col, &row) in picked.iter().enumerate() {
                    acc[row * k + col] += w;
                }
            });
            acc
        })
        .collect();
    let mut sum = vec![0.0f64; len * k];
    for p in partial {
        for (a, v) in sum.iter_mut().zip(p) {
            *a += v;
        }
    }
    let n = cfg.n_samples as f64;
    Ok(TopKIndicator {
        len,
        k,
        mode: SelectionMode::Smoothed,
        matrix: sum.into_iter().map(|v| (v / n) as f32).collect(),
        indices: None,
    })
}

/// Gradient of `⟨upstream, Y⟩` for the estimator of
/// [`soft_topk_forward_anchored`].
pub fn soft_topk_vjp_anchored(
    scores: &[f32],
    base: &[f32],
    k: usize,
    cfg: &PerturbConfig,
    upstream: &[f32],
) -> Result<Vec<f32>> {
    check_base(scores, base)?;
    if cfg.sigma == 0.0 || scores == base {
        return soft_topk_vjp(scores, k, cfg, upstream);
    }
    check_k(scores.len(), k)?;
    check_finite(scores)?;
    cfg.validate()?;
    let len = scores.len();
    if upstream.len() != len * k {
        return Err(dim_err!(
            "upstream gradient has {} values, expected {}x{}",
            upstream.len(),
            len,
            k
        ));
    }
    let sigma = cfg.sigma as f64;
    let shift: Vec<f64> = scores
        .iter()
        .zip(base)
        .map(|(s, b)| (*s as f64 - *b as f64) / sigma)
        .collect();
    let partial: Vec<Vec<f64>> = chunks(cfg.n_samples)
        .into_par_iter()
        .map(|range| {
            let mut acc = vec![0.0f64; len];
            for_each_sample(base, k, cfg, range, |z, picked| {
                let inner: f64 = picked
                    .iter()
                    .enumerate()
                    .map(|(col, &row)| upstream[row * k + col] as f64)
                    .sum();
                let w = reweight(scores, base, sigma, z) * inner;
                for ((a, zj), d) in acc.iter_mut().zip(z).zip(&shift) {
                    *a += w * (zj - d);
                }
            });
            acc
        })
        .collect();
    let mut grad = vec![0.0f64; len];
    for p in partial {
        for (g, v) in grad.iter_mut().zip(p) {
            *g += v;
        }
    }
    let scale = 1.0 / (cfg.n_samples as f64 * sigma);
    Ok(grad.into_iter().map(|g| (g * scale) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(scores: &[f32], k: usize) -> Vec<usize> {
        hard_topk(scores, k).unwrap().indices().unwrap().to_vec()
    }

    #[test]
    fn hard_topk_examples() {
        assert_eq!(idx(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(idx(&[5.0], 1), vec![0]);
        assert_eq!(idx(&[0.3, 0.3, 0.3], 2), vec![0, 1]);
    }

    #[test]
    fn hard_topk_rejects_bad_k() {
        assert!(matches!(hard_topk(&[1.0, 2.0], 3), Err(Error::Argument(_))));
        assert!(matches!(hard_topk(&[1.0, 2.0], 0), Err(Error::Argument(_))));
        assert!(matches!(hard_topk(&[f32::NAN], 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn onehot_examples() {
        let t = to_onehot(&TopKIndicator::from_indices(3, vec![1, 2])).unwrap();
        assert_eq!(t.data(), &[0., 0., 1., 0., 0., 1.]);
        let t = to_onehot(&TopKIndicator::from_indices(2, vec![0, 1])).unwrap();
        assert_eq!(t.data(), &[1., 0., 0., 1.]);
        let t = to_onehot(&TopKIndicator::from_indices(4, vec![0, 3])).unwrap();
        assert_eq!(t.data(), &[1., 0., 0., 0., 0., 0., 0., 1.]);
    }

    #[test]
    fn onehot_of_smoothed_is_a_mode_error() {
        let cfg = PerturbConfig::new(0.5, 10, 1).unwrap();
        let soft = soft_topk_forward(&[0.2, 0.1], 1, &cfg).unwrap();
        assert!(matches!(to_onehot(&soft), Err(Error::Mode(_))));
    }

    #[test]
    fn anchored_forward_at_base_is_plain_forward() {
        let cfg = PerturbConfig::new(0.4, 300, 3).unwrap();
        let s = [0.2, 0.9, 0.5, 0.1];
        let plain = soft_topk_forward(&s, 2, &cfg).unwrap();
        let anchored = soft_topk_forward_anchored(&s, &s, 2, &cfg).unwrap();
        assert_eq!(plain.matrix(), anchored.matrix());
    }

    #[test]
    fn zero_sigma_forward_is_hard() {
        let cfg = PerturbConfig::new(0.0, 500, 9).unwrap();
        let s = [0.4, -1.0, 2.5, 0.3, 0.41];
        let soft = soft_topk_forward(&s, 3, &cfg).unwrap();
        let hard = to_onehot(&hard_topk(&s, 3).unwrap()).unwrap();
        assert_eq!(soft.matrix(), hard.data());
    }

    #[test]
    fn symmetric_scores_split_evenly() {
        let cfg = PerturbConfig::new(1.0, 10_000, 3).unwrap();
        let soft = soft_topk_forward(&[0.0, 0.0], 1, &cfg).unwrap();
        assert!((soft.at(0, 0) - 0.5).abs() < 0.02);
        assert!((soft.at(1, 0) - 0.5).abs() < 0.02);
    }

    #[test]
    fn vjp_zero_cases() {
        let s = [0.3, 0.1, 0.7, 0.2];
        let up: Vec<f32> = (0..8).map(|i| i as f32 * 0.1 - 0.3).collect();
        let cfg0 = PerturbConfig::new(0.0, 100, 1).unwrap();
        assert_eq!(soft_topk_vjp(&s, 2, &cfg0, &up).unwrap(), vec![0.0; 4]);
        let cfg = PerturbConfig::new(0.5, 100, 1).unwrap();
        assert_eq!(soft_topk_vjp(&s, 2, &cfg, &[0.0; 8]).unwrap(), vec![0.0; 4]);
        assert!(matches!(
            soft_topk_vjp(&s, 2, &cfg, &[0.0; 7]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let s = [0.3, 0.1, 0.7, 0.2, 0.5];
        let up: Vec<f32> = (0..10).map(|i| (i as f32).sin()).collect();
        let cfg = PerturbConfig::new(0.3, 5000, 42).unwrap();
        let a = soft_topk_forward(&s, 2, &cfg).unwrap();
        let b = soft_topk_forward(&s, 2, &cfg).unwrap();
        assert_eq!(a, b);
        let ga = soft_topk_vjp(&s, 2, &cfg, &up).unwrap();
        let gb = soft_topk_vjp(&s, 2, &cfg, &up).unwrap();
        assert_eq!(ga, gb);
        let other = PerturbConfig { seed: 43, ..cfg };
        assert_ne!(a, soft_topk_forward(&s, 2, &other).unwrap());
    }

    #[test]
    fn sigma_schedule_examples() {
        let sch = SigmaSchedule::new(0.1, 100).unwrap();
        assert_eq!(sigma_at(&sch, 0), 0.1);
        assert_eq!(sigma_at(&sch, 100), 0.0);
        assert_eq!(sigma_at(&sch, 250), 0.0);
        assert!((sigma_at(&sch, 50) - 0.05).abs() < 1e-9);
        assert!(matches!(
            SigmaSchedule::new(0.1, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(PerturbConfig::new(-0.1, 10, 0).is_err());
        assert!(PerturbConfig::new(0.1, 0, 0).is_err());
    }
}
