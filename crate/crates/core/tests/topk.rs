//! Properties and oracles for hard and perturbed Top-K.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use stts::topk::{
    hard_topk, soft_topk_forward, soft_topk_forward_anchored, soft_topk_vjp,
    soft_topk_vjp_anchored, to_onehot, PerturbConfig,
};

/// Sort (score desc, index asc), take K, sort positionally.
fn brute_force_topk(scores: &[f32], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f32, usize)> = scores.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    out.sort();
    out
}

fn assert_polytope(matrix: &[f32], len: usize, k: usize, indices: &[usize]) {
    for c in 0..k {
        let col: Vec<f32> = (0..len).map(|r| matrix[r * k + c]).collect();
        assert!(col.iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(col.iter().sum::<f32>(), 1.0);
    }
    for r in 0..len {
        assert!(matrix[r * k..(r + 1) * k].iter().sum::<f32>() <= 1.0);
    }
    assert!(indices.windows(2).all(|w| w[0] < w[1]));
}

proptest! {
    #[test]
    fn hard_topk_matches_brute_force(scores in prop::collection::vec(-5.0f32..5.0, 1..13), kseed in 0usize..100) {
        let k = 1 + kseed % scores.len();
        let ind = hard_topk(&scores, k).unwrap();
        let want = brute_force_topk(&scores, k);
        prop_assert_eq!(ind.indices().unwrap(), want.as_slice());
        assert_polytope(ind.matrix(), scores.len(), k, ind.indices().unwrap());
    }

    #[test]
    fn hard_topk_ignores_positive_affine_maps(
        scores in prop::collection::vec(-5.0f32..5.0, 1..13),
        kseed in 0usize..100,
        a in 0.5f32..4.0,
        b in -3.0f32..3.0,
    ) {
        let k = 1 + kseed % scores.len();
        // Only strictly ordered inputs: ties can split under rounding.
        let mut sorted = scores.clone();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        prop_assume!(sorted.windows(2).all(|w| w[1] - w[0] > 1e-3));
        let mapped: Vec<f32> = scores.iter().map(|s| a * s + b).collect();
        let (x, y) = (hard_topk(&scores, k).unwrap(), hard_topk(&mapped, k).unwrap());
        prop_assert_eq!(x.indices(), y.indices());
    }

    #[test]
    fn smoothed_columns_sum_to_one(
        scores in prop::collection::vec(-2.0f32..2.0, 1..10),
        kseed in 0usize..100,
        n in 1usize..300,
        sigma in 0.0f32..2.0,
        seed in any::<u64>(),
    ) {
        let k = 1 + kseed % scores.len();
        let cfg = PerturbConfig::new(sigma, n, seed).unwrap();
        let soft = soft_topk_forward(&scores, k, &cfg).unwrap();
        for s in soft.column_sums() {
            prop_assert!((s - 1.0).abs() < 1e-4);
        }
        prop_assert!(soft.matrix().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(soft.row_sums().iter().all(|&v| v <= 1.0 + 1e-5));
    }
}

#[test]
fn zero_sigma_equals_hard_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000u64 {
        let len = rng.random_range(1..=12);
        let k = rng.random_range(1..=len);
        let scores: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = PerturbConfig::new(0.0, 500, case).unwrap();
        let soft = soft_topk_forward(&scores, k, &cfg).unwrap();
        let hard = to_onehot(&hard_topk(&scores, k).unwrap()).unwrap();
        assert_eq!(soft.matrix(), hard.data());
    }
}

#[test]
fn two_token_probability_matches_closed_form_and_independent_monte_carlo() {
    // P(s0 + z0 > s1 + z1) for iid N(0,1): the difference has variance 2.
    let closed = Normal::new(0.0, 1.0).unwrap().cdf(1.0 / 2f64.sqrt());
    assert!((closed - 0.7602).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 100_000;
    let hits = (0..n)
        .filter(|_| {
            let z0: f64 = rng.sample(rand_distr::StandardNormal);
            let z1: f64 = rng.sample(rand_distr::StandardNormal);
            1.0 + z0 > z1
        })
        .count();
    let independent = hits as f64 / n as f64;
    assert!((independent - closed).abs() < 0.01);

    let cfg = PerturbConfig::new(1.0, n, 2024).unwrap();
    let soft = soft_topk_forward(&[1.0, 0.0], 1, &cfg).unwrap();
    assert!(
        (soft.at(0, 0) as f64 - closed).abs() < 0.01,
        "{}",
        soft.at(0, 0)
    );
}

#[test]
fn raising_a_score_never_lowers_its_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..50u64 {
        let len = rng.random_range(2..=8);
        let k = rng.random_range(1..len);
        let scores: Vec<f32> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
        let target = rng.random_range(0..len);
        let cfg = PerturbConfig::new(0.3, 2000, case).unwrap();
        let mut prev = soft_topk_forward(&scores, k, &cfg).unwrap().row_sums()[target];
        for bump in 1..=5 {
            let mut raised = scores.clone();
            raised[target] += 0.1 * bump as f32;
            // Common random numbers make the mass pathwise monotone.
            let mass = soft_topk_forward(&raised, k, &cfg).unwrap().row_sums()[target];
            assert!(mass >= prev, "case {case}: {mass} < {prev}");
            prev = mass;
        }
    }
}

/// Exact argmax probabilities for Gaussian perturbations by 1-D quadrature:
/// P(i wins) = ∫ φ(z) Π_{j≠i} Φ((s_i - s_j)/σ + z) dz.
fn argmax_probabilities(scores: &[f64], sigma: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (lo, hi, steps) = (-9.0, 9.0, 6000);
    let h = (hi - lo) / steps as f64;
    (0..scores.len())
        .map(|i| {
            let integrand = |z: f64| {
                let mut p = normal.pdf(z);
                for (j, sj) in scores.iter().enumerate() {
                    if j != i {
                        p *= normal.cdf((scores[i] - sj) / sigma + z);
                    }
                }
                p
            };
            // Simpson's rule.
            let mut acc = integrand(lo) + integrand(hi);
            for s in 1..steps {
                let w = if s % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * integrand(lo + s as f64 * h);
            }
            acc * h / 3.0
        })
        .collect()
}

#[test]
fn top1_vjp_matches_quadrature_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 100_000;
    for case in 0..8u64 {
        let len = rng.random_range(2..=6);
        let scores: Vec<f32> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
        let upstream: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma = 0.5;
        let cfg = PerturbConfig::new(sigma as f32, n, 900 + case).unwrap();
        let vjp = soft_topk_vjp(&scores, 1, &cfg, &upstream).unwrap();

        let s64: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let value = |s: &[f64]| -> f64 {
            argmax_probabilities(s, sigma)
                .iter()
                .zip(&upstream)
                .map(|(p, u)| p * *u as f64)
                .sum()
        };
        for j in 0..len {
            let h = 1e-4;
            let mut plus = s64.clone();
            plus[j] += h;
            let mut minus = s64.clone();
            minus[j] -= h;
            let exact = (value(&plus) - value(&minus)) / (2.0 * h);
            // Standard error of the score-function estimator is at most
            // max|u| / (σ √n) ≈ 0.0063 here; allow five of them.
            assert!(
                (vjp[j] as f64 - exact).abs() < 0.032,
                "case {case} coord {j}: vjp {} exact {exact}",
                vjp[j]
            );
        }
    }
}

#[test]
fn vjp_is_unbiased_against_finite_differences_within_sampling_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let step = 1e-2f32;
    for case in 0..6u64 {
        let len = rng.random_range(3..=8);
        let k = rng.random_range(2..=len.min(4));
        let scores: Vec<f32> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
        let upstream: Vec<f32> = (0..len * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = PerturbConfig::new(0.5, n, 70 + case).unwrap();
        let vjp = soft_topk_vjp(&scores, k, &cfg, &upstream).unwrap();
        let probe = |s: &[f32]| -> f64 {
            soft_topk_forward(s, k, &cfg)
                .unwrap()
                .matrix()
                .iter()
                .zip(&upstream)
                .map(|(y, u)| *y as f64 * *u as f64)
                .sum()
        };
        for j in 0..len {
            let mut plus = scores.clone();
            plus[j] += step;
            let mut minus = scores.clone();
            minus[j] -= step;
            let fd = (probe(&plus) - probe(&minus)) / (2.0 * step as f64);
            // Sampling error of the two estimators combined reaches ~0.03 on
            // coordinates with large gradients at this n; allow about 4 of those.
            assert!(
                (vjp[j] as f64 - fd).abs() < 0.12,
                "case {case} coord {j}: vjp {} fd {fd}",
                vjp[j]
            );
        }
    }
}

#[test]
fn anchored_finite_differences_match_vjp_closely() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let step = 1e-2f32;
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let len = rng.random_range(2..=8);
        let k = rng.random_range(1..=len.min(4));
        let scores: Vec<f32> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
        let upstream: Vec<f32> = (0..len * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = PerturbConfig::new(0.5, 100_000, 500 + case).unwrap();
        let vjp = soft_topk_vjp(&scores, k, &cfg, &upstream).unwrap();
        let probe = |s: &[f32]| -> f64 {
            soft_topk_forward_anchored(s, &scores, k, &cfg)
                .unwrap()
                .matrix()
                .iter()
                .zip(&upstream)
                .map(|(y, u)| *y as f64 * *u as f64)
                .sum()
        };
        for j in 0..len {
            let mut plus = scores.clone();
            plus[j] += step;
            let mut minus = scores.clone();
            minus[j] -= step;
            let fd = (probe(&plus) - probe(&minus)) / (2.0 * step as f64);
            if fd.abs().max(vjp[j].abs() as f64) > 1e-3 {
                let rel = (vjp[j] as f64 - fd).abs() / fd.abs().max(vjp[j].abs() as f64);
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst < 0.05, "worst relative error {worst}");
    eprintln!("worst {worst}");
}

#[test]
fn anchored_vjp_is_the_anchored_derivative_off_base() {
    let scores = [0.3f32, 0.7, 0.5, 0.1];
    let base = [0.35f32, 0.6, 0.5, 0.2];
    let upstream = [0.5f32, -1.0, 0.2, 0.3, -0.4, 0.9, 0.1, -0.2];
    let cfg = PerturbConfig::new(0.5, 20_000, 8).unwrap();
    let vjp = soft_topk_vjp_anchored(&scores, &base, 2, &cfg, &upstream).unwrap();
    let probe = |s: &[f32]| -> f64 {
        soft_topk_forward_anchored(s, &base, 2, &cfg)
            .unwrap()
            .matrix()
            .iter()
            .zip(&upstream)
            .map(|(y, u)| *y as f64 * *u as f64)
            .sum()
    };
    for j in 0..4 {
        let h = 1e-2f32;
        let mut plus = scores;
        plus[j] += h;
        let mut minus = scores;
        minus[j] -= h;
        let fd = (probe(&plus) - probe(&minus)) / (2.0 * h as f64);
        assert!(
            (vjp[j] as f64 - fd).abs() < 1e-3 * (1.0 + fd.abs()),
            "{j}: {} vs {fd}",
            vjp[j]
        );
    }
}
