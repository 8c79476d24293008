//! Min-p truncation sampling.
//!
//! After temperature scaling, tokens whose probability falls below
//! `p_base * p_max` are discarded and the survivors are renormalized. The
//! argmax always survives, so the filter never empties the distribution.

use super::model::NextTokenDist;
use super::tokenizer::TokenId;
use super::SamplerConfig;
use rand::Rng;

/// Surviving `(token, probability)` pairs after temperature scaling and
/// min-p truncation, renormalized to sum to 1. Order follows token id.
pub fn min_p_filter(dist: &NextTokenDist, cfg: &SamplerConfig) -> Vec<(TokenId, f64)> {
    let probs = dist.probs();

    // Temperature rescaling of a probability vector: p^(1/T), renormalized.
    // Equivalent to softmax(logits / T) applied before any truncation.
    let scaled: Vec<f64> = if cfg.temperature == 1.0 {
        probs.to_vec()
    } else {
        let powed: Vec<f64> = probs
            .iter()
            .map(|&p| if p > 0.0 { (p.ln() / cfg.temperature).exp() } else { 0.0 })
            .collect();
        let z: f64 = powed.iter().sum();
        powed.into_iter().map(|p| p / z).collect()
    };

    let p_max = scaled.iter().copied().fold(0.0f64, f64::max);
    let threshold = cfg.p_base * p_max;
    let mut survivors: Vec<(TokenId, f64)> = scaled
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold && p > 0.0)
        .map(|(i, &p)| (TokenId(i as u16), p))
        .collect();
    let total: f64 = survivors.iter().map(|(_, p)| p).sum();
    for (_, p) in survivors.iter_mut() {
        *p /= total;
    }
    survivors
}

/// Draw one token from the min-p-filtered distribution using the caller's
/// generator state.
pub fn sample_min_p<R: Rng>(dist: &NextTokenDist, cfg: &SamplerConfig, rng: &mut R) -> TokenId {
    let survivors = min_p_filter(dist, cfg);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(tok, p) in &survivors {
        acc += p;
        if u < acc {
            return tok;
        }
    }
    // Floating-point slack: the cumulative sum may land a hair under 1.
    survivors.last().expect("min-p filter is never empty").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(probs: &[f64]) -> NextTokenDist {
        NextTokenDist::new(probs.to_vec()).unwrap()
    }

    fn cfg(temperature: f64, p_base: f64, seed: u64) -> SamplerConfig {
        SamplerConfig::new(temperature, p_base, seed).unwrap()
    }

    #[test]
    fn hand_example_keeps_top_two_and_renormalizes() {
        // p_max = 0.6, threshold = 0.06: {0.6, 0.3} survive as (2/3, 1/3).
        let d = dist(&[0.6, 0.3, 0.05, 0.05]);
        let c = cfg(1.0, 0.1, 0);
        let survivors = min_p_filter(&d, &c);
        assert_eq!(
            survivors.iter().map(|(t, _)| t.0).collect::<Vec<_>>(),
            vec![0, 1]
        );
        assert!((survivors[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((survivors[1].1 - 1.0 / 3.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = sample_min_p(&d, &c, &mut rng);
            assert!(t.0 <= 1);
        }
    }

    #[test]
    fn one_hot_distribution_always_returns_that_token() {
        let d = dist(&[0.0, 0.0, 1.0, 0.0]);
        for &(t, p) in &[(1.0, 0.1), (2.5, 0.9), (0.3, 1.0)] {
            let c = cfg(t, p, 5);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..20 {
                assert_eq!(sample_min_p(&d, &c, &mut rng).0, 2);
            }
        }
    }

    #[test]
    fn p_base_one_is_greedy() {
        let d = dist(&[0.2, 0.5, 0.3]);
        let c = cfg(1.0, 1.0, 0);
        let survivors = min_p_filter(&d, &c);
        assert_eq!(survivors, vec![(TokenId(1), 1.0)]);
    }

    #[test]
    fn survivors_contain_argmax_and_sum_to_one() {
        use proptest::prelude::*;
        proptest!(|(raw in proptest::collection::vec(0.0f64..1.0, 2..40),
                    temperature in 0.2f64..3.0,
                    p_base in 0.01f64..1.0)| {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-9);
            let probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let d = NextTokenDist::new(probs.clone()).unwrap();
            let c = SamplerConfig::new(temperature, p_base, 0).unwrap();
            let survivors = min_p_filter(&d, &c);

            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            prop_assert!(survivors.iter().any(|(t, _)| t.index() == argmax));
            let sum: f64 = survivors.iter().map(|(_, p)| p).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        });
    }

    #[test]
    fn temperature_above_one_widens_the_survivor_set() {
        let d = dist(&[0.7, 0.2, 0.06, 0.04]);
        let cold = min_p_filter(&d, &cfg(1.0, 0.1, 0));
        let hot = min_p_filter(&d, &cfg(3.0, 0.1, 0));
        assert!(hot.len() >= cold.len());
    }
}
