//! The global variational posterior: a categorical over SLPs mixed with the
//! truncated local guides.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{log_mean_exp, log_sum_exp, Draw};
use crate::engine::SdviResult;
use crate::error::{Result, SdviError};
use crate::ppl::Program;

/// Mixture probabilities `λ_k` with their logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub probs: Vec<f64>,
    #[serde(with = "crate::nonfinite::vec")]
    pub log_probs: Vec<f64>,
}

impl MixtureWeights {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest weight; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Draws an index by inversion.
    pub fn sample_index<G: Rng + ?Sized>(&self, rng: &mut G) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }
}

/// `λ_k ∝ exp(L_k)`, computed in log space. `-inf` and NaN estimates get
/// weight exactly zero.
pub fn optimal_weights(elbos: &[f64]) -> Result<MixtureWeights> {
    let clean: Vec<f64> = elbos
        .iter()
        .map(|&l| if l.is_nan() { f64::NEG_INFINITY } else { l })
        .collect();
    let lse = log_sum_exp(&clean);
    if !lse.is_finite() {
        return Err(SdviError::AllElbosInfinite);
    }
    // Renormalizing removes the rounding error of `lse` itself, which would
    // otherwise scale every weight by the same factor.
    let shifted: Vec<f64> = clean
        .iter()
        .map(|&l| if l == f64::NEG_INFINITY { f64::NEG_INFINITY } else { l - lse })
        .collect();
    let raw: Vec<f64> = shifted.iter().map(|l| l.exp()).collect();
    let total: f64 = raw.iter().sum();
    let probs = raw.iter().map(|r| r / total).collect();
    let log_total = total.ln();
    let log_probs = shifted.iter().map(|l| l - log_total).collect();
    Ok(MixtureWeights { probs, log_probs })
}

/// `Σ_k λ_k (L_k − log λ_k)` with `0·log 0 = 0`.
pub fn global_elbo(weights: &[f64], elbos: &[f64]) -> f64 {
    weights
        .iter()
        .zip(elbos)
        .filter(|(w, _)| **w > 0.0)
        .map(|(&w, &l)| w * (l - w.ln()))
        .sum()
}

/// Exposes a pointwise predictive log-density on held-out data.
pub trait Predictive: Program {
    fn held_out_len(&self) -> usize;

    /// `log p(y_j | draws)` for every held-out point `j`, where `draws` are
    /// the raw draws of one execution.
    fn predictive_log_density(&self, draws: &[Draw]) -> Vec<f64>;
}

/// `Σ_j log((1/S) Σ_s exp(ℓ_{s,j}))` for a matrix of per-sample rows.
pub fn lppd_from_pointwise(rows: &[Vec<f64>]) -> f64 {
    if rows.is_empty() {
        return f64::NEG_INFINITY;
    }
    let m = rows[0].len();
    let mut column = Vec::with_capacity(rows.len());
    (0..m)
        .map(|j| {
            column.clear();
            column.extend(rows.iter().map(|r| r[j]));
            log_mean_exp(&column)
        })
        .sum()
}

/// One posterior draw: an SLP index, then a truncated sample from its guide,
/// returned as full program draws.
pub fn posterior_sample<P: Program, G: Rng + ?Sized>(
    result: &SdviResult,
    program: &P,
    rng: &mut G,
) -> Result<(usize, Vec<Draw>)> {
    let k = result.weights.sample_index(rng);
    let target = &result.targets[k];
    let (x, _) = result.guides[k]
        .sample(target, program, rng)
        .map_err(|e| SdviError::RejectionExhausted {
            slp: k,
            attempts: e.attempts,
        })?;
    Ok((k, target.draws(&x)))
}

/// LPPD of the held-out data under `n_samples` posterior draws.
pub fn lppd<P: Predictive, G: Rng + ?Sized>(
    result: &SdviResult,
    model: &P,
    n_samples: usize,
    rng: &mut G,
) -> Result<f64> {
    let mut rows = Vec::with_capacity(n_samples);
    for _ in 0..n_samples.max(1) {
        let (_, draws) = posterior_sample(result, model, rng)?;
        rows.push(model.predictive_log_density(&draws));
    }
    Ok(lppd_from_pointwise(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logsumexp_oracle(xs: &[f64]) -> f64 {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn weights_examples() {
        let w = optimal_weights(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(w.probs[0], 0.5, epsilon = 1e-15);
        let w = optimal_weights(&[0.0, 3f64.ln()]).unwrap();
        assert_abs_diff_eq!(w.probs[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(w.probs[1], 0.75, epsilon = 1e-15);
        let w = optimal_weights(&[-1000.0, 0.0, f64::NEG_INFINITY]).unwrap();
        assert!(w.probs[0] >= 0.0 && w.probs[0] < 1e-300);
        assert_eq!(w.probs[1], 1.0);
        assert_eq!(w.probs[2], 0.0);
        assert_eq!(w.log_probs[2], f64::NEG_INFINITY);
        assert_abs_diff_eq!(w.log_probs[0], -1000.0, epsilon = 1e-9);
    }

    #[test]
    fn all_infinite_is_failure() {
        assert!(matches!(
            optimal_weights(&[f64::NEG_INFINITY, f64::NAN]),
            Err(SdviError::AllElbosInfinite)
        ));
        assert!(matches!(optimal_weights(&[]), Err(SdviError::AllElbosInfinite)));
    }

    #[test]
    fn global_elbo_examples() {
        let l = [0.0, 0.0];
        let w = optimal_weights(&l).unwrap();
        assert_abs_diff_eq!(global_elbo(&w.probs, &l), 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(global_elbo(&[1.0], &[-2.43]), -2.43, epsilon = 1e-15);

        let l = [0.0, 3f64.ln()];
        let uniform = global_elbo(&[0.5, 0.5], &l);
        let direct = 0.5 * (0.0 - 0.5f64.ln()) + 0.5 * (3f64.ln() - 0.5f64.ln());
        assert_abs_diff_eq!(uniform, direct, epsilon = 1e-15);
        assert_abs_diff_eq!(uniform, 1.242_453_324_894, epsilon = 1e-9);
        assert!(uniform < 4f64.ln());
    }

    #[test]
    fn zero_weight_on_infinite_elbo_contributes_nothing() {
        let l = [-1.0, f64::NEG_INFINITY];
        let w = optimal_weights(&l).unwrap();
        assert_eq!(global_elbo(&w.probs, &l), -1.0);
    }

    #[test]
    fn sample_index_frequencies() {
        let w = optimal_weights(&[0.0, 3f64.ln()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let ones = (0..n).filter(|_| w.sample_index(&mut rng) == 1).count() as f64;
        let se = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((ones - 7500.0).abs() <= 3.0 * se, "{ones}");

        let w = MixtureWeights {
            probs: vec![1.0, 0.0],
            log_probs: vec![0.0, f64::NEG_INFINITY],
        };
        assert!((0..1000).all(|_| w.sample_index(&mut rng) == 0));
    }

    #[test]
    fn lppd_reductions() {
        let single = vec![vec![-1.0, -2.0, -0.5]];
        assert_abs_diff_eq!(lppd_from_pointwise(&single), -3.5, epsilon = 1e-15);
        let same = vec![vec![-1.0, -2.0]; 7];
        assert_abs_diff_eq!(lppd_from_pointwise(&same), -3.0, epsilon = 1e-12);
        let mixed = vec![vec![0.0], vec![2f64.ln()]];
        assert_abs_diff_eq!(lppd_from_pointwise(&mixed), 1.5f64.ln(), epsilon = 1e-15);
    }

    fn simplex(raw: &[f64]) -> Vec<f64> {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|r| r / total).collect()
    }

    proptest! {
        #[test]
        fn optimal_weights_normalize(l in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let w = optimal_weights(&l).unwrap();
            prop_assert!((w.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn optimal_value_is_logsumexp(l in prop::collection::vec(-30.0f64..30.0, 1..12)) {
            let w = optimal_weights(&l).unwrap();
            prop_assert!((global_elbo(&w.probs, &l) - logsumexp_oracle(&l)).abs() <= 1e-12);
        }

        #[test]
        fn optimal_weights_beat_any_simplex_point(
            l in prop::collection::vec(-10.0f64..10.0, 2..8),
            raw in prop::collection::vec(0.001f64..1.0, 8),
        ) {
            let w = optimal_weights(&l).unwrap();
            let other = simplex(&raw[..l.len()]);
            prop_assert!(global_elbo(&w.probs, &l) >= global_elbo(&other, &l) - 1e-12);
        }
    }
}
