use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{log_mean_exp, DistKind, Draw, ObsValue};
use crate::mixture::Predictive;
use crate::ppl::{Handler, Interrupt, Program};
use crate::rng::stream;

use super::{lift, Oracle};

/// `K ~ Poisson(9) + 1`, `μ_k ~ N(0, 10 I)`, `y_i ~ (1/K) Σ_k N(μ_k, 0.1 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmConfig {
    pub dim: usize,
    /// Total points before the train/test split.
    pub n: usize,
    pub k_true: usize,
    pub seed: u64,
    /// Fraction of points used for training.
    pub train_fraction: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            dim: 2,
            n: 200,
            k_true: 3,
            seed: 0,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub config: GmmConfig,
    pub true_means: Vec<Vec<f64>>,
    pub train: Vec<Vec<f64>>,
    pub test: Vec<Vec<f64>>,
}

impl Gmm {
    pub const RATE: f64 = 9.0;
    pub const PRIOR_VAR: f64 = 10.0;
    pub const LIKELIHOOD_VAR: f64 = 0.1;

    /// Draws means from the prior and points uniformly over clusters, all
    /// from the `gmm-data` stream of `config.seed`.
    pub fn generate(config: &GmmConfig) -> Gmm {
        let mut rng = stream(config.seed, "gmm-data");
        let prior_sd = Self::PRIOR_VAR.sqrt();
        let sd = Self::LIKELIHOOD_VAR.sqrt();
        let true_means: Vec<Vec<f64>> = (0..config.k_true)
            .map(|_| {
                (0..config.dim)
                    .map(|_| prior_sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let points: Vec<Vec<f64>> = (0..config.n)
            .map(|_| {
                let k = rng.random_range(0..config.k_true);
                true_means[k]
                    .iter()
                    .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let n_train = ((config.n as f64) * config.train_fraction).round() as usize;
        let (train, test) = points.split_at(n_train.min(config.n));
        Gmm {
            config: *config,
            true_means,
            train: train.to_vec(),
            test: test.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn point_log_density(means: &[Vec<f64>], y: &[f64]) -> f64 {
        let sd = Self::LIKELIHOOD_VAR.sqrt();
        let terms: Vec<f64> = means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(y)
                    .map(|(mi, yi)| {
                        let z = (yi - mi) / sd;
                        -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    })
                    .sum()
            })
            .collect();
        log_mean_exp(&terms)
    }

    /// Test-set LPPD under the generating means.
    pub fn true_lppd(&self) -> f64 {
        self.test
            .iter()
            .map(|y| Self::point_log_density(&self.true_means, y))
            .sum()
    }

    pub fn oracle(&self) -> Oracle {
        Oracle {
            slp_weights: None,
            log_z: None,
            true_lppd: Some(self.true_lppd()),
        }
    }

    /// Cluster count and means encoded in raw draws.
    pub fn decode(&self, draws: &[Draw]) -> Option<(usize, Vec<Vec<f64>>)> {
        let k = draws.first()?.as_count()? as usize + 1;
        let d = self.dim();
        if draws.len() != 1 + k * d {
            return None;
        }
        let flat: Option<Vec<f64>> = draws[1..].iter().map(|x| x.as_real()).collect();
        Some((k, flat?.chunks(d).map(<[f64]>::to_vec).collect()))
    }

    fn run_points<H: Handler>(&self, h: &mut H, batch: Option<&[usize]>) -> Result<(), Interrupt> {
        let k = h.sample_count("K", &DistKind::poisson(Self::RATE), true)? as usize + 1;
        let prior = DistKind::normal(lift::<H::Scalar>(0.0), lift(Self::PRIOR_VAR.sqrt()));
        let mut means = Vec::with_capacity(k);
        for _ in 0..k {
            let mut m = Vec::with_capacity(self.dim());
            for _ in 0..self.dim() {
                m.push(h.sample_real("mu", &prior)?);
            }
            means.push(m);
        }
        let lik = DistKind::MixtureOfNormals {
            means,
            scale: lift(Self::LIKELIHOOD_VAR.sqrt()),
        };
        match batch {
            Some(b) => {
                for &i in b {
                    h.observe("y", &lik, ObsValue::Vector(&self.train[i]))?;
                }
            }
            None => {
                for y in &self.train {
                    h.observe("y", &lik, ObsValue::Vector(y))?;
                }
            }
        }
        Ok(())
    }
}

impl Program for Gmm {
    fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
        self.run_points(h, None)
    }

    fn data_size(&self) -> Option<usize> {
        Some(self.train.len())
    }

    fn run_on<H: Handler>(&self, h: &mut H, batch: &[usize]) -> Result<(), Interrupt> {
        self.run_points(h, Some(batch))
    }
}

impl Predictive for Gmm {
    fn held_out_len(&self) -> usize {
        self.test.len()
    }

    fn predictive_log_density(&self, draws: &[Draw]) -> Vec<f64> {
        match self.decode(draws) {
            Some((_, means)) => self
                .test
                .iter()
                .map(|y| Self::point_log_density(&means, y))
                .collect(),
            None => vec![f64::NEG_INFINITY; self.test.len()],
        }
    }
}
