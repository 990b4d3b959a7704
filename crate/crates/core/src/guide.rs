//! Mean-field normal local guides over unconstrained space, their prior
//! initialization, and rejection-sampled truncation to an SLP.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::distributions::{normal_log_prob, SupportSpec};
use crate::error::{Result, SdviError};
use crate::ppl::{Address, Program};
use crate::slp::LocalTarget;
use crate::training::AdamState;

/// Map from the real line onto a site's support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bijection {
    Identity,
    Log,
}

impl Bijection {
    pub fn for_support(support: SupportSpec) -> Option<Bijection> {
        match support {
            SupportSpec::Real => Some(Bijection::Identity),
            SupportSpec::Positive => Some(Bijection::Log),
            _ => None,
        }
    }

    /// Unconstrained to constrained.
    pub fn forward<R: Real>(self, z: R) -> R {
        match self {
            Bijection::Identity => z,
            Bijection::Log => z.exp(),
        }
    }

    /// Constrained to unconstrained, `None` outside the range.
    pub fn inverse<R: Real>(self, x: R) -> Option<R> {
        match self {
            Bijection::Identity => x.value().is_finite().then_some(x),
            Bijection::Log => (x.value() > 0.0 && x.value().is_finite()).then(|| x.ln()),
        }
    }

    /// `log |dx/dz|`.
    pub fn log_abs_det_jacobian<R: Real>(self, z: R) -> R {
        match self {
            Bijection::Identity => R::lift(0.0),
            Bijection::Log => z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuideMode {
    Surrogate,
    Eliminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideSite {
    pub address: Address,
    pub position: usize,
    pub bijection: Bijection,
}

/// Mean-field normal guide. `params` holds `[μ_0, ρ_0, μ_1, ρ_1, ...]` with
/// `σ_i = softplus(ρ_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGuide {
    pub slp: usize,
    pub mode: GuideMode,
    pub sites: Vec<GuideSite>,
    pub params: Vec<f64>,
}

/// `ρ` with `softplus(ρ) = σ`.
pub fn inverse_softplus(sigma: f64) -> f64 {
    sigma + (-(-sigma).exp_m1()).ln()
}

impl LocalGuide {
    /// A standard-normal guide over the target's guide positions.
    pub fn new(target: &LocalTarget) -> Result<Self> {
        let slp = target.slp_index();
        let positions = target.positions();
        let supports = target.supports();
        let mut sites = Vec::with_capacity(positions.len());
        for &p in &positions {
            let support = supports[sites.len()];
            let bijection = Bijection::for_support(support).ok_or_else(|| SdviError::Slp {
                slp,
                reason: format!(
                    "site {} has support {support:?}, which a normal guide cannot cover",
                    target.path().0[p]
                ),
            })?;
            sites.push(GuideSite {
                address: target.path().0[p].clone(),
                position: p,
                bijection,
            });
        }
        let params = sites
            .iter()
            .flat_map(|_| [0.0, inverse_softplus(1.0)])
            .collect();
        Ok(LocalGuide {
            slp,
            mode: if target.is_eliminated() {
                GuideMode::Eliminated
            } else {
                GuideMode::Surrogate
            },
            sites,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.sites.len()
    }

    pub fn loc(&self, i: usize) -> f64 {
        self.params[2 * i]
    }

    pub fn scale(&self, i: usize) -> f64 {
        self.params[2 * i + 1].softplus()
    }

    pub fn set_site(&mut self, i: usize, loc: f64, scale: f64) {
        self.params[2 * i] = loc;
        self.params[2 * i + 1] = inverse_softplus(scale);
    }

    /// `log q̃(x; params)` for constrained values `x`, including the
    /// change-of-variables correction.
    pub fn log_prob_with<R: Real>(&self, params: &[R], x: &[R]) -> R {
        debug_assert_eq!(x.len(), self.dim());
        let mut total = R::lift(0.0);
        for (i, site) in self.sites.iter().enumerate() {
            let Some(z) = site.bijection.inverse(x[i]) else {
                return R::lift(f64::NEG_INFINITY);
            };
            let sigma = params[2 * i + 1].softplus();
            total = total + normal_log_prob(z, params[2 * i], sigma)
                - site.bijection.log_abs_det_jacobian(z);
        }
        total
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        self.log_prob_with(&self.params, x)
    }

    /// Constrained values `T(μ + σ ε)`.
    pub fn transform_with<R: Real>(&self, params: &[R], eps: &[f64]) -> Vec<R> {
        self.sites
            .iter()
            .enumerate()
            .map(|(i, site)| {
                let z = params[2 * i] + params[2 * i + 1].softplus() * eps[i];
                site.bijection.forward(z)
            })
            .collect()
    }

    pub fn sample_noise<G: Rng + ?Sized>(&self, rng: &mut G) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn sample<G: Rng + ?Sized>(&self, rng: &mut G) -> Vec<f64> {
        let eps = self.sample_noise(rng);
        self.transform_with(&self.params, &eps)
    }

    /// Maps constrained values to the unconstrained space; `None` if any
    /// value is outside its site's range.
    pub fn unconstrain(&self, x: &[f64]) -> Option<Vec<f64>> {
        self.sites
            .iter()
            .zip(x)
            .map(|(s, &v)| s.bijection.inverse(v))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// In-SLP prior samples to collect.
    pub n_samples: usize,
    pub n_iters: usize,
    pub learning_rate: f64,
    /// Prior simulations allowed per requested sample before giving up.
    pub attempts_per_sample: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            n_samples: 100,
            n_iters: 1000,
            learning_rate: 0.01,
            attempts_per_sample: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub accepted: usize,
    pub simulations: usize,
    #[serde(with = "crate::nonfinite")]
    pub objective_start: f64,
    #[serde(with = "crate::nonfinite")]
    pub objective_end: f64,
}

/// Sufficient statistics of the fixed prior sample set, per site in
/// unconstrained space. The prior-fit objective `(1/N) Σ_j log q̃(x_j)` and
/// its gradient depend on the samples only through these.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSampleStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// Mean of `Σ_i log|dx_i/dz_i|`, constant in the guide parameters.
    pub mean_log_jacobian: f64,
}

impl PriorSampleStats {
    pub fn from_samples(guide: &LocalGuide, samples: &[Vec<f64>]) -> Option<Self> {
        let d = guide.dim();
        let n = samples.len();
        if n == 0 {
            return None;
        }
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d];
        let mut jac = 0.0;
        for x in samples {
            let z = guide.unconstrain(x)?;
            for (i, site) in guide.sites.iter().enumerate() {
                mean[i] += z[i];
                second[i] += z[i] * z[i];
                jac += site.bijection.log_abs_det_jacobian(z[i]);
            }
        }
        let nf = n as f64;
        mean.iter_mut().for_each(|m| *m /= nf);
        second.iter_mut().for_each(|s| *s /= nf);
        Some(PriorSampleStats {
            count: n,
            mean,
            second_moment: second,
            mean_log_jacobian: jac / nf,
        })
    }

    pub fn variance(&self, i: usize) -> f64 {
        (self.second_moment[i] - self.mean[i] * self.mean[i]).max(0.0)
    }

    /// Average guide log-density over the sample set.
    pub fn objective(&self, params: &[f64]) -> f64 {
        let mut total = -self.mean_log_jacobian;
        for i in 0..self.mean.len() {
            let (mu, sigma) = (params[2 * i], params[2 * i + 1].softplus());
            let sq = self.second_moment[i] - 2.0 * mu * self.mean[i] + mu * mu;
            total += -0.5 * sq / (sigma * sigma) - sigma.ln() - 0.918_938_533_204_672_8;
        }
        total
    }

    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; params.len()];
        for i in 0..self.mean.len() {
            let (mu, rho) = (params[2 * i], params[2 * i + 1]);
            let sigma = rho.softplus();
            let sq = self.second_moment[i] - 2.0 * mu * self.mean[i] + mu * mu;
            g[2 * i] = (self.mean[i] - mu) / (sigma * sigma);
            let d_sigma = sq / (sigma * sigma * sigma) - 1.0 / sigma;
            let sigmoid = 1.0 / (1.0 + (-rho).exp());
            g[2 * i + 1] = d_sigma * sigmoid;
        }
        g
    }
}

/// Draws up to `n_samples` prior samples that land in the SLP.
pub fn collect_prior_samples<P: Program, G: Rng + ?Sized>(
    target: &LocalTarget,
    program: &P,
    config: &InitConfig,
    rng: &mut G,
) -> (Vec<Vec<f64>>, usize) {
    let max_sims = config.n_samples.saturating_mul(config.attempts_per_sample.max(1));
    let mut samples = Vec::with_capacity(config.n_samples);
    let mut sims = 0;
    while samples.len() < config.n_samples && sims < max_sims {
        sims += 1;
        if let Some(x) = target.prior_sample(program, rng) {
            samples.push(x);
        }
    }
    (samples, sims)
}

/// Fits the guide to the SLP's prior by maximizing the average guide
/// log-density over a fixed set of in-SLP prior samples. Starts from the
/// empirical mean and standard deviation of each site.
pub fn init_from_prior<P: Program, G: Rng + ?Sized>(
    guide: &mut LocalGuide,
    target: &LocalTarget,
    program: &P,
    config: &InitConfig,
    rng: &mut G,
) -> Result<InitReport> {
    if config.n_samples == 0 {
        return Err(crate::error::ConfigError::new("n_init_samples must be at least 1").into());
    }
    let (samples, simulations) = collect_prior_samples(target, program, config, rng);
    let stats = PriorSampleStats::from_samples(guide, &samples).ok_or_else(|| SdviError::Slp {
        slp: guide.slp,
        reason: format!("no prior sample landed in the SLP after {simulations} simulations"),
    })?;
    for i in 0..guide.dim() {
        let sd = if stats.count >= 2 {
            stats.variance(i).sqrt().max(1e-3)
        } else {
            1.0
        };
        guide.set_site(i, stats.mean[i], sd);
    }
    let objective_start = stats.objective(&guide.params);
    let mut adam = AdamState::new(guide.params.len(), config.learning_rate);
    let mut best = (objective_start, guide.params.clone());
    for _ in 0..config.n_iters {
        let g = stats.gradient(&guide.params);
        if g.iter().any(|v| !v.is_finite()) {
            break;
        }
        adam.ascend(&mut guide.params, &g);
        let obj = stats.objective(&guide.params);
        if obj > best.0 {
            best = (obj, guide.params.clone());
        }
    }
    guide.params = best.1;
    Ok(InitReport {
        accepted: stats.count,
        simulations,
        objective_start,
        objective_end: best.0,
    })
}

/// Rejection sampling exhausted its attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no proposal accepted in {attempts} attempts")]
pub struct RejectionExhausted {
    pub attempts: usize,
}

/// A guide truncated to its SLP's support by rejection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGuide {
    pub guide: LocalGuide,
    /// Acceptance rate `N_A / N` from the most recent estimation run.
    pub acceptance: Option<f64>,
    pub max_attempts: usize,
}

pub const DEFAULT_MAX_ATTEMPTS: usize = 1000;

impl TruncatedGuide {
    pub fn new(guide: LocalGuide) -> Self {
        TruncatedGuide {
            guide,
            acceptance: None,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }

    /// The first proposal inside the SLP and the number of attempts used.
    pub fn sample<P: Program, G: Rng + ?Sized>(
        &self,
        target: &LocalTarget,
        program: &P,
        rng: &mut G,
    ) -> std::result::Result<(Vec<f64>, usize), RejectionExhausted> {
        for attempt in 1..=self.max_attempts.max(1) {
            let x = self.guide.sample(rng);
            if target.accepts(program, &x) {
                return Ok((x, attempt));
            }
        }
        Err(RejectionExhausted {
            attempts: self.max_attempts.max(1),
        })
    }
}
