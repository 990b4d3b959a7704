//! Distribution families used by the benchmark programs.
//!
//! Parameters are generic over [`Real`] so the same log-density code runs on
//! plain floats and on tape variables. Discrete parameters (Poisson rate,
//! categorical probabilities) are always plain floats: nothing in scope
//! differentiates through them.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Real, Tape, Var};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("{family:?}: invalid parameter {detail}")]
    InvalidParameter { family: Family, detail: String },
    #[error("{0:?} has no reparameterized sampler")]
    NotReparameterizable(Family),
}

/// Family tag stored in trace entries instead of the full parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Normal,
    HalfNormal,
    Poisson,
    Categorical,
    InverseGamma,
    MixtureOfNormals,
    /// A raw log-weight added by the program (e.g. a marginal likelihood).
    Factor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupportSpec {
    Real,
    Positive,
    NonNegativeInteger,
    /// `{0, .., n-1}`
    Finite(usize),
    /// `R^d`, only for observed vector-valued families.
    Euclidean(usize),
}

impl SupportSpec {
    pub fn is_discrete(self) -> bool {
        matches!(self, SupportSpec::NonNegativeInteger | SupportSpec::Finite(_))
    }

    pub fn contains(self, draw: Draw) -> bool {
        match (self, draw) {
            (SupportSpec::Real, Draw::Real(x)) => x.is_finite(),
            (SupportSpec::Positive, Draw::Real(x)) => x > 0.0 && x.is_finite(),
            (SupportSpec::NonNegativeInteger, Draw::Count(_)) => true,
            (SupportSpec::Finite(n), Draw::Count(k)) => (k as usize) < n,
            _ => false,
        }
    }

    /// True when a draw of this kind (real vs integer) could belong here,
    /// regardless of its range.
    pub fn accepts_kind(self, draw: Draw) -> bool {
        matches!(
            (self.is_discrete(), draw),
            (false, Draw::Real(_)) | (true, Draw::Count(_))
        )
    }
}

/// One raw random draw: the direct output of a sample statement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Draw<R = f64> {
    Real(R),
    Count(u64),
}

impl<R: Real> Draw<R> {
    pub fn value(self) -> Draw<f64> {
        match self {
            Draw::Real(x) => Draw::Real(x.value()),
            Draw::Count(n) => Draw::Count(n),
        }
    }

    pub fn as_real(self) -> Option<R> {
        match self {
            Draw::Real(x) => Some(x),
            Draw::Count(_) => None,
        }
    }

    pub fn as_count(self) -> Option<u64> {
        match self {
            Draw::Count(n) => Some(n),
            Draw::Real(_) => None,
        }
    }
}

impl Draw<f64> {
    pub fn lift<R: Real>(self) -> Draw<R> {
        match self {
            Draw::Real(x) => Draw::Real(R::lift(x)),
            Draw::Count(n) => Draw::Count(n),
        }
    }
}

/// An observed value passed to `observe`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObsValue<'a> {
    Real(f64),
    Count(u64),
    Vector(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DistKind<R = f64> {
    Normal { loc: R, scale: R },
    HalfNormal { scale: R },
    Poisson { rate: f64 },
    Categorical { probs: Vec<f64> },
    InverseGamma { shape: R, rate: R },
    /// Uniform-weight mixture of isotropic normals over `R^d`.
    MixtureOfNormals { means: Vec<Vec<R>>, scale: R },
}

impl<R: Real> DistKind<R> {
    pub fn normal(loc: R, scale: R) -> Self {
        DistKind::Normal { loc, scale }
    }

    pub fn half_normal(scale: R) -> Self {
        DistKind::HalfNormal { scale }
    }

    pub fn poisson(rate: f64) -> Self {
        DistKind::Poisson { rate }
    }

    pub fn categorical(probs: impl Into<Vec<f64>>) -> Self {
        DistKind::Categorical {
            probs: probs.into(),
        }
    }

    pub fn inverse_gamma(shape: R, rate: R) -> Self {
        DistKind::InverseGamma { shape, rate }
    }

    pub fn family(&self) -> Family {
        match self {
            DistKind::Normal { .. } => Family::Normal,
            DistKind::HalfNormal { .. } => Family::HalfNormal,
            DistKind::Poisson { .. } => Family::Poisson,
            DistKind::Categorical { .. } => Family::Categorical,
            DistKind::InverseGamma { .. } => Family::InverseGamma,
            DistKind::MixtureOfNormals { .. } => Family::MixtureOfNormals,
        }
    }

    pub fn support(&self) -> SupportSpec {
        match self {
            DistKind::Normal { .. } => SupportSpec::Real,
            DistKind::HalfNormal { .. } | DistKind::InverseGamma { .. } => SupportSpec::Positive,
            DistKind::Poisson { .. } => SupportSpec::NonNegativeInteger,
            DistKind::Categorical { probs } => SupportSpec::Finite(probs.len()),
            DistKind::MixtureOfNormals { means, .. } => {
                SupportSpec::Euclidean(means.first().map_or(0, Vec::len))
            }
        }
    }

    pub fn validate(&self) -> Result<(), DistError> {
        let family = self.family();
        let bad = |detail: String| Err(DistError::InvalidParameter { family, detail });
        let positive = |name: &str, v: f64| -> Result<(), DistError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                bad(format!("{name} = {v} must be positive and finite"))
            }
        };
        match self {
            DistKind::Normal { loc, scale } => {
                if !loc.value().is_finite() {
                    return bad(format!("loc = {:?} must be finite", loc.value()));
                }
                positive("scale", scale.value())
            }
            DistKind::HalfNormal { scale } => positive("scale", scale.value()),
            DistKind::Poisson { rate } => positive("rate", *rate),
            DistKind::InverseGamma { shape, rate } => {
                positive("shape", shape.value())?;
                positive("rate", rate.value())
            }
            DistKind::Categorical { probs } => {
                if probs.is_empty() {
                    return bad("empty probability vector".into());
                }
                if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                    return bad(format!("probabilities {probs:?} must be nonnegative"));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return bad(format!("probabilities sum to {total}"));
                }
                Ok(())
            }
            DistKind::MixtureOfNormals { means, scale } => {
                let Some(first) = means.first() else {
                    return bad("no components".into());
                };
                if means.iter().any(|m| m.len() != first.len()) {
                    return bad("components of unequal dimension".into());
                }
                positive("scale", scale.value())
            }
        }
    }

    /// Log-density of a real value; `-inf` outside the support.
    pub fn log_prob_real(&self, x: R) -> R {
        let xv = x.value();
        match self {
            DistKind::Normal { loc, scale } => normal_log_prob(x, *loc, *scale),
            DistKind::HalfNormal { scale } => {
                if xv < 0.0 || xv.is_nan() {
                    R::lift(f64::NEG_INFINITY)
                } else {
                    normal_log_prob(x, R::lift(0.0), *scale) + std::f64::consts::LN_2
                }
            }
            DistKind::InverseGamma { shape, rate } => {
                if !(xv > 0.0) {
                    return R::lift(f64::NEG_INFINITY);
                }
                // The shape enters log-gamma; it is treated as a constant there.
                let log_gamma_shape = libm::lgamma(shape.value());
                *shape * rate.ln() - log_gamma_shape - (*shape + 1.0) * x.ln() - *rate / x
            }
            DistKind::Poisson { .. }
            | DistKind::Categorical { .. }
            | DistKind::MixtureOfNormals { .. } => R::lift(f64::NEG_INFINITY),
        }
    }

    /// Log-mass of a count; `-inf` outside the support.
    pub fn log_prob_count(&self, n: u64) -> R {
        match self {
            DistKind::Poisson { rate } => {
                R::lift(n as f64 * rate.ln() - rate - libm::lgamma(n as f64 + 1.0))
            }
            DistKind::Categorical { probs } => match probs.get(n as usize) {
                Some(&p) => R::lift(p.ln()),
                None => R::lift(f64::NEG_INFINITY),
            },
            _ => R::lift(f64::NEG_INFINITY),
        }
    }

    /// Log-density of a vector under [`DistKind::MixtureOfNormals`], via
    /// log-sum-exp over components.
    pub fn log_prob_vector(&self, y: &[f64]) -> R {
        let DistKind::MixtureOfNormals { means, scale } = self else {
            return R::lift(f64::NEG_INFINITY);
        };
        if means.first().is_none_or(|m| m.len() != y.len()) {
            return R::lift(f64::NEG_INFINITY);
        }
        let inv_two_var = (scale.square() * 2.0).powf(-1.0);
        let norm = -(scale.ln() + LN_SQRT_2PI) * y.len() as f64;
        let exponents: Vec<R> = means
            .iter()
            .map(|mean| {
                let mut sq = R::lift(0.0);
                for (&yd, &md) in y.iter().zip(mean) {
                    sq = sq + (md - yd).square();
                }
                -(sq * inv_two_var)
            })
            .collect();
        log_mean_exp(&exponents) + norm
    }

    pub fn log_prob(&self, draw: Draw<R>) -> R {
        match draw {
            Draw::Real(x) => self.log_prob_real(x),
            Draw::Count(n) => self.log_prob_count(n),
        }
    }

    pub fn log_prob_obs(&self, value: ObsValue<'_>) -> R {
        match value {
            ObsValue::Real(x) => self.log_prob_real(R::lift(x)),
            ObsValue::Count(n) => self.log_prob_count(n),
            ObsValue::Vector(y) => self.log_prob_vector(y),
        }
    }

    pub fn is_vector_valued(&self) -> bool {
        matches!(self, DistKind::MixtureOfNormals { .. })
    }

    /// Draws a scalar value. Vector-valued families use [`Self::sample_vector`].
    pub fn sample<G: Rng + ?Sized>(&self, rng: &mut G) -> Draw {
        match self {
            DistKind::Normal { loc, scale } => {
                let eps: f64 = rng.sample(StandardNormal);
                Draw::Real(loc.value() + scale.value() * eps)
            }
            DistKind::HalfNormal { scale } => {
                let eps: f64 = rng.sample(StandardNormal);
                Draw::Real((scale.value() * eps).abs())
            }
            DistKind::InverseGamma { shape, rate } => {
                let gamma = Gamma::new(shape.value(), 1.0 / rate.value())
                    .expect("validated inverse-gamma parameters");
                Draw::Real(1.0 / gamma.sample(rng))
            }
            DistKind::Poisson { rate } => Draw::Count(poisson_inversion(*rate, rng.random())),
            DistKind::Categorical { probs } => {
                Draw::Count(categorical_inversion(probs, rng.random()) as u64)
            }
            DistKind::MixtureOfNormals { .. } => {
                panic!("mixture of normals is vector-valued; use sample_vector")
            }
        }
    }

    pub fn sample_vector<G: Rng + ?Sized>(&self, rng: &mut G) -> Option<Vec<f64>> {
        let DistKind::MixtureOfNormals { means, scale } = self else {
            return None;
        };
        let k = rng.random_range(0..means.len());
        Some(
            means[k]
                .iter()
                .map(|m| {
                    let eps: f64 = rng.sample(StandardNormal);
                    m.value() + scale.value() * eps
                })
                .collect(),
        )
    }

    /// `loc + scale * eps` for a given standard-normal `eps`.
    pub fn reparam_from_noise(&self, eps: f64) -> Result<R, DistError> {
        match self {
            DistKind::Normal { loc, scale } => Ok(*loc + *scale * eps),
            other => Err(DistError::NotReparameterizable(other.family())),
        }
    }
}

impl DistKind<f64> {
    pub fn lift<R: Real>(&self) -> DistKind<R> {
        match self {
            DistKind::Normal { loc, scale } => DistKind::Normal {
                loc: R::lift(*loc),
                scale: R::lift(*scale),
            },
            DistKind::HalfNormal { scale } => DistKind::HalfNormal {
                scale: R::lift(*scale),
            },
            DistKind::Poisson { rate } => DistKind::Poisson { rate: *rate },
            DistKind::Categorical { probs } => DistKind::Categorical {
                probs: probs.clone(),
            },
            DistKind::InverseGamma { shape, rate } => DistKind::InverseGamma {
                shape: R::lift(*shape),
                rate: R::lift(*rate),
            },
            DistKind::MixtureOfNormals { means, scale } => DistKind::MixtureOfNormals {
                means: means
                    .iter()
                    .map(|m| m.iter().map(|&v| R::lift(v)).collect())
                    .collect(),
                scale: R::lift(*scale),
            },
        }
    }
}

/// Reparameterized normal draw recorded on the tape of its parameters.
pub fn reparam_sample<'t, G: Rng + ?Sized>(
    dist: &DistKind<Var<'t>>,
    rng: &mut G,
    _tape: &'t Tape,
) -> Result<Var<'t>, DistError> {
    let eps: f64 = rng.sample(StandardNormal);
    dist.reparam_from_noise(eps)
}

pub fn normal_log_prob<R: Real>(x: R, loc: R, scale: R) -> R {
    let z = (x - loc) / scale;
    -(z.square() * 0.5) - scale.ln() - LN_SQRT_2PI
}

/// Normal CDF through `erf`.
pub fn normal_cdf(x: f64, loc: f64, scale: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * (1.0 + libm::erf((x - loc) / (scale * std::f64::consts::SQRT_2)))
}

/// `ln((1/n) sum exp(x_i))`, stable for large or `-inf` entries.
pub fn log_mean_exp<R: Real>(xs: &[R]) -> R {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

pub fn log_sum_exp<R: Real>(xs: &[R]) -> R {
    let max = xs
        .iter()
        .map(|x| x.value())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return R::lift(max);
    }
    let mut total = R::lift(0.0);
    for &x in xs {
        if x.value() > f64::NEG_INFINITY {
            total = total + (x - max).exp();
        }
    }
    total.ln() + max
}

fn poisson_inversion(rate: f64, u: f64) -> u64 {
    let mut n = 0u64;
    let mut p = (-rate).exp();
    let mut cumulative = p;
    let limit = (10.0 * rate + 1000.0) as u64;
    while u > cumulative && n < limit {
        n += 1;
        p *= rate / n as f64;
        cumulative += p;
    }
    n
}

fn categorical_inversion(probs: &[f64], u: f64) -> usize {
    let mut cumulative = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    // Round-off: return the last index with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
