//! Benchmark programs with independent oracles.

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::distributions::{DistKind, Draw, ObsValue};
use crate::error::{ConfigError, Result};
use crate::mixture::Predictive;
use crate::ppl::{AddressPath, Handler, Interrupt, Program};

mod fig1;
mod gmm;
mod gp;
mod intervals;

pub use fig1::Fig1;
pub use gmm::{Gmm, GmmConfig};
pub use gp::{cholesky, gp_log_marginal, Gp, GpConfig, Kernel};
pub use intervals::NormalIntervals;

/// Ground truth that is tractable for a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    /// True posterior SLP probabilities keyed by address path.
    pub slp_weights: Option<Vec<(AddressPath, f64)>>,
    pub log_z: Option<f64>,
    /// Held-out LPPD under the generating parameters.
    pub true_lppd: Option<f64>,
}

impl Oracle {
    /// `Σ_k (λ_k − λ̂_k)²` over the union of true and estimated SLPs.
    pub fn weights_squared_error(&self, estimated: &[(AddressPath, f64)]) -> Option<f64> {
        let truth = self.slp_weights.as_ref()?;
        let mut err = 0.0;
        for (path, w) in truth {
            let est = estimated.iter().find(|(p, _)| p == path).map_or(0.0, |e| e.1);
            err += (w - est).powi(2);
        }
        for (path, w) in estimated {
            if !truth.iter().any(|(p, _)| p == path) {
                err += w * w;
            }
        }
        Some(err)
    }
}

/// Every benchmark behind one type, so callers can pick a model by name.
#[derive(Debug, Clone)]
pub enum BenchmarkModel {
    Fig1(Fig1),
    NormalIntervals(NormalIntervals),
    Gmm(Gmm),
    Gp(Gp),
}

pub const MODEL_NAMES: [&str; 4] = ["fig1", "normal-intervals", "gmm", "gp"];

impl BenchmarkModel {
    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkModel::Fig1(_) => "fig1",
            BenchmarkModel::NormalIntervals(_) => "normal-intervals",
            BenchmarkModel::Gmm(_) => "gmm",
            BenchmarkModel::Gp(_) => "gp",
        }
    }

    /// Builds a model with default desk-scale settings and `data_seed`.
    pub fn by_name(name: &str, data_seed: u64) -> Result<BenchmarkModel, ConfigError> {
        Ok(match name {
            "fig1" => BenchmarkModel::Fig1(Fig1),
            "normal-intervals" => BenchmarkModel::NormalIntervals(NormalIntervals),
            "gmm" => BenchmarkModel::Gmm(Gmm::generate(&GmmConfig {
                seed: data_seed,
                ..GmmConfig::default()
            })),
            "gp" => BenchmarkModel::Gp(Gp::generate(&GpConfig {
                seed: data_seed,
                ..GpConfig::default()
            })),
            other => {
                return Err(ConfigError::new(format!(
                    "unknown model `{other}`; expected one of {}",
                    MODEL_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn oracle(&self) -> Oracle {
        match self {
            BenchmarkModel::Fig1(m) => m.oracle(),
            BenchmarkModel::NormalIntervals(m) => m.oracle(),
            BenchmarkModel::Gmm(m) => m.oracle(),
            BenchmarkModel::Gp(_) => Oracle::default(),
        }
    }

    /// Models with held-out data.
    pub fn predictive(&self) -> Option<&dyn PredictiveDyn> {
        match self {
            BenchmarkModel::Gmm(m) => Some(m),
            BenchmarkModel::Gp(m) => Some(m),
            _ => None,
        }
    }
}

/// Object-safe view of [`Predictive`].
pub trait PredictiveDyn {
    fn held_out_len(&self) -> usize;
    fn pointwise(&self, draws: &[Draw]) -> Vec<f64>;
}

impl<P: Predictive> PredictiveDyn for P {
    fn held_out_len(&self) -> usize {
        Predictive::held_out_len(self)
    }

    fn pointwise(&self, draws: &[Draw]) -> Vec<f64> {
        self.predictive_log_density(draws)
    }
}

impl Program for BenchmarkModel {
    fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
        match self {
            BenchmarkModel::Fig1(m) => m.run(h),
            BenchmarkModel::NormalIntervals(m) => m.run(h),
            BenchmarkModel::Gmm(m) => m.run(h),
            BenchmarkModel::Gp(m) => m.run(h),
        }
    }

    fn data_size(&self) -> Option<usize> {
        match self {
            BenchmarkModel::Gmm(m) => m.data_size(),
            _ => None,
        }
    }

    fn run_on<H: Handler>(&self, h: &mut H, batch: &[usize]) -> Result<(), Interrupt> {
        match self {
            BenchmarkModel::Gmm(m) => m.run_on(h, batch),
            other => other.run(h),
        }
    }

    fn differentiable(&self) -> bool {
        match self {
            BenchmarkModel::Gp(m) => m.differentiable(),
            _ => true,
        }
    }
}

impl Predictive for BenchmarkModel {
    fn held_out_len(&self) -> usize {
        self.predictive().map_or(0, |p| p.held_out_len())
    }

    fn predictive_log_density(&self, draws: &[Draw]) -> Vec<f64> {
        self.predictive().map_or_else(Vec::new, |p| p.pointwise(draws))
    }
}

/// Hands out a fixed list of draws in order and ignores observations; used
/// to rebuild model quantities from raw draws.
pub(crate) struct Feed<'d> {
    draws: &'d [Draw],
    next: usize,
}

impl<'d> Feed<'d> {
    pub(crate) fn new(draws: &'d [Draw]) -> Self {
        Feed { draws, next: 0 }
    }
}

impl Handler for Feed<'_> {
    type Scalar = f64;

    fn sample(&mut self, _site: &str, _dist: &DistKind, _branching: bool) -> Result<Draw, Interrupt> {
        let d = self
            .draws
            .get(self.next)
            .copied()
            .ok_or(Interrupt::PathDeviation(self.next))?;
        self.next += 1;
        Ok(d)
    }

    fn observe(&mut self, _site: &str, _dist: &DistKind, _value: ObsValue<'_>) -> Result<(), Interrupt> {
        Ok(())
    }

    fn factor(&mut self, _site: &str, _log_weight: f64) -> Result<(), Interrupt> {
        Ok(())
    }

    fn scale_likelihood(&mut self, _factor: f64) {}
}

pub(crate) fn lift<R: Real>(x: f64) -> R {
    R::lift(x)
}
