//! Support decomposition variational inference (SDVI) for probabilistic
//! programs with stochastic control flow, together with the small
//! probabilistic programming kernel it runs on.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod distributions;
pub mod engine;
pub mod error;
pub mod guide;
pub mod mixture;
pub mod models;
pub mod nonfinite;
pub mod ppl;
pub mod rng;
pub mod scheduler;
pub mod slp;
pub mod training;

pub use autodiff::{Real, Tape, Var};
pub use baselines::{bbvi_elbo, bbvi_fit, bbvi_sample, BbviConfig, BbviFit, GlobalGuide};
pub use distributions::{DistKind, Draw, ObsValue};
pub use engine::{fit_online_sdvi, fit_sdvi, SdviConfig, SdviResult};
pub use error::{ConfigError, Result, SdviError};
pub use guide::{InitConfig, LocalGuide, TruncatedGuide};
pub use mixture::{global_elbo, optimal_weights, MixtureWeights, Predictive};
pub use models::{BenchmarkModel, Oracle};
pub use ppl::{Address, AddressPath, Handler, Interrupt, Program, Trace};
pub use scheduler::{ShConfig, ShLedger, StopRule};
pub use slp::{discover, DiscoveryReport, LocalTarget, Slp};
pub use training::{ElboEstimate, GradEstimatorKind, TrainConfig};
