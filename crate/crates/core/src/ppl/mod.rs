//! Effect-handler probabilistic programming kernel.
//!
//! A [`Program`] is ordinary Rust code written against a [`Handler`]. The
//! handler decides what a `sample` statement returns (a fresh prior draw, a
//! replayed value, a guide draw) and accumulates the log-density.

mod handlers;
mod minibatch;
mod trace;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::distributions::{DistKind, Draw, ObsValue};

pub use handlers::{
    log_density_at, replay, run_prior, run_prior_clamped, DensityEvaluation, PriorHandler,
    ReplayHandler,
};
pub use minibatch::{set_minibatch, MinibatchView};
pub use trace::{EntryKind, EntryValue, Trace, TraceEntry};

/// A sample site id together with the number of earlier visits to that id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(String, usize)", into = "(String, usize)")]
pub struct Address {
    pub site: String,
    pub counter: usize,
}

impl Address {
    pub fn new(site: impl Into<String>, counter: usize) -> Self {
        Address {
            site: site.into(),
            counter,
        }
    }
}

impl From<(String, usize)> for Address {
    fn from((site, counter): (String, usize)) -> Self {
        Address { site, counter }
    }
}

impl From<Address> for (String, usize) {
    fn from(a: Address) -> Self {
        (a.site, a.counter)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.site, self.counter)
    }
}

/// Ordered sample addresses of one execution. Ordering is lexicographic,
/// which fixes the canonical SLP index.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AddressPath(pub Vec<Address>);

impl AddressPath {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Address> {
        self.0.iter()
    }
}

impl fmt::Display for AddressPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("<empty>");
        }
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

/// Why an execution stopped early.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Interrupt {
    /// The supplied draws do not fit the program at this draw position.
    #[error("path deviation at draw {0}")]
    PathDeviation(usize),
    /// A density or parameter evaluation failed; usually a model bug.
    #[error("domain error at {site}: {reason}")]
    Domain { site: String, reason: String },
}

impl Interrupt {
    pub fn domain(site: &str, reason: impl Into<String>) -> Self {
        Interrupt::Domain {
            site: site.to_string(),
            reason: reason.into(),
        }
    }
}

/// Interpretation of the `sample`, `observe` and `factor` primitives.
pub trait Handler {
    type Scalar: Real;

    fn sample(
        &mut self,
        site: &str,
        dist: &DistKind<Self::Scalar>,
        branching: bool,
    ) -> Result<Draw<Self::Scalar>, Interrupt>;

    fn observe(
        &mut self,
        site: &str,
        dist: &DistKind<Self::Scalar>,
        value: ObsValue<'_>,
    ) -> Result<(), Interrupt>;

    /// Adds an arbitrary log-weight, scaled like an observation.
    fn factor(&mut self, site: &str, log_weight: Self::Scalar) -> Result<(), Interrupt>;

    /// Multiplies the scale applied to observe factors.
    fn scale_likelihood(&mut self, factor: f64);

    fn sample_real(
        &mut self,
        site: &str,
        dist: &DistKind<Self::Scalar>,
    ) -> Result<Self::Scalar, Interrupt> {
        match self.sample(site, dist, false)? {
            Draw::Real(x) => Ok(x),
            Draw::Count(_) => Err(Interrupt::domain(site, "expected a real draw")),
        }
    }

    /// A continuous draw that decides control flow.
    fn sample_real_branching(
        &mut self,
        site: &str,
        dist: &DistKind<Self::Scalar>,
    ) -> Result<Self::Scalar, Interrupt> {
        match self.sample(site, dist, true)? {
            Draw::Real(x) => Ok(x),
            Draw::Count(_) => Err(Interrupt::domain(site, "expected a real draw")),
        }
    }

    fn sample_count(
        &mut self,
        site: &str,
        dist: &DistKind<Self::Scalar>,
        branching: bool,
    ) -> Result<u64, Interrupt> {
        match self.sample(site, dist, branching)? {
            Draw::Count(n) => Ok(n),
            Draw::Real(_) => Err(Interrupt::domain(site, "expected a count draw")),
        }
    }
}

/// A probabilistic program.
pub trait Program: Sync {
    fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt>;

    /// Number of exchangeable observations, if the program supports
    /// minibatching.
    fn data_size(&self) -> Option<usize> {
        None
    }

    /// Runs the program observing only `batch`. Scaling is the caller's job.
    fn run_on<H: Handler>(&self, h: &mut H, batch: &[usize]) -> Result<(), Interrupt> {
        let _ = batch;
        self.run(h)
    }

    /// False when the density leaves the tape (e.g. a Cholesky solve), which
    /// rules out reparameterized gradients.
    fn differentiable(&self) -> bool {
        true
    }
}

impl<P: Program> Program for &P {
    fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
        (**self).run(h)
    }

    fn data_size(&self) -> Option<usize> {
        (**self).data_size()
    }

    fn run_on<H: Handler>(&self, h: &mut H, batch: &[usize]) -> Result<(), Interrupt> {
        (**self).run_on(h, batch)
    }

    fn differentiable(&self) -> bool {
        (**self).differentiable()
    }
}
