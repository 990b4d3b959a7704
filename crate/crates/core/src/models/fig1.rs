use crate::autodiff::Real;
use crate::distributions::{normal_log_prob, DistKind, ObsValue};
use crate::ppl::{Address, AddressPath, Handler, Interrupt, Program};

use super::{lift, Oracle};

/// `x ~ N(0,1)`; `z ~ N(-3,1)` at site `z1` if `x < 0`, else `z ~ N(3,1)` at
/// `z2`; `y ~ N(z, 2)` observed at 2.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fig1;

impl Fig1 {
    pub const Y: f64 = 2.0;

    /// `Z_k = ½·N(2; ±3, √5)`.
    pub fn slp_evidence() -> [f64; 2] {
        let sd = 5f64.sqrt();
        [
            0.5 * normal_log_prob(Self::Y, -3.0, sd).exp(),
            0.5 * normal_log_prob(Self::Y, 3.0, sd).exp(),
        ]
    }

    pub fn paths() -> [AddressPath; 2] {
        let path = |z: &str| AddressPath(vec![Address::new("x", 0), Address::new(z, 0)]);
        [path("z1"), path("z2")]
    }

    pub fn oracle(&self) -> Oracle {
        let z = Self::slp_evidence();
        let total = z[0] + z[1];
        let [left, right] = Self::paths();
        Oracle {
            slp_weights: Some(vec![(left, z[0] / total), (right, z[1] / total)]),
            log_z: Some(total.ln()),
            true_lppd: None,
        }
    }
}

impl Program for Fig1 {
    fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
        let one = lift::<H::Scalar>(1.0);
        let x = h.sample_real_branching("x", &DistKind::normal(lift(0.0), one))?;
        let z = if x.value() < 0.0 {
            h.sample_real("z1", &DistKind::normal(lift(-3.0), one))?
        } else {
            h.sample_real("z2", &DistKind::normal(lift(3.0), one))?
        };
        h.observe("y", &DistKind::normal(z, lift(2.0)), ObsValue::Real(Self::Y))
    }
}
