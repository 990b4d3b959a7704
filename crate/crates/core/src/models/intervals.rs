use crate::autodiff::Real;
use crate::distributions::{normal_cdf, normal_log_prob, DistKind, ObsValue};
use crate::ppl::{Address, AddressPath, Handler, Interrupt, Program};

use super::{lift, Oracle};

/// `u ~ N(0, 5²)` picks `z ∈ {0..9}` by unit intervals of `u`;
/// `x ~ N(z, 1)`; `y ~ N(x, 1)` observed at 2. Each branch samples `x` at
/// its own site `x_z`, so every `z` is a distinct SLP.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalIntervals;

impl NormalIntervals {
    pub const Y: f64 = 2.0;
    pub const PRIOR_SD: f64 = 5.0;

    pub fn branch(u: f64) -> usize {
        if u <= -4.0 {
            0
        } else if u > 4.0 {
            9
        } else {
            // u ∈ (k-5, k-4] → k
            ((u + 4.0).ceil() as i64).clamp(1, 8) as usize
        }
    }

    pub fn site(z: usize) -> String {
        format!("x_{z}")
    }

    /// Prior mass of each branch.
    pub fn interval_masses() -> [f64; 10] {
        let mut p = [0.0; 10];
        for (k, pk) in p.iter_mut().enumerate() {
            let lo = if k == 0 { f64::NEG_INFINITY } else { k as f64 - 5.0 };
            let hi = if k == 9 { f64::INFINITY } else { k as f64 - 4.0 };
            *pk = normal_cdf(hi, 0.0, Self::PRIOR_SD) - normal_cdf(lo, 0.0, Self::PRIOR_SD);
        }
        p
    }

    /// `Z_k = p_k·N(2; z_k, √2)`.
    pub fn slp_evidence() -> [f64; 10] {
        let p = Self::interval_masses();
        let mut z = [0.0; 10];
        for k in 0..10 {
            z[k] = p[k] * normal_log_prob(Self::Y, k as f64, 2f64.sqrt()).exp();
        }
        z
    }

    pub fn path(z: usize) -> AddressPath {
        AddressPath(vec![Address::new("u", 0), Address::new(Self::site(z), 0)])
    }

    pub fn oracle(&self) -> Oracle {
        let z = Self::slp_evidence();
        let total: f64 = z.iter().sum();
        Oracle {
            slp_weights: Some((0..10).map(|k| (Self::path(k), z[k] / total)).collect()),
            log_z: Some(total.ln()),
            true_lppd: None,
        }
    }
}

impl Program for NormalIntervals {
    fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
        let one = lift::<H::Scalar>(1.0);
        let u = h.sample_real_branching("u", &DistKind::normal(lift(0.0), lift(Self::PRIOR_SD)))?;
        let z = Self::branch(u.value());
        let x = h.sample_real(&Self::site(z), &DistKind::normal(lift(z as f64), one))?;
        h.observe("y", &DistKind::normal(x, one), ObsValue::Real(Self::Y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slp::discover;
    use approx::assert_abs_diff_eq;

    #[test]
    fn branch_boundaries() {
        assert_eq!(NormalIntervals::branch(-4.0), 0);
        assert_eq!(NormalIntervals::branch(-3.999), 1);
        assert_eq!(NormalIntervals::branch(-3.0), 1);
        assert_eq!(NormalIntervals::branch(0.0), 4);
        assert_eq!(NormalIntervals::branch(0.5), 5);
        assert_eq!(NormalIntervals::branch(4.0), 8);
        assert_eq!(NormalIntervals::branch(4.001), 9);
    }

    #[test]
    fn oracle_values() {
        let p = NormalIntervals::interval_masses();
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], 0.211_855_398_583_397, epsilon = 1e-9);
        let z = NormalIntervals::slp_evidence();
        // N(2; 0, √2) and N(2; 2, √2) by hand.
        let n0 = (-1.0f64).exp() / (4.0 * std::f64::consts::PI).sqrt();
        let n2 = 1.0 / (4.0 * std::f64::consts::PI).sqrt();
        assert_abs_diff_eq!(z[0], p[0] * n0, epsilon = 1e-15);
        assert_abs_diff_eq!(z[0], 0.02199, epsilon = 5e-6);
        assert_abs_diff_eq!(p[2], 0.070_325_14, epsilon = 1e-7);
        assert_abs_diff_eq!(z[2], p[2] * n2, epsilon = 1e-15);
        assert_abs_diff_eq!(z[2], 0.01984, epsilon = 5e-6);
    }

    #[test]
    fn ten_slps() {
        let r = discover(&NormalIntervals, 1000, 2, "discovery").unwrap();
        assert_eq!(r.slps.len(), 10);
    }
}
