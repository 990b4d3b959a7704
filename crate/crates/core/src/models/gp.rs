use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::distributions::{DistKind, Draw};
use crate::mixture::Predictive;
use crate::ppl::{Handler, Interrupt, Program};
use crate::rng::stream;

use super::{lift, Feed};

/// Production probabilities for SE, RQ, PER, LIN, product, sum.
pub const RULE_PROBS: [f64; 6] = [0.2, 0.2, 0.2, 0.2, 0.1, 0.1];
pub const JITTER: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Se { lengthscale: f64 },
    Rq { lengthscale: f64, scale_mixture: f64 },
    Per { lengthscale: f64, period: f64 },
    Lin { bias: f64 },
    Prod(Box<Kernel>, Box<Kernel>),
    Sum(Box<Kernel>, Box<Kernel>),
}

impl Kernel {
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let r = a - b;
        match self {
            Kernel::Se { lengthscale } => (-0.5 * r * r / (lengthscale * lengthscale)).exp(),
            Kernel::Rq {
                lengthscale,
                scale_mixture,
            } => (1.0 + 0.5 * r * r / (scale_mixture * lengthscale * lengthscale)).powf(-scale_mixture),
            Kernel::Per { lengthscale, period } => {
                let s = (PI * r.abs() / period).sin();
                (-2.0 * s * s / (lengthscale * lengthscale)).exp()
            }
            Kernel::Lin { bias } => bias + a * b,
            Kernel::Prod(l, r) => l.eval(a, b) * r.eval(a, b),
            Kernel::Sum(l, r) => l.eval(a, b) + r.eval(a, b),
        }
    }

    pub fn contains_periodic(&self) -> bool {
        match self {
            Kernel::Per { .. } => true,
            Kernel::Prod(l, r) | Kernel::Sum(l, r) => l.contains_periodic() || r.contains_periodic(),
            _ => false,
        }
    }

    /// Structure without hyperparameters, e.g. `(PER + LIN)`.
    pub fn structure(&self) -> String {
        match self {
            Kernel::Se { .. } => "SE".into(),
            Kernel::Rq { .. } => "RQ".into(),
            Kernel::Per { .. } => "PER".into(),
            Kernel::Lin { .. } => "LIN".into(),
            Kernel::Prod(l, r) => format!("({} x {})", l.structure(), r.structure()),
            Kernel::Sum(l, r) => format!("({} + {})", l.structure(), r.structure()),
        }
    }

    /// `K(x, x)` as a dense row-major matrix.
    pub fn gram(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(x[i], x[j]);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        k
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.structure())
    }
}

/// In-place lower Cholesky factor of a row-major SPD matrix; `false` if a
/// pivot is not positive.
pub fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    true
}

fn forward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

fn backward_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Cholesky of `K + σ²I`, retried once with jitter on the diagonal.
fn factor(kernel: &Kernel, x: &[f64], noise: f64) -> Option<Vec<f64>> {
    let n = x.len();
    let mut base = kernel.gram(x);
    for i in 0..n {
        base[i * n + i] += noise * noise;
    }
    let mut a = base.clone();
    if cholesky(&mut a, n) {
        return Some(a);
    }
    for i in 0..n {
        base[i * n + i] += JITTER;
    }
    cholesky(&mut base, n).then_some(base)
}

/// `log N(y; 0, K + σ²I)`, or `None` when the Gram matrix stays
/// non-positive-definite after jitter.
pub fn gp_log_marginal(kernel: &Kernel, x: &[f64], y: &[f64], noise: f64) -> Option<f64> {
    let n = x.len();
    let l = factor(kernel, x, noise)?;
    let v = forward_solve(&l, n, y);
    let quad: f64 = v.iter().map(|t| t * t).sum();
    let log_det: f64 = (0..n).map(|i| l[i * n + i].ln()).sum();
    Some(-0.5 * quad - log_det - 0.5 * n as f64 * (2.0 * PI).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    /// Total points; the last `test_fraction` are held out.
    pub n: usize,
    pub seed: u64,
    pub test_fraction: f64,
    /// Most production draws one kernel may use.
    pub max_productions: usize,
    pub period: f64,
    pub trend: f64,
    pub noise: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            n: 48,
            seed: 0,
            test_fraction: 0.1,
            max_productions: 3,
            period: 1.5,
            trend: 0.3,
            noise: 0.1,
        }
    }
}

/// Kernel-structure search with a PCFG prior and the GP marginalized out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gp {
    pub config: GpConfig,
    pub x_train: Vec<f64>,
    pub y_train: Vec<f64>,
    pub x_test: Vec<f64>,
    pub y_test: Vec<f64>,
}

impl Gp {
    /// `y = sin(2πx/period) + trend·x + noise` on an even grid over `[0, 6]`,
    /// standardized.
    pub fn generate(config: &GpConfig) -> Gp {
        let mut rng = stream(config.seed, "gp-data");
        let n = config.n.max(2);
        let x: Vec<f64> = (0..n).map(|i| 6.0 * i as f64 / (n - 1) as f64).collect();
        let raw: Vec<f64> = x
            .iter()
            .map(|&xi| {
                (2.0 * PI * xi / config.period).sin()
                    + config.trend * xi
                    + config.noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let y: Vec<f64> = raw.iter().map(|v| (v - mean) / sd).collect();
        let n_test = ((n as f64) * config.test_fraction).round() as usize;
        let n_train = n - n_test;
        Gp {
            config: *config,
            x_train: x[..n_train].to_vec(),
            y_train: y[..n_train].to_vec(),
            x_test: x[n_train..].to_vec(),
            y_test: y[n_train..].to_vec(),
        }
    }

    /// Productions allowed when `budget` draws remain: a binary rule needs
    /// itself and one draw per child, else only base kernels, renormalized.
    fn rule_probs(budget: usize) -> Vec<f64> {
        if budget >= 3 {
            RULE_PROBS.to_vec()
        } else {
            vec![0.25; 4]
        }
    }

    /// Samples a kernel using at most `budget` production draws; returns the
    /// kernel and the draws used. Site names carry the tree position and
    /// operator so each structure has its own address path.
    fn sample_kernel<H: Handler>(
        h: &mut H,
        prefix: &str,
        budget: usize,
    ) -> Result<(Kernel, usize), Interrupt> {
        let rule = h.sample_count(prefix, &DistKind::categorical(Self::rule_probs(budget)), true)?;
        let ig = DistKind::inverse_gamma(lift::<H::Scalar>(2.0), lift(1.0));
        let mut hyper = |name: &str| -> Result<f64, Interrupt> {
            Ok(h.sample_real(&format!("{prefix}/{name}"), &ig)?.value())
        };
        let kernel = match rule {
            0 => Kernel::Se {
                lengthscale: hyper("lengthscale")?,
            },
            1 => Kernel::Rq {
                lengthscale: hyper("lengthscale")?,
                scale_mixture: hyper("scale_mixture")?,
            },
            2 => Kernel::Per {
                lengthscale: hyper("lengthscale")?,
                period: hyper("period")?,
            },
            3 => Kernel::Lin { bias: hyper("bias")? },
            r => {
                let op = if r == 4 { "*" } else { "+" };
                let (left, used_left) = Self::sample_kernel(h, &format!("{prefix}{op}l"), budget - 2)?;
                let (right, used_right) =
                    Self::sample_kernel(h, &format!("{prefix}{op}r"), budget - 1 - used_left)?;
                let k = if r == 4 {
                    Kernel::Prod(Box::new(left), Box::new(right))
                } else {
                    Kernel::Sum(Box::new(left), Box::new(right))
                };
                return Ok((k, 1 + used_left + used_right));
            }
        };
        Ok((kernel, 1))
    }

    fn sample_structure<H: Handler>(&self, h: &mut H) -> Result<(Kernel, f64), Interrupt> {
        let (kernel, _) = Self::sample_kernel(h, "k", self.config.max_productions.max(1))?;
        let noise = h.sample_real("noise", &DistKind::half_normal(lift::<H::Scalar>(1.0)))?;
        Ok((kernel, noise.value()))
    }

    /// Kernel and noise encoded in raw draws.
    pub fn decode(&self, draws: &[Draw]) -> Option<(Kernel, f64)> {
        self.sample_structure(&mut Feed::new(draws)).ok()
    }

    /// Pointwise predictive log-densities of the test points.
    pub fn predictive(&self, kernel: &Kernel, noise: f64) -> Option<Vec<f64>> {
        let n = self.x_train.len();
        let l = factor(kernel, &self.x_train, noise)?;
        let alpha = backward_solve(&l, n, &forward_solve(&l, n, &self.y_train));
        Some(
            self.x_test
                .iter()
                .zip(&self.y_test)
                .map(|(&xs, &ys)| {
                    let ks: Vec<f64> = self.x_train.iter().map(|&xi| kernel.eval(xs, xi)).collect();
                    let mean: f64 = ks.iter().zip(&alpha).map(|(a, b)| a * b).sum();
                    let v = forward_solve(&l, n, &ks);
                    let var = (kernel.eval(xs, xs) + noise * noise - v.iter().map(|t| t * t).sum::<f64>())
                        .max(1e-12);
                    -0.5 * (ys - mean).powi(2) / var - 0.5 * (2.0 * PI * var).ln()
                })
                .collect(),
        )
    }
}

impl Program for Gp {
    fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
        let (kernel, noise) = self.sample_structure(h)?;
        let ll = gp_log_marginal(&kernel, &self.x_train, &self.y_train, noise)
            .ok_or_else(|| Interrupt::domain("y", "Gram matrix not positive definite after jitter"))?;
        h.factor("y", H::Scalar::lift(ll))
    }

    fn differentiable(&self) -> bool {
        false
    }
}

impl Predictive for Gp {
    fn held_out_len(&self) -> usize {
        self.x_test.len()
    }

    fn predictive_log_density(&self, draws: &[Draw]) -> Vec<f64> {
        self.decode(draws)
            .and_then(|(k, noise)| self.predictive(&k, noise))
            .unwrap_or_else(|| vec![f64::NEG_INFINITY; self.x_test.len()])
    }
}
