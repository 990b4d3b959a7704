//! Variable-by-variable BBVI: a single global guide with one variational
//! site per unique sample address, driven through the program so that guide
//! draws decide control flow, and trained with score-function gradients.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::distributions::{normal_log_prob, DistKind, Draw, ObsValue, SupportSpec};
use crate::error::{ConfigError, Result};
use crate::guide::{inverse_softplus, Bijection};
use crate::ppl::{Address, Handler, Interrupt, Program};
use crate::training::{AdamState, ElboEstimate};

/// Variational family of one address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SiteGuide {
    /// Normal over the unconstrained value, `σ = softplus(ρ)`.
    Normal { bijection: Bijection, loc: f64, rho: f64 },
    /// Softmax over `{0, .., n-1}`; for unbounded counts `n` is the cap.
    Categorical { logits: Vec<f64>, capped: bool },
}

impl SiteGuide {
    /// A site guide matched to the prior it replaces.
    fn for_prior(dist: &DistKind, cap: usize) -> Option<SiteGuide> {
        match dist.support() {
            SupportSpec::Real | SupportSpec::Positive => {
                let bijection = Bijection::for_support(dist.support())?;
                let (loc, scale) = match (dist, bijection) {
                    (DistKind::Normal { loc, scale }, Bijection::Identity) => (*loc, *scale),
                    _ => (0.0, 1.0),
                };
                Some(SiteGuide::Normal {
                    bijection,
                    loc,
                    rho: inverse_softplus(scale),
                })
            }
            SupportSpec::Finite(n) => Some(SiteGuide::Categorical {
                logits: (0..n as u64).map(|k| dist.log_prob_count(k).max(-30.0)).collect(),
                capped: false,
            }),
            SupportSpec::NonNegativeInteger => Some(SiteGuide::Categorical {
                logits: (0..cap as u64).map(|k| dist.log_prob_count(k).max(-30.0)).collect(),
                capped: true,
            }),
            SupportSpec::Euclidean(_) => None,
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            SiteGuide::Normal { loc, rho, .. } => vec![*loc, *rho],
            SiteGuide::Categorical { logits, .. } => logits.clone(),
        }
    }

    fn set_params(&mut self, p: &[f64]) {
        match self {
            SiteGuide::Normal { loc, rho, .. } => {
                *loc = p[0];
                *rho = p[1];
            }
            SiteGuide::Categorical { logits, .. } => logits.copy_from_slice(p),
        }
    }

    /// Number of values a categorical site can propose.
    pub fn support_size(&self) -> Option<usize> {
        match self {
            SiteGuide::Categorical { logits, .. } => Some(logits.len()),
            SiteGuide::Normal { .. } => None,
        }
    }

    pub fn probs(&self) -> Option<Vec<f64>> {
        match self {
            SiteGuide::Categorical { logits, .. } => Some(softmax(logits)),
            SiteGuide::Normal { .. } => None,
        }
    }

    /// Draw, `log q(draw)` and `∇_params log q(draw)`.
    fn sample<G: Rng + ?Sized>(&self, rng: &mut G) -> (Draw, f64, Vec<f64>) {
        match self {
            SiteGuide::Normal { bijection, loc, rho } => {
                let sigma = rho.softplus();
                let eps: f64 = rng.sample(StandardNormal);
                let z = loc + sigma * eps;
                let lq = normal_log_prob(z, *loc, sigma) - bijection.log_abs_det_jacobian(z);
                let sigmoid = 1.0 / (1.0 + (-rho).exp());
                let grad = vec![eps / sigma, (eps * eps - 1.0) / sigma * sigmoid];
                (Draw::Real(bijection.forward(z)), lq, grad)
            }
            SiteGuide::Categorical { logits, .. } => {
                let p = softmax(logits);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = p.len() - 1;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let grad = p
                    .iter()
                    .enumerate()
                    .map(|(i, pi)| if i == k { 1.0 - pi } else { -pi })
                    .collect();
                (Draw::Count(k as u64), p[k].ln(), grad)
            }
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// One variational site per address, keyed by `site#counter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalGuide {
    pub sites: BTreeMap<String, SiteGuide>,
    /// Support size of the capped categorical used for unbounded counts.
    pub cap: usize,
}

impl GlobalGuide {
    pub fn new(cap: usize) -> Self {
        GlobalGuide {
            sites: BTreeMap::new(),
            cap,
        }
    }

    pub fn site(&self, address: &Address) -> Option<&SiteGuide> {
        self.sites.get(&address.to_string())
    }
}

/// Runs the program with guide draws at every sample site, creating site
/// guides on first encounter.
struct GuideHandler<'a, G: Rng + ?Sized> {
    guide: &'a mut GlobalGuide,
    rng: &'a mut G,
    counters: HashMap<String, usize>,
    log_p_sample: f64,
    log_p_observe: f64,
    scale: f64,
    log_q: f64,
    grads: Vec<(String, Vec<f64>)>,
    draws: Vec<Draw>,
}

impl<G: Rng + ?Sized> Handler for GuideHandler<'_, G> {
    type Scalar = f64;

    fn sample(&mut self, site: &str, dist: &DistKind, _branching: bool) -> Result<Draw, Interrupt> {
        dist.validate().map_err(|e| Interrupt::domain(site, e.to_string()))?;
        let counter = self.counters.entry(site.to_string()).or_insert(0);
        let key = Address::new(site, *counter).to_string();
        *counter += 1;
        if !self.guide.sites.contains_key(&key) {
            let sg = SiteGuide::for_prior(dist, self.guide.cap)
                .ok_or_else(|| Interrupt::domain(site, "no variational family for this support"))?;
            self.guide.sites.insert(key.clone(), sg);
        }
        let (draw, lq, grad) = self.guide.sites[&key].sample(self.rng);
        self.log_q += lq;
        self.log_p_sample += dist.log_prob(draw);
        self.grads.push((key, grad));
        self.draws.push(draw);
        Ok(draw)
    }

    fn observe(&mut self, site: &str, dist: &DistKind, value: ObsValue<'_>) -> Result<(), Interrupt> {
        dist.validate().map_err(|e| Interrupt::domain(site, e.to_string()))?;
        self.log_p_observe += dist.log_prob_obs(value);
        Ok(())
    }

    fn factor(&mut self, site: &str, log_weight: f64) -> Result<(), Interrupt> {
        if log_weight.is_nan() {
            return Err(Interrupt::domain(site, "NaN factor"));
        }
        self.log_p_observe += log_weight;
        Ok(())
    }

    fn scale_likelihood(&mut self, factor: f64) {
        self.scale *= factor;
    }
}

/// One guide-driven execution.
pub struct GuideRun {
    pub log_p: f64,
    pub log_q: f64,
    pub draws: Vec<Draw>,
    grads: Vec<(String, Vec<f64>)>,
}

impl GuideRun {
    pub fn log_weight(&self) -> f64 {
        self.log_p - self.log_q
    }
}

/// Executes the program under the guide. Unseen addresses get fresh site
/// guides, so the guide may grow.
pub fn guide_run<P: Program, G: Rng + ?Sized>(
    guide: &mut GlobalGuide,
    program: &P,
    rng: &mut G,
) -> Result<GuideRun, Interrupt> {
    let mut h = GuideHandler {
        guide,
        rng,
        counters: HashMap::new(),
        log_p_sample: 0.0,
        log_p_observe: 0.0,
        scale: 1.0,
        log_q: 0.0,
        grads: Vec::new(),
        draws: Vec::new(),
    };
    program.run(&mut h)?;
    let log_p = h.log_p_sample + h.scale * h.log_p_observe;
    if log_p.is_nan() {
        return Err(Interrupt::domain("density", "NaN log-density"));
    }
    Ok(GuideRun {
        log_p,
        log_q: h.log_q,
        draws: h.draws,
        grads: h.grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbviConfig {
    pub iterations: usize,
    pub particles: usize,
    pub learning_rate: f64,
    /// Support size for guides of unbounded count sites.
    pub cap: usize,
    pub baseline_decay: f64,
}

impl Default for BbviConfig {
    fn default() -> Self {
        BbviConfig {
            iterations: 10_000,
            particles: 5,
            learning_rate: 0.01,
            cap: 25,
            baseline_decay: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbviStep {
    pub iteration: usize,
    /// Mean `log p − log q` over this step's particles.
    #[serde(with = "crate::nonfinite")]
    pub elbo: f64,
    /// Particles whose execution failed or had `-inf` weight.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BbviFit {
    pub guide: GlobalGuide,
    pub trajectory: Vec<BbviStep>,
}

/// Score-function ascent on `E_q[log p − log q]` with a running-mean
/// baseline. Sites missing from every particle of a step get a zero
/// gradient.
pub fn bbvi_fit<P: Program, G: Rng + ?Sized>(program: &P, config: &BbviConfig, rng: &mut G) -> Result<BbviFit> {
    if config.particles == 0 || config.cap == 0 {
        return Err(ConfigError::new("BBVI needs at least one particle and a positive cap").into());
    }
    let mut guide = GlobalGuide::new(config.cap);
    let mut adam: HashMap<String, AdamState> = HashMap::new();
    let mut baseline: Option<f64> = None;
    let mut trajectory = Vec::with_capacity(config.iterations);
    for iteration in 1..=config.iterations {
        let mut runs = Vec::with_capacity(config.particles);
        let mut dropped = 0;
        for _ in 0..config.particles {
            match guide_run(&mut guide, program, rng) {
                Ok(r) if r.log_weight().is_finite() => runs.push(r),
                _ => dropped += 1,
            }
        }
        let elbo = if dropped > 0 {
            f64::NEG_INFINITY
        } else {
            runs.iter().map(GuideRun::log_weight).sum::<f64>() / runs.len() as f64
        };
        let b = baseline.unwrap_or(0.0);
        let mut grads: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            let w = r.log_weight() - b;
            for (key, g) in &r.grads {
                let acc = grads.entry(key.as_str()).or_insert_with(|| vec![0.0; g.len()]);
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi * w / config.particles as f64;
                }
            }
        }
        for (key, site) in guide.sites.iter_mut() {
            let mut params = site.params();
            let grad = grads.remove(key.as_str()).unwrap_or_else(|| vec![0.0; params.len()]);
            let state = adam
                .entry(key.clone())
                .or_insert_with(|| AdamState::new(params.len(), config.learning_rate));
            state.ascend(&mut params, &grad);
            site.set_params(&params);
        }
        if !runs.is_empty() {
            let mean = runs.iter().map(GuideRun::log_weight).sum::<f64>() / runs.len() as f64;
            let d = config.baseline_decay;
            baseline = Some(baseline.map_or(mean, |b| d * b + (1.0 - d) * mean));
        }
        trajectory.push(BbviStep {
            iteration,
            elbo,
            dropped,
        });
    }
    Ok(BbviFit { guide, trajectory })
}

/// Plain Monte Carlo ELBO over guide-driven executions. Failed executions
/// count as `-inf` terms.
pub fn bbvi_elbo<P: Program, G: Rng + ?Sized>(
    guide: &GlobalGuide,
    program: &P,
    n: usize,
    rng: &mut G,
) -> ElboEstimate {
    let n = n.max(1);
    let mut guide = guide.clone();
    let mut terms = Vec::with_capacity(n);
    let mut failed = 0;
    for _ in 0..n {
        match guide_run(&mut guide, program, rng) {
            Ok(r) => terms.push(r.log_weight()),
            Err(_) => {
                failed += 1;
                terms.push(f64::NEG_INFINITY);
            }
        }
    }
    let nf = n as f64;
    let mean = terms.iter().sum::<f64>() / nf;
    let std_error = if n > 1 && mean.is_finite() {
        (terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt() / nf.sqrt()
    } else {
        f64::NAN
    };
    ElboEstimate {
        value: mean,
        n,
        n_accepted: n,
        std_error,
        surrogate: mean,
        failed,
    }
}

/// A posterior draw from the global guide, as raw program draws.
pub fn bbvi_sample<P: Program, G: Rng + ?Sized>(
    guide: &GlobalGuide,
    program: &P,
    rng: &mut G,
) -> Result<Vec<Draw>, Interrupt> {
    let mut guide = guide.clone();
    guide_run(&mut guide, program, rng).map(|r| r.draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ppl::replay;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `x ~ N(0,1)`, `y ~ N(x,1)` at `y = 1`: `log Z = log N(1; 0, √2)`.
    struct Conjugate;

    impl Program for Conjugate {
        fn run<H: Handler>(&self, h: &mut H) -> std::result::Result<(), Interrupt> {
            let one = H::Scalar::lift(1.0);
            let x = h.sample_real("x", &DistKind::normal(H::Scalar::lift(0.0), one))?;
            h.observe("y", &DistKind::normal(x, one), ObsValue::Real(1.0))
        }
    }

    struct PriorOnly;

    impl Program for PriorOnly {
        fn run<H: Handler>(&self, h: &mut H) -> std::result::Result<(), Interrupt> {
            let n = h.sample_count("n", &DistKind::poisson(3.0), true)?;
            for _ in 0..n {
                h.sample_real("s", &DistKind::half_normal(H::Scalar::lift(2.0)))?;
            }
            Ok(())
        }
    }

    #[test]
    fn converges_on_conjugate_toy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BbviConfig {
            iterations: 3000,
            particles: 10,
            learning_rate: 0.02,
            ..BbviConfig::default()
        };
        let fit = bbvi_fit(&Conjugate, &cfg, &mut rng).unwrap();
        let e = bbvi_elbo(&fit.guide, &Conjugate, 20_000, &mut rng);
        let log_z = normal_log_prob(1.0, 0.0, 2f64.sqrt());
        assert!((e.value - log_z).abs() < 0.05, "{} vs {log_z}", e.value);
    }

    #[test]
    fn prior_guide_on_observe_free_program_has_zero_elbo() {
        struct Plain;
        impl Program for Plain {
            fn run<H: Handler>(&self, h: &mut H) -> std::result::Result<(), Interrupt> {
                let one = H::Scalar::lift(1.0);
                h.sample_real("a", &DistKind::normal(H::Scalar::lift(0.5), one))?;
                h.sample_real("b", &DistKind::normal(H::Scalar::lift(-2.0), one * 3.0))?;
                Ok(())
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = bbvi_elbo(&GlobalGuide::new(25), &Plain, 1000, &mut rng);
        assert_abs_diff_eq!(e.value, 0.0, epsilon = 1e-12);
        assert_eq!(e.n_accepted, e.n);
    }

    #[test]
    fn capped_site_has_cap_support_and_paths_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = BbviConfig {
            iterations: 50,
            cap: 25,
            ..BbviConfig::default()
        };
        let fit = bbvi_fit(&PriorOnly, &cfg, &mut rng).unwrap();
        let site = fit.guide.site(&Address::new("n", 0)).unwrap();
        assert_eq!(site.support_size(), Some(25));
        for _ in 0..200 {
            let draws = bbvi_sample(&fit.guide, &PriorOnly, &mut rng).unwrap();
            let trace = replay(&PriorOnly, &draws).unwrap();
            assert_eq!(trace.draws(), draws);
        }
    }

    #[test]
    fn site_scores_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sites = [
            SiteGuide::Normal {
                bijection: Bijection::Log,
                loc: 0.3,
                rho: 0.2,
            },
            SiteGuide::Categorical {
                logits: vec![0.1, -0.4, 1.0],
                capped: false,
            },
        ];
        for s in &sites {
            let n = 200_000;
            let mut mean = vec![0.0; s.params().len()];
            for _ in 0..n {
                let (_, _, g) = s.sample(&mut rng);
                for (m, gi) in mean.iter_mut().zip(g) {
                    *m += gi / n as f64;
                }
            }
            for m in mean {
                assert!(m.abs() < 0.01, "{m}");
            }
        }
    }

    #[test]
    fn site_log_q_matches_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = SiteGuide::Normal {
            bijection: Bijection::Log,
            loc: 0.3,
            rho: 0.2,
        };
        let (d, lq, _) = s.sample(&mut rng);
        let x = d.as_real().unwrap();
        let sigma = 0.2f64.softplus();
        // Log-normal density.
        let oracle = -x.ln() - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            - (x.ln() - 0.3).powi(2) / (2.0 * sigma * sigma);
        assert_abs_diff_eq!(lq, oracle, epsilon = 1e-12);
    }
}
