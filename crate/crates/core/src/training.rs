//! Stochastic optimization of local guides against the surrogate ELBO, and
//! the truncated local ELBO estimator used for ranking and weighting.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::guide::LocalGuide;
use crate::ppl::{set_minibatch, Program};
use crate::rng::StreamRng;
use crate::slp::{LocalTarget, SlpEval};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradEstimatorKind {
    ScoreFunction,
    Reparameterized,
}

/// Estimator choice for one SLP and a warning when the choice is biased.
pub fn select_estimator(
    target: &LocalTarget,
    program_differentiable: bool,
    force_reparameterized: bool,
) -> (GradEstimatorKind, Option<String>) {
    if !program_differentiable {
        return (GradEstimatorKind::ScoreFunction, None);
    }
    match (target.is_eliminated(), force_reparameterized) {
        (true, _) => (GradEstimatorKind::Reparameterized, None),
        (false, false) => (GradEstimatorKind::ScoreFunction, None),
        (false, true) => (
            GradEstimatorKind::Reparameterized,
            Some(format!(
                "SLP {}: reparameterized gradients of the surrogate ELBO are biased at the support boundary",
                target.slp_index()
            )),
        ),
    }
}

/// Adam with bias correction, used for ascent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One step in the direction of `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub estimator: GradEstimatorKind,
    pub particles: usize,
    pub learning_rate: f64,
    /// Minibatch size for programs with exchangeable observations.
    pub batch_size: Option<usize>,
    /// Decay of the running-mean score-function baseline.
    pub baseline_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            estimator: GradEstimatorKind::ScoreFunction,
            particles: 5,
            learning_rate: 0.01,
            batch_size: None,
            baseline_decay: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub slp: usize,
    #[serde(with = "crate::nonfinite")]
    pub surrogate_elbo: f64,
    /// Fraction of this step's particles inside the SLP.
    pub acceptance: f64,
    #[serde(with = "crate::nonfinite")]
    pub grad_norm: f64,
    pub skipped_steps: usize,
}

/// Monte Carlo gradient of the surrogate ELBO at the current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSample {
    pub gradient: Vec<f64>,
    /// Mean of `log γ̃ − log q̃` over the particles.
    pub surrogate_elbo: f64,
    pub accepted: usize,
}

/// Score-function gradient with a fixed baseline `b`:
/// `(1/P) Σ_p ∇ log q̃(x_p) (log γ̃(x_p) − log q̃(x_p) − b)`.
pub fn score_function_gradient<P: Program, G: Rng + ?Sized>(
    guide: &LocalGuide,
    target: &LocalTarget,
    program: &P,
    particles: usize,
    baseline: f64,
    rng: &mut G,
) -> GradientSample {
    let mut xs = Vec::with_capacity(particles);
    let mut fs = Vec::with_capacity(particles);
    let mut accepted = 0;
    for _ in 0..particles {
        let x = guide.sample(rng);
        let lq = guide.log_prob(&x);
        let lg = match target.evaluate(program, &x) {
            SlpEval::Member(lp) => {
                accepted += 1;
                lp
            }
            SlpEval::NonMember => target.log_c().unwrap_or(f64::NEG_INFINITY),
            SlpEval::Failed(_) => f64::NEG_INFINITY,
        };
        fs.push(lg - lq);
        xs.push(x);
    }
    let tape = Tape::with_capacity(64 * guide.params.len() * particles);
    let pv = tape.vars(&guide.params);
    let mut objective = Var::constant(0.0);
    for (x, f) in xs.iter().zip(&fs) {
        let xv: Vec<Var> = x.iter().map(|&v| Var::constant(v)).collect();
        objective = objective + guide.log_prob_with(&pv, &xv) * ((f - baseline) / particles as f64);
    }
    let grads = tape.backward(objective);
    GradientSample {
        gradient: pv.iter().map(|&p| grads.wrt(p)).collect(),
        surrogate_elbo: fs.iter().sum::<f64>() / particles as f64,
        accepted,
    }
}

/// Reparameterized gradient, differentiating through the guide sample and
/// the target density.
pub fn reparameterized_gradient<P: Program, G: Rng + ?Sized>(
    guide: &LocalGuide,
    target: &LocalTarget,
    program: &P,
    particles: usize,
    rng: &mut G,
) -> GradientSample {
    let tape = Tape::new();
    let pv = tape.vars(&guide.params);
    let mut objective = Var::constant(0.0);
    let mut accepted = 0;
    for _ in 0..particles {
        let eps = guide.sample_noise(rng);
        let x = guide.transform_with(&pv, &eps);
        let lq = guide.log_prob_with(&pv, &x);
        let lg = match target.evaluate(program, &x) {
            SlpEval::Member(lp) => {
                accepted += 1;
                lp
            }
            SlpEval::NonMember => Var::constant(target.log_c().unwrap_or(f64::NEG_INFINITY)),
            SlpEval::Failed(_) => Var::constant(f64::NEG_INFINITY),
        };
        objective = objective + (lg - lq) / particles as f64;
    }
    let mut gradient: Vec<f64> = if tape.domain_error().is_some() {
        vec![f64::NAN; pv.len()]
    } else {
        let grads = tape.backward(objective);
        pv.iter().map(|&p| grads.wrt(p)).collect()
    };
    if !objective.value().is_finite() {
        gradient.iter_mut().for_each(|g| *g = f64::NAN);
    }
    GradientSample {
        gradient,
        surrogate_elbo: objective.value(),
        accepted,
    }
}

/// Training state of one local guide.
#[derive(Debug, Clone)]
pub struct LocalTrainer {
    pub target: LocalTarget,
    pub guide: LocalGuide,
    pub config: TrainConfig,
    pub adam: AdamState,
    pub baseline: Option<f64>,
    pub iterations: usize,
    pub skipped_steps: usize,
    pub rng: StreamRng,
}

impl LocalTrainer {
    pub fn new(target: LocalTarget, guide: LocalGuide, config: TrainConfig, rng: StreamRng) -> Self {
        let adam = AdamState::new(guide.params.len(), config.learning_rate);
        LocalTrainer {
            target,
            guide,
            config,
            adam,
            baseline: None,
            iterations: 0,
            skipped_steps: 0,
            rng,
        }
    }

    /// One ascent step, on a fresh minibatch when configured.
    pub fn step<P: Program>(&mut self, program: &P) -> StepMetrics {
        match (self.config.batch_size, program.data_size()) {
            (Some(b), Some(n)) if b < n => {
                let batch = sample_indices(&mut self.rng, n, b.max(1)).into_vec();
                let view = set_minibatch(program, batch).expect("batch indices are in range");
                self.step_on(&view)
            }
            _ => self.step_on(program),
        }
    }

    fn step_on<P: Program>(&mut self, program: &P) -> StepMetrics {
        let particles = self.config.particles.max(1);
        let sample = match self.config.estimator {
            GradEstimatorKind::ScoreFunction => score_function_gradient(
                &self.guide,
                &self.target,
                program,
                particles,
                self.baseline.unwrap_or(0.0),
                &mut self.rng,
            ),
            GradEstimatorKind::Reparameterized => {
                reparameterized_gradient(&self.guide, &self.target, program, particles, &mut self.rng)
            }
        };
        self.iterations += 1;
        let grad_norm = sample.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm.is_finite() {
            self.adam.ascend(&mut self.guide.params, &sample.gradient);
        } else {
            self.skipped_steps += 1;
        }
        if sample.surrogate_elbo.is_finite() {
            let d = self.config.baseline_decay;
            self.baseline = Some(match self.baseline {
                Some(b) => d * b + (1.0 - d) * sample.surrogate_elbo,
                None => sample.surrogate_elbo,
            });
        }
        StepMetrics {
            iteration: self.iterations,
            slp: self.target.slp_index(),
            surrogate_elbo: sample.surrogate_elbo,
            acceptance: sample.accepted as f64 / particles as f64,
            grad_norm,
            skipped_steps: self.skipped_steps,
        }
    }

    /// Runs `n` steps and returns their metrics.
    pub fn train<P: Program>(&mut self, program: &P, n: usize) -> Vec<StepMetrics> {
        (0..n).map(|_| self.step(program)).collect()
    }
}

/// Truncated local ELBO estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    #[serde(with = "crate::nonfinite")]
    pub value: f64,
    pub n: usize,
    pub n_accepted: usize,
    /// Sample standard deviation of the accepted terms over `sqrt(N_A)`.
    #[serde(with = "crate::nonfinite")]
    pub std_error: f64,
    /// Plain Monte Carlo estimate of the surrogate ELBO on the same proposals.
    #[serde(with = "crate::nonfinite")]
    pub surrogate: f64,
    /// Proposals in the SLP whose density evaluation failed; counted as rejected.
    pub failed: usize,
}

impl ElboEstimate {
    pub fn acceptance_rate(&self) -> f64 {
        self.n_accepted as f64 / self.n as f64
    }
}

/// `L̂ = (1/N_A) Σ_{i∈A} [log γ_k(x_i) − log q̃(x_i)] + ln(N_A / N)` over `N`
/// proposals from the untruncated guide.
pub fn estimate_local_elbo<P: Program, G: Rng + ?Sized>(
    guide: &LocalGuide,
    target: &LocalTarget,
    program: &P,
    n: usize,
    rng: &mut G,
) -> ElboEstimate {
    let n = n.max(1);
    let mut terms = Vec::with_capacity(n);
    let mut surrogate = 0.0;
    let mut failed = 0;
    for _ in 0..n {
        let x = guide.sample(rng);
        let lq = guide.log_prob(&x);
        match target.evaluate(program, &x) {
            SlpEval::Member(lg) => {
                terms.push(lg - lq);
                surrogate += lg - lq;
            }
            SlpEval::NonMember => surrogate += target.log_c().unwrap_or(f64::NEG_INFINITY) - lq,
            SlpEval::Failed(_) => {
                failed += 1;
                surrogate = f64::NEG_INFINITY;
            }
        }
    }
    let n_accepted = terms.len();
    let (value, std_error) = if n_accepted == 0 {
        (f64::NEG_INFINITY, f64::NAN)
    } else {
        let na = n_accepted as f64;
        let mean = terms.iter().sum::<f64>() / na;
        let se = if n_accepted > 1 {
            let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (na - 1.0);
            var.sqrt() / na.sqrt()
        } else {
            0.0
        };
        (mean + (na / n as f64).ln(), se)
    };
    ElboEstimate {
        value,
        n,
        n_accepted,
        std_error,
        surrogate: surrogate / n as f64,
        failed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{normal_log_prob, DistKind, ObsValue};
    use crate::guide::LocalGuide;
    use crate::ppl::{Handler, Interrupt};
    use crate::slp::discover;
    use rand::SeedableRng;

    /// Unnormalized N(3, 1) target: a flat "prior" factor plus a likelihood.
    struct Shifted;

    impl Program for Shifted {
        fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
            let x = h.sample_real("x", &DistKind::normal(H::Scalar::lift(3.0), H::Scalar::lift(1.0)))?;
            let _ = x;
            Ok(())
        }
    }

    /// Prior N(0, 1), likelihood N(2; x, 1).
    struct Conjugate;

    impl Program for Conjugate {
        fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
            let one = H::Scalar::lift(1.0);
            let x = h.sample_real("x", &DistKind::normal(H::Scalar::lift(0.0), one))?;
            h.observe("y", &DistKind::normal(x, one), ObsValue::Real(2.0))
        }
    }

    fn setup<P: Program>(p: &P) -> (LocalTarget, LocalGuide) {
        let r = discover(p, 10, 0, "d").unwrap();
        let t = LocalTarget::for_slp(&r.slps[0], false);
        let g = LocalGuide::new(&t).unwrap();
        (t, g)
    }

    fn rng(seed: u64) -> StreamRng {
        StreamRng::seed_from_u64(seed)
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = AdamState::new(3, 0.01);
        let mut p = vec![0.0, 1.0, -2.0];
        adam.ascend(&mut p, &[1.0, 1.0, 1.0]);
        for (after, before) in p.iter().zip([0.0, 1.0, -2.0]) {
            assert!((after - before - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn estimator_selection() {
        let (t, _) = setup(&Conjugate);
        assert_eq!(select_estimator(&t, true, false).0, GradEstimatorKind::ScoreFunction);
        let (k, warn) = select_estimator(&t, true, true);
        assert_eq!(k, GradEstimatorKind::Reparameterized);
        assert!(warn.is_some());
        let r = discover(&Conjugate, 10, 0, "d").unwrap();
        let elim = LocalTarget::for_slp(&r.slps[0], true);
        assert_eq!(select_estimator(&elim, true, false).0, GradEstimatorKind::Reparameterized);
        assert_eq!(select_estimator(&elim, false, false).0, GradEstimatorKind::ScoreFunction);
    }

    /// Per-particle score-function gradient for μ, with its standard error.
    fn mu_gradient_stats(mu: f64, baseline: f64, n: usize, seed: u64) -> (f64, f64) {
        let (t, mut g) = setup(&Shifted);
        g.set_site(0, mu, 1.0);
        let mut r = rng(seed);
        let chunk = 1000;
        let mut vals = Vec::new();
        for _ in 0..n / chunk {
            let s = score_function_gradient(&g, &t, &Shifted, chunk, baseline, &mut r);
            vals.push(s.gradient[0]);
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        (m, (var / vals.len() as f64).sqrt())
    }

    #[test]
    fn score_function_gradient_is_unbiased() {
        for (i, mu) in [-1.0, 0.0, 1.5, 3.0, 4.2].into_iter().enumerate() {
            let (m, se) = mu_gradient_stats(mu, 0.0, 100_000, i as u64);
            assert!((m - (3.0 - mu)).abs() <= 3.0 * se + 1e-12, "mu {mu}: {m} ± {se}");
        }
    }

    #[test]
    fn gradient_vanishes_when_guide_equals_target() {
        let (m, se) = mu_gradient_stats(3.0, 0.0, 100_000, 11);
        assert!(m.abs() <= 3.0 * se + 1e-12, "{m} ± {se}");
    }

    #[test]
    fn constant_shift_leaves_gradient_expectation_unchanged() {
        let (a, sa) = mu_gradient_stats(0.5, 0.0, 50_000, 21);
        let (b, sb) = mu_gradient_stats(0.5, 7.0, 50_000, 21);
        assert!((a - b).abs() < 3.0 * (sa * sa + sb * sb).sqrt());
    }

    #[test]
    fn reparameterized_gradient_matches_closed_form() {
        let (t, mut g) = setup(&Shifted);
        g.set_site(0, 0.0, 1.0);
        let s = reparameterized_gradient(&g, &t, &Shifted, 20_000, &mut rng(3));
        // d/dμ E[log N(x; 3, 1)] = 3 - μ; the entropy term does not depend on μ.
        assert!((s.gradient[0] - 3.0).abs() < 0.05, "{:?}", s.gradient);
    }

    #[test]
    fn conjugate_elbo_reaches_log_evidence() {
        let (t, mut g) = setup(&Conjugate);
        // Exact posterior N(1, 1/2).
        g.set_site(0, 1.0, 0.5f64.sqrt());
        let e = estimate_local_elbo(&g, &t, &Conjugate, 10_000, &mut rng(4));
        let log_z = normal_log_prob(2.0, 0.0, 2f64.sqrt());
        assert!((log_z + 2.2655).abs() < 1e-4);
        assert!((e.value - log_z).abs() < 0.02);
        assert_eq!(e.n_accepted, 10_000);
    }

    #[test]
    fn training_converges_on_conjugate_toy() {
        let (t, g) = setup(&Conjugate);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            particles: 10,
            ..TrainConfig::default()
        };
        let mut tr = LocalTrainer::new(t.clone(), g, cfg, rng(5));
        tr.train(&Conjugate, 3000);
        assert!((tr.guide.loc(0) - 1.0).abs() < 0.1, "{}", tr.guide.loc(0));
        assert!((tr.guide.scale(0) - 0.5f64.sqrt()).abs() < 0.1);
        let e = estimate_local_elbo(&tr.guide, &t, &Conjugate, 10_000, &mut rng(6));
        let log_z = normal_log_prob(2.0, 0.0, 2f64.sqrt());
        assert!(e.value <= log_z + 3.0 * e.std_error);
        assert!(e.value > log_z - 0.05);
    }

    #[test]
    fn elbo_shift_by_constant() {
        struct Plus<const C: i32>;
        impl<const C: i32> Program for Plus<C> {
            fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
                Conjugate.run(h)?;
                h.factor("shift", H::Scalar::lift(C as f64))
            }
        }
        let (t, g) = setup(&Conjugate);
        let a = estimate_local_elbo(&g, &t, &Plus::<0>, 500, &mut rng(7));
        let b = estimate_local_elbo(&g, &t, &Plus::<5>, 500, &mut rng(7));
        assert!((b.value - a.value - 5.0).abs() < 1e-9);
    }

    #[test]
    fn no_accepted_proposals_gives_negative_infinity() {
        struct Signed;
        impl Program for Signed {
            fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
                let one = H::Scalar::lift(1.0);
                let x = h.sample_real_branching("x", &DistKind::normal(H::Scalar::lift(0.0), one))?;
                if x.value() < 0.0 {
                    h.sample_real("n", &DistKind::normal(H::Scalar::lift(0.0), one))?;
                }
                Ok(())
            }
        }
        let r = discover(&Signed, 100, 0, "d").unwrap();
        let t = LocalTarget::for_slp(&r.slps[0], false);
        assert_eq!(t.path().len(), 1);
        let mut g = LocalGuide::new(&t).unwrap();
        g.set_site(0, -40.0, 0.1);
        let e = estimate_local_elbo(&g, &t, &Signed, 100, &mut rng(8));
        assert_eq!(e.value, f64::NEG_INFINITY);
        assert_eq!(e.n_accepted, 0);
    }

    #[test]
    fn non_finite_gradients_are_skipped() {
        struct Broken;
        impl Program for Broken {
            fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
                let x = h.sample_real("x", &DistKind::normal(H::Scalar::lift(0.0), H::Scalar::lift(1.0)))?;
                h.factor("bad", x.ln())
            }
        }
        let (t, mut g) = setup(&Broken);
        g.set_site(0, -30.0, 0.1);
        let mut tr = LocalTrainer::new(t, g.clone(), TrainConfig::default(), rng(9));
        let m = tr.train(&Broken, 5);
        assert_eq!(m.last().unwrap().skipped_steps, 5);
        assert_eq!(tr.guide.params, g.params);
    }
}
