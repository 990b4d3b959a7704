//! End-to-end SDVI: discovery, per-SLP guide construction and
//! initialization, successive-halving training, final truncated ELBO
//! estimates and mixture weights.

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, Result};
use crate::guide::{init_from_prior, InitConfig, InitReport, LocalGuide, TruncatedGuide, DEFAULT_MAX_ATTEMPTS};
use crate::mixture::{optimal_weights, MixtureWeights};
use crate::ppl::Program;
use crate::rng::stream;
use crate::scheduler::{
    online_successive_halving, successive_halving, Candidate, PhaseScore, ShConfig, ShLedger, StopRule,
};
use crate::slp::{discover, surrogate_log_c, DiscoveryReport, LocalTarget};
use crate::training::{
    estimate_local_elbo, select_estimator, ElboEstimate, GradEstimatorKind, LocalTrainer, StepMetrics,
    TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdviConfig {
    pub seed: u64,
    pub discovery_sims: usize,
    /// Iterations `T` per successive-halving run.
    pub budget: usize,
    /// Survivors `m`; defaults to the worker count.
    pub min_candidates: Option<usize>,
    /// Exploration exponent of online SDVI.
    pub alpha: f64,
    pub init: InitConfig,
    pub particles: usize,
    pub learning_rate: f64,
    pub batch_size: Option<usize>,
    pub baseline_decay: f64,
    /// Use reparameterized gradients even where the surrogate is
    /// discontinuous.
    pub force_reparameterized: bool,
    pub eliminate_discrete_branching: bool,
    /// Proposals per ELBO estimate at phase boundaries.
    pub phase_elbo_samples: usize,
    /// Proposals per final ELBO estimate, which set the weights.
    pub weight_samples: usize,
    pub max_rejection_attempts: usize,
    pub workers: usize,
    pub record_metrics: bool,
}

impl Default for SdviConfig {
    fn default() -> Self {
        SdviConfig {
            seed: 0,
            discovery_sims: 1000,
            budget: 100_000,
            min_candidates: None,
            alpha: 1.0,
            init: InitConfig::default(),
            particles: 5,
            learning_rate: 0.01,
            batch_size: None,
            baseline_decay: 0.9,
            force_reparameterized: false,
            eliminate_discrete_branching: true,
            phase_elbo_samples: 100,
            weight_samples: 1000,
            max_rejection_attempts: DEFAULT_MAX_ATTEMPTS,
            workers: 1,
            record_metrics: false,
        }
    }
}

impl SdviConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("discovery_sims", self.discovery_sims),
            ("budget", self.budget),
            ("particles", self.particles),
            ("phase_elbo_samples", self.phase_elbo_samples),
            ("weight_samples", self.weight_samples),
            ("workers", self.workers),
            ("init.n_samples", self.init.n_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::new(format!("{name} must be at least 1")));
            }
        }
        if self.min_candidates == Some(0) {
            return Err(ConfigError::new("m must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(ConfigError::new("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(ConfigError::new("baseline_decay must lie in [0, 1)"));
        }
        if self.batch_size == Some(0) {
            return Err(ConfigError::new("batch_size must be at least 1"));
        }
        Ok(())
    }

    pub fn min_candidates(&self) -> usize {
        self.min_candidates.unwrap_or(self.workers).max(1)
    }

    fn sh_config(&self) -> ShConfig {
        ShConfig {
            budget: self.budget,
            min_candidates: self.min_candidates(),
            alpha: self.alpha,
        }
    }

    fn train_config(&self, estimator: GradEstimatorKind) -> TrainConfig {
        TrainConfig {
            estimator,
            particles: self.particles,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            baseline_decay: self.baseline_decay,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub estimators: Vec<GradEstimatorKind>,
    pub init: Vec<Option<InitReport>>,
    /// Why an SLP could not be trained, if it could not.
    pub failures: Vec<Option<String>>,
    pub iterations: Vec<usize>,
    pub skipped_steps: Vec<usize>,
    pub warnings: Vec<String>,
    pub discovery_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdviResult {
    pub discovery: DiscoveryReport,
    pub targets: Vec<LocalTarget>,
    pub guides: Vec<TruncatedGuide>,
    pub estimates: Vec<ElboEstimate>,
    pub weights: MixtureWeights,
    #[serde(with = "crate::nonfinite")]
    pub global_elbo: f64,
    pub ledger: ShLedger,
    pub diagnostics: Diagnostics,
    /// Per-step training metrics, when recorded.
    #[serde(skip)]
    pub metrics: Vec<StepMetrics>,
}

impl SdviResult {
    /// Acceptance rate of each SLP's final ELBO estimate.
    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.acceptance_rate()).collect()
    }

    pub fn local_elbos(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.value).collect()
    }
}

/// One SLP under training.
struct SlpCandidate<'p, P> {
    program: &'p P,
    trainer: LocalTrainer,
    estimate_rng: crate::rng::StreamRng,
    phase_samples: usize,
    init: Option<InitReport>,
    failure: Option<String>,
    warning: Option<String>,
    record: bool,
    metrics: Vec<StepMetrics>,
}

impl<P: Program> Candidate for SlpCandidate<'_, P> {
    fn train(&mut self, iterations: usize) {
        if self.failure.is_some() {
            return;
        }
        if self.record {
            let m = self.trainer.train(self.program, iterations);
            self.metrics.extend(m);
        } else {
            for _ in 0..iterations {
                self.trainer.step(self.program);
            }
        }
    }

    fn score(&mut self) -> PhaseScore {
        if self.failure.is_some() {
            return PhaseScore {
                elbo: f64::NEG_INFINITY,
                surrogate: f64::NEG_INFINITY,
            };
        }
        let e = estimate_local_elbo(
            &self.trainer.guide,
            &self.trainer.target,
            self.program,
            self.phase_samples,
            &mut self.estimate_rng,
        );
        PhaseScore {
            elbo: e.value,
            surrogate: e.surrogate,
        }
    }
}

fn slp_stream(seed: u64, kind: &str, target: &LocalTarget) -> crate::rng::StreamRng {
    stream(seed, &format!("{kind}/{}", target.path()))
}

fn build_candidate<'p, P: Program>(
    program: &'p P,
    target: LocalTarget,
    config: &SdviConfig,
) -> SlpCandidate<'p, P> {
    let (estimator, warning) =
        select_estimator(&target, program.differentiable(), config.force_reparameterized);
    let mut init_rng = slp_stream(config.seed, "init", &target);
    let (guide, init, failure) = match LocalGuide::new(&target) {
        Ok(mut guide) => match init_from_prior(&mut guide, &target, program, &config.init, &mut init_rng) {
            Ok(report) => (guide, Some(report), None),
            Err(e) => (guide, None, Some(e.to_string())),
        },
        Err(e) => (empty_guide(&target), None, Some(e.to_string())),
    };
    let train_rng = slp_stream(config.seed, "train", &target);
    let estimate_rng = slp_stream(config.seed, "estimate", &target);
    SlpCandidate {
        program,
        trainer: LocalTrainer::new(target, guide, config.train_config(estimator), train_rng),
        estimate_rng,
        phase_samples: config.phase_elbo_samples,
        init,
        failure,
        warning,
        record: config.record_metrics,
        metrics: Vec::new(),
    }
}

/// Placeholder for SLPs whose guide cannot be built; never trained.
fn empty_guide(target: &LocalTarget) -> LocalGuide {
    LocalGuide {
        slp: target.slp_index(),
        mode: if target.is_eliminated() {
            crate::guide::GuideMode::Eliminated
        } else {
            crate::guide::GuideMode::Surrogate
        },
        sites: Vec::new(),
        params: Vec::new(),
    }
}

fn in_pool<R: Send>(pool: &ThreadPool, f: impl FnOnce() -> R + Send) -> R {
    pool.install(f)
}

fn build_candidates<'p, P: Program>(
    program: &'p P,
    targets: Vec<LocalTarget>,
    config: &SdviConfig,
    pool: &ThreadPool,
) -> Vec<SlpCandidate<'p, P>> {
    in_pool(pool, || {
        targets
            .into_par_iter()
            .map(|t| build_candidate(program, t, config))
            .collect()
    })
}

fn make_pool(workers: usize) -> Result<ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ConfigError::new(format!("cannot start {workers} workers: {e}")).into())
}

fn targets_for(report: &DiscoveryReport, indices: impl IntoIterator<Item = usize>, config: &SdviConfig) -> Vec<LocalTarget> {
    indices
        .into_iter()
        .map(|i| LocalTarget::for_slp(&report.slps[i], config.eliminate_discrete_branching))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn finish<P: Program>(
    program: &P,
    discovery: DiscoveryReport,
    candidates: Vec<SlpCandidate<'_, P>>,
    ledger: ShLedger,
    discovery_runs: usize,
    warnings: Vec<String>,
    config: &SdviConfig,
    pool: &ThreadPool,
) -> Result<SdviResult> {
    let estimates: Vec<ElboEstimate> = in_pool(pool, || {
        candidates
            .par_iter()
            .map(|c| {
                let target = &c.trainer.target;
                if c.failure.is_some() {
                    return ElboEstimate {
                        value: f64::NEG_INFINITY,
                        n: 0,
                        n_accepted: 0,
                        std_error: f64::NAN,
                        surrogate: f64::NEG_INFINITY,
                        failed: 0,
                    };
                }
                let mut rng = slp_stream(config.seed, "final", target);
                estimate_local_elbo(&c.trainer.guide, target, program, config.weight_samples, &mut rng)
            })
            .collect()
    });
    let elbos: Vec<f64> = estimates.iter().map(|e| e.value).collect();
    let weights = optimal_weights(&elbos)?;
    let global_elbo = crate::distributions::log_sum_exp(&elbos);

    let mut diagnostics = Diagnostics {
        discovery_runs,
        warnings,
        ..Diagnostics::default()
    };
    let mut targets = Vec::with_capacity(candidates.len());
    let mut guides = Vec::with_capacity(candidates.len());
    let mut metrics = Vec::new();
    for (c, e) in candidates.into_iter().zip(&estimates) {
        diagnostics.estimators.push(c.trainer.config.estimator);
        diagnostics.init.push(c.init);
        if let Some(w) = c.warning {
            diagnostics.warnings.push(w);
        }
        if let Some(f) = &c.failure {
            diagnostics
                .warnings
                .push(format!("SLP {}: not trained: {f}", c.trainer.target.slp_index()));
        }
        diagnostics.failures.push(c.failure);
        diagnostics.iterations.push(c.trainer.iterations);
        diagnostics.skipped_steps.push(c.trainer.skipped_steps);
        metrics.extend(c.metrics);
        let mut guide = TruncatedGuide::new(c.trainer.guide);
        guide.max_attempts = config.max_rejection_attempts;
        guide.acceptance = (e.n > 0).then(|| e.acceptance_rate());
        guides.push(guide);
        targets.push(c.trainer.target);
    }
    Ok(SdviResult {
        discovery,
        targets,
        guides,
        estimates,
        weights,
        global_elbo,
        ledger,
        diagnostics,
        metrics,
    })
}

/// Offline SDVI: one discovery pass and one successive-halving run.
pub fn fit_sdvi<P: Program>(program: &P, config: &SdviConfig) -> Result<SdviResult> {
    config.validate()?;
    let pool = make_pool(config.workers)?;
    let discovery = discover(program, config.discovery_sims, config.seed, "discovery")?;
    let targets = targets_for(&discovery, 0..discovery.slps.len(), config);
    let mut candidates = build_candidates(program, targets, config, &pool);
    let ledger = successive_halving(&mut candidates, &config.sh_config(), Some(&pool))?;
    finish(program, discovery, candidates, ledger, 1, Vec::new(), config, &pool)
}

/// Online SDVI: repeated successive-halving runs with re-discovery between
/// runs. Newly found SLPs are appended with zero iterations.
pub fn fit_online_sdvi<P: Program>(program: &P, config: &SdviConfig, stop: &StopRule) -> Result<SdviResult> {
    config.validate()?;
    let pool = make_pool(config.workers)?;
    let mut discovery = discover(program, config.discovery_sims, config.seed, "discovery")?;
    let targets = targets_for(&discovery, 0..discovery.slps.len(), config);
    let mut candidates = build_candidates(program, targets, config, &pool);
    let mut runs = 1;
    let mut warnings = Vec::new();
    let ledger = online_successive_halving(
        &mut candidates,
        &config.sh_config(),
        stop,
        |run, cands| {
            let fresh = match discover(program, config.discovery_sims, config.seed, &format!("discovery/{run}")) {
                Ok(r) => r,
                Err(e) => {
                    warnings.push(format!("re-discovery before run {}: {e}", run + 1));
                    return;
                }
            };
            runs += 1;
            let added = discovery.merge(fresh);
            let log_c = surrogate_log_c(discovery.d_min);
            for c in cands.iter_mut() {
                if let LocalTarget::Surrogate(slp) = &mut c.trainer.target {
                    slp.log_c = log_c;
                }
            }
            let targets = targets_for(&discovery, added, config);
            cands.extend(build_candidates(program, targets, config, &pool));
        },
        Some(&pool),
    )?;
    finish(program, discovery, candidates, ledger, runs, warnings, config, &pool)
}
