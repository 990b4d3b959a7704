//! Successive halving over SLP candidates, and its online variant that
//! re-ranks by `exp(α·L_surr) / t_k` across repeated runs.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Something the scheduler can train and score.
pub trait Candidate: Send {
    fn train(&mut self, iterations: usize);
    fn score(&mut self) -> PhaseScore;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseScore {
    /// Truncated local ELBO estimate, used by offline SH.
    #[serde(with = "crate::nonfinite")]
    pub elbo: f64,
    /// Surrogate ELBO estimate, used by the online ranking.
    #[serde(with = "crate::nonfinite")]
    pub surrogate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShConfig {
    /// Total iterations `T` per SH run.
    pub budget: usize,
    /// Candidates left when halving stops.
    pub min_candidates: usize,
    /// Exploration exponent of the online reward.
    pub alpha: f64,
}

/// `L = ⌈log₂K − log₂m⌉ + 1` with `m` clamped to `[1, K]`, in integer
/// arithmetic: the smallest `c` with `m·2^c ≥ K`, plus one.
pub fn num_phases(k: usize, m: usize) -> usize {
    if k == 0 {
        return 0;
    }
    let m = m.clamp(1, k);
    let mut c = 0;
    while m << c < k {
        c += 1;
    }
    c + 1
}

/// `1 / (K·L)`: the smallest budget share any candidate receives.
pub fn min_budget_share(k: usize, m: usize) -> f64 {
    1.0 / (k * num_phases(k, m)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub run: usize,
    pub phase: usize,
    pub slp: usize,
    /// Iterations granted in this phase (0 for inactive candidates).
    pub iterations: usize,
    #[serde(with = "crate::nonfinite")]
    pub surrogate_elbo: f64,
    #[serde(with = "crate::nonfinite")]
    pub elbo: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShLedger {
    pub rows: Vec<LedgerRow>,
    /// Cumulative iterations per candidate.
    pub totals: Vec<usize>,
    /// Candidate indices in the order they were eliminated.
    pub eliminated: Vec<usize>,
    pub runs: usize,
}

impl ShLedger {
    pub fn phases(&self) -> usize {
        self.rows.iter().map(|r| r.phase + 1).max().unwrap_or(0)
    }

    /// Active candidates per phase.
    pub fn active_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.phases()];
        for r in self.rows.iter().filter(|r| r.active) {
            counts[r.phase] += 1;
        }
        counts
    }
}

fn validate(k: usize, config: &ShConfig) -> Result<usize, ConfigError> {
    if k == 0 {
        return Err(ConfigError::new("successive halving needs at least one candidate"));
    }
    if config.min_candidates == 0 {
        return Err(ConfigError::new("m must be at least 1"));
    }
    let l = num_phases(k, config.min_candidates);
    if config.budget < l * k {
        return Err(ConfigError::new(format!(
            "budget T = {} is below L·K = {}; some candidate would get no iterations",
            config.budget,
            l * k
        )));
    }
    Ok(l)
}

fn in_pool<R: Send>(pool: Option<&ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Trains the active candidates for `n` iterations each and scores them.
fn run_phase<C: Candidate>(
    candidates: &mut [C],
    active: &[bool],
    n: usize,
    pool: Option<&ThreadPool>,
) -> Vec<Option<PhaseScore>> {
    in_pool(pool, || {
        candidates
            .par_iter_mut()
            .enumerate()
            .map(|(i, c)| {
                active[i].then(|| {
                    c.train(n);
                    c.score()
                })
            })
            .collect()
    })
}

/// Indices to remove: the `count` lowest by `key`, ties eliminating the
/// higher index first.
fn lowest(active: &[bool], key: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    let k = |i: usize| if key[i].is_nan() { f64::NEG_INFINITY } else { key[i] };
    order.sort_by(|&a, &b| k(a).total_cmp(&k(b)).then(b.cmp(&a)));
    order.truncate(count);
    order
}

/// One successive-halving run. Ranking uses the truncated ELBO estimate, or
/// in online mode `α·L_surr − ln t_k` (the online reward in log space) with
/// cumulative `t_k`.
fn halving_run<C: Candidate>(
    candidates: &mut [C],
    config: &ShConfig,
    pool: Option<&ThreadPool>,
    ledger: &mut ShLedger,
    online: bool,
) -> Result<(), ConfigError> {
    let k = candidates.len();
    let l = validate(k, config)?;
    let m = config.min_candidates.min(k);
    ledger.totals.resize(k, 0);
    let mut active = vec![true; k];
    let first_phase = ledger.phases();
    let mut last = vec![
        PhaseScore {
            elbo: f64::NAN,
            surrogate: f64::NAN
        };
        k
    ];
    for phase in 0..l {
        let size = active.iter().filter(|a| **a).count();
        let n = config.budget / (l * size);
        let scores = run_phase(candidates, &active, n, pool);
        for (i, s) in scores.iter().enumerate() {
            if let Some(s) = s {
                last[i] = *s;
                ledger.totals[i] += n;
            }
        }
        for i in 0..k {
            ledger.rows.push(LedgerRow {
                run: ledger.runs,
                phase: first_phase + phase,
                slp: i,
                iterations: if active[i] { n } else { 0 },
                surrogate_elbo: last[i].surrogate,
                elbo: last[i].elbo,
                active: active[i],
            });
        }
        let key: Vec<f64> = (0..k)
            .map(|i| {
                if online {
                    config.alpha * last[i].surrogate - (ledger.totals[i] as f64).ln()
                } else {
                    last[i].elbo
                }
            })
            .collect();
        let remove = (size / 2).min(size - m.min(size));
        for i in lowest(&active, &key, remove) {
            active[i] = false;
            ledger.eliminated.push(i);
        }
    }
    ledger.runs += 1;
    Ok(())
}

/// Successive halving with ranking on the truncated local ELBO estimate.
/// Eliminated candidates keep their last state.
pub fn successive_halving<C: Candidate>(
    candidates: &mut [C],
    config: &ShConfig,
    pool: Option<&ThreadPool>,
) -> Result<ShLedger, ConfigError> {
    let mut ledger = ShLedger::default();
    halving_run(candidates, config, pool, &mut ledger, false)?;
    Ok(ledger)
}

/// When to stop repeating online SH runs. At least one limit must be set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StopRule {
    pub max_runs: Option<usize>,
    pub max_wall: Option<Duration>,
}

impl StopRule {
    fn done(&self, runs: usize, started: Instant) -> bool {
        self.max_runs.is_some_and(|m| runs >= m)
            || self.max_wall.is_some_and(|w| started.elapsed() >= w)
    }
}

/// Repeated SH runs. Between runs `extend` may append newly discovered
/// candidates, which start with `t_k = 0`; cumulative iteration counts
/// persist across runs.
pub fn online_successive_halving<C: Candidate>(
    candidates: &mut Vec<C>,
    config: &ShConfig,
    stop: &StopRule,
    mut extend: impl FnMut(usize, &mut Vec<C>),
    pool: Option<&ThreadPool>,
) -> Result<ShLedger, ConfigError> {
    if stop.max_runs.is_none() && stop.max_wall.is_none() {
        return Err(ConfigError::new("online SDVI needs max_runs or a wall-clock limit"));
    }
    if !(config.alpha > 0.0 && config.alpha <= 1.0) {
        return Err(ConfigError::new(format!("alpha = {} must lie in (0, 1]", config.alpha)));
    }
    let started = Instant::now();
    let mut ledger = ShLedger::default();
    while !stop.done(ledger.runs, started) {
        halving_run(candidates, config, pool, &mut ledger, true)?;
        if !stop.done(ledger.runs, started) {
            extend(ledger.runs, candidates);
        }
    }
    Ok(ledger)
}

/// The online reward `exp(α·L_surr) / t`.
pub fn online_reward(alpha: f64, surrogate_elbo: f64, t: usize) -> f64 {
    (alpha * surrogate_elbo).exp() / t as f64
}
