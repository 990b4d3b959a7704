//! Straight-line programs: discovery by prior simulation, membership, SLP and
//! surrogate densities, and elimination of discrete branching draws.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::distributions::{Draw, Family, SupportSpec};
use crate::error::{Result, SdviError};
use crate::ppl::{run_prior, AddressPath, Interrupt, Program, ReplayHandler, Trace};
use crate::rng;

/// Prior simulations per independent rng stream during discovery.
const DISCOVERY_CHUNK: usize = 250;

/// Description of one path position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteInfo {
    pub family: Family,
    pub support: SupportSpec,
    pub branching: bool,
}

/// A value held fixed at a branching position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub position: usize,
    pub value: Draw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slp {
    pub index: usize,
    pub path: AddressPath,
    pub sites: Vec<SiteInfo>,
    /// One binding per branching position, with the value seen at discovery.
    pub bindings: Vec<Binding>,
    /// Set when two discovery traces on this path disagreed on a discrete
    /// branching value, so the path alone does not fix the branch.
    pub conflicting_bindings: bool,
    pub log_c: f64,
}

/// Outcome of replaying draws against one SLP.
#[derive(Debug, Clone, PartialEq)]
pub enum SlpEval<R> {
    Member(R),
    NonMember,
    Failed(Interrupt),
}

impl Slp {
    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }

    pub fn evaluate<P: Program, R: Real>(&self, program: &P, draws: &[Draw<R>]) -> SlpEval<R> {
        if draws.len() != self.path.len() {
            return SlpEval::NonMember;
        }
        match ReplayHandler::evaluate(program, draws, Some(&self.path)) {
            Ok(lp) => SlpEval::Member(lp),
            Err(Interrupt::PathDeviation(_)) => SlpEval::NonMember,
            Err(e) => SlpEval::Failed(e),
        }
    }

    pub fn membership<P: Program>(&self, program: &P, draws: &[Draw]) -> bool {
        matches!(self.evaluate(program, draws), SlpEval::Member(_))
    }

    /// `log γ_k(x)`: the program density on this SLP's support, `-inf` elsewhere.
    pub fn log_density<P: Program, R: Real>(&self, program: &P, draws: &[Draw<R>]) -> R {
        match self.evaluate(program, draws) {
            SlpEval::Member(lp) => lp,
            _ => R::lift(f64::NEG_INFINITY),
        }
    }

    /// `log(γ_k(x) + c·I[x ∉ X_k])`.
    pub fn surrogate_log_density<P: Program, R: Real>(&self, program: &P, draws: &[Draw<R>]) -> R {
        match self.evaluate(program, draws) {
            SlpEval::Member(lp) => lp,
            SlpEval::NonMember => R::lift(self.log_c),
            SlpEval::Failed(_) => R::lift(f64::NEG_INFINITY),
        }
    }

    /// Positions whose values are not fixed by discrete branching.
    pub fn free_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|p| !self.bindings.iter().any(|b| b.position == *p && self.sites[*p].support.is_discrete()))
            .collect()
    }

    /// Replaces the sampling of discrete branching draws by fixed values.
    pub fn eliminate_discrete_branching(&self) -> Elimination {
        if self.bindings.is_empty() && self.sites.iter().any(|s| s.support.is_discrete()) {
            return Elimination::NotApplicable("discrete site without branching flag".into());
        }
        if let Some(b) = self
            .bindings
            .iter()
            .find(|b| !self.sites[b.position].support.is_discrete())
        {
            return Elimination::NotApplicable(format!(
                "branching site {} is continuous",
                self.path.0[b.position]
            ));
        }
        if self.conflicting_bindings {
            return Elimination::NotApplicable("branching values differ within the path".into());
        }
        let free = self.free_positions();
        if let Some(&p) = free.iter().find(|&&p| self.sites[p].support.is_discrete()) {
            return Elimination::NotApplicable(format!(
                "non-branching discrete site {}",
                self.path.0[p]
            ));
        }
        Elimination::Reduced(ReducedSlp {
            slp: self.index,
            path: self.path.clone(),
            supports: free.iter().map(|&p| self.sites[p].support).collect(),
            free,
            fixed: self.bindings.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Elimination {
    Reduced(ReducedSlp),
    NotApplicable(String),
}

/// Density over the continuous draws of an SLP with its discrete branching
/// draws held at their fixed values. The fixed draws still contribute their
/// prior mass, as if they were observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedSlp {
    pub slp: usize,
    pub path: AddressPath,
    pub free: Vec<usize>,
    pub supports: Vec<SupportSpec>,
    pub fixed: Vec<Binding>,
}

impl ReducedSlp {
    pub fn dim(&self) -> usize {
        self.free.len()
    }

    /// Re-inserts the fixed draws around the free values.
    pub fn expand<R: Real>(&self, free_values: &[R]) -> Vec<Draw<R>> {
        let mut draws = vec![Draw::Count(0); self.path.len()];
        for (&p, &v) in self.free.iter().zip(free_values) {
            draws[p] = Draw::Real(v);
        }
        for b in &self.fixed {
            draws[b.position] = b.value.lift();
        }
        draws
    }

    pub fn log_density<P: Program, R: Real>(&self, program: &P, free_values: &[R]) -> R {
        if free_values.len() != self.free.len() {
            return R::lift(f64::NEG_INFINITY);
        }
        let draws = self.expand(free_values);
        ReplayHandler::evaluate(program, &draws, Some(&self.path))
            .unwrap_or(R::lift(f64::NEG_INFINITY))
    }

    pub fn clamps(&self) -> Vec<(usize, Draw)> {
        self.fixed.iter().map(|b| (b.position, b.value)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub slps: Vec<Slp>,
    pub hit_counts: Vec<usize>,
    /// Smallest finite `log γ` seen over all simulations.
    pub d_min: f64,
    pub total_simulations: usize,
    /// Simulations with `-inf` density or a domain error.
    pub failed_simulations: usize,
}

/// `log c = d_min + ln 0.01`.
pub fn surrogate_log_c(d_min: f64) -> f64 {
    d_min + 0.01f64.ln()
}

struct PathStats {
    hits: usize,
    sites: Vec<SiteInfo>,
    bindings: Vec<Binding>,
    conflicting: bool,
}

impl PathStats {
    fn from_trace(trace: &Trace) -> Self {
        let mut sites = Vec::new();
        let mut bindings = Vec::new();
        for (position, e) in trace.samples().enumerate() {
            let support = e.support.expect("sample entries carry a support");
            sites.push(SiteInfo {
                family: e.family,
                support,
                branching: e.branching,
            });
            if e.branching {
                bindings.push(Binding {
                    position,
                    value: e.draw().expect("sample entry"),
                });
            }
        }
        PathStats {
            hits: 1,
            sites,
            bindings,
            conflicting: false,
        }
    }

    fn absorb(&mut self, other: PathStats) {
        self.hits += other.hits;
        self.conflicting |= other.conflicting;
        for (a, b) in self.bindings.iter().zip(&other.bindings) {
            if self.sites[a.position].support.is_discrete() && a.value != b.value {
                self.conflicting = true;
            }
        }
    }
}

#[derive(Default)]
struct Partial {
    paths: BTreeMap<AddressPath, PathStats>,
    d_min: f64,
    finite: usize,
    failed: usize,
}

impl Partial {
    fn empty() -> Self {
        Partial {
            d_min: f64::INFINITY,
            ..Default::default()
        }
    }

    fn merge(mut self, other: Partial) -> Partial {
        for (path, stats) in other.paths {
            match self.paths.get_mut(&path) {
                Some(s) => s.absorb(stats),
                None => {
                    self.paths.insert(path, stats);
                }
            }
        }
        self.d_min = self.d_min.min(other.d_min);
        self.finite += other.finite;
        self.failed += other.failed;
        self
    }
}

fn simulate_chunk<P: Program>(program: &P, seed: u64, stream: &str, chunk: usize, n: usize) -> Partial {
    let mut rng = rng::stream(seed, &format!("{stream}/{chunk}"));
    let mut part = Partial::empty();
    for _ in 0..n {
        match run_prior(program, &mut rng) {
            Ok(trace) if trace.log_density.is_finite() => {
                part.d_min = part.d_min.min(trace.log_density);
                part.finite += 1;
                let stats = PathStats::from_trace(&trace);
                match part.paths.get_mut(&trace.path()) {
                    Some(s) => s.absorb(stats),
                    None => {
                        part.paths.insert(trace.path(), stats);
                    }
                }
            }
            _ => part.failed += 1,
        }
    }
    part
}

/// Finds SLPs by forward simulation. Simulations are split into fixed-size
/// chunks with their own rng streams, so the report does not depend on the
/// number of worker threads.
pub fn discover<P: Program>(program: &P, n_sims: usize, seed: u64, stream: &str) -> Result<DiscoveryReport> {
    if n_sims == 0 {
        return Err(crate::error::ConfigError::new("n_sims must be at least 1").into());
    }
    let chunks = n_sims.div_ceil(DISCOVERY_CHUNK);
    let merged = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = DISCOVERY_CHUNK.min(n_sims - c * DISCOVERY_CHUNK);
            simulate_chunk(program, seed, stream, c, n)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Partial::empty(), Partial::merge);
    if merged.finite == 0 {
        return Err(SdviError::DiscoveryFailed(n_sims));
    }
    let log_c = surrogate_log_c(merged.d_min);
    let mut slps = Vec::new();
    let mut hit_counts = Vec::new();
    for (index, (path, stats)) in merged.paths.into_iter().enumerate() {
        hit_counts.push(stats.hits);
        slps.push(Slp {
            index,
            path,
            sites: stats.sites,
            bindings: stats.bindings,
            conflicting_bindings: stats.conflicting,
            log_c,
        });
    }
    Ok(DiscoveryReport {
        slps,
        hit_counts,
        d_min: merged.d_min,
        total_simulations: n_sims,
        failed_simulations: merged.failed,
    })
}

impl DiscoveryReport {
    pub fn find(&self, path: &AddressPath) -> Option<&Slp> {
        self.slps.iter().find(|s| &s.path == path)
    }

    /// Folds a later discovery run into this one. Known SLPs keep their
    /// indices; new ones are appended in path order. `d_min` and therefore
    /// `log c` may decrease for all SLPs. Returns the indices of new SLPs.
    pub fn merge(&mut self, other: DiscoveryReport) -> Vec<usize> {
        self.d_min = self.d_min.min(other.d_min);
        self.total_simulations += other.total_simulations;
        self.failed_simulations += other.failed_simulations;
        let mut added = Vec::new();
        for (slp, hits) in other.slps.into_iter().zip(other.hit_counts) {
            match self.slps.iter().position(|s| s.path == slp.path) {
                Some(i) => self.hit_counts[i] += hits,
                None => {
                    let index = self.slps.len();
                    added.push(index);
                    self.slps.push(Slp { index, ..slp });
                    self.hit_counts.push(hits);
                }
            }
        }
        let log_c = surrogate_log_c(self.d_min);
        for s in &mut self.slps {
            s.log_c = log_c;
        }
        added
    }

    /// Index of the SLP that accepts `draws`, if any.
    pub fn locate<P: Program>(&self, program: &P, draws: &[Draw]) -> Option<usize> {
        self.slps
            .iter()
            .position(|s| matches!(s.evaluate(program, draws), SlpEval::Member(_)))
    }
}

/// The density a local guide is trained against: either the surrogate
/// `γ̃_k` over all draws of the SLP, or the reduced density over its
/// continuous draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LocalTarget {
    Surrogate(Slp),
    Eliminated(ReducedSlp),
}

impl LocalTarget {
    /// Eliminates discrete branching when possible, else uses the surrogate.
    pub fn for_slp(slp: &Slp, allow_elimination: bool) -> LocalTarget {
        if allow_elimination {
            if let Elimination::Reduced(r) = slp.eliminate_discrete_branching() {
                return LocalTarget::Eliminated(r);
            }
        }
        LocalTarget::Surrogate(slp.clone())
    }

    pub fn slp_index(&self) -> usize {
        match self {
            LocalTarget::Surrogate(s) => s.index,
            LocalTarget::Eliminated(r) => r.slp,
        }
    }

    pub fn path(&self) -> &AddressPath {
        match self {
            LocalTarget::Surrogate(s) => &s.path,
            LocalTarget::Eliminated(r) => &r.path,
        }
    }

    pub fn is_eliminated(&self) -> bool {
        matches!(self, LocalTarget::Eliminated(_))
    }

    /// Path positions covered by the guide.
    pub fn positions(&self) -> Vec<usize> {
        match self {
            LocalTarget::Surrogate(s) => (0..s.len()).collect(),
            LocalTarget::Eliminated(r) => r.free.clone(),
        }
    }

    pub fn supports(&self) -> Vec<SupportSpec> {
        match self {
            LocalTarget::Surrogate(s) => s.sites.iter().map(|i| i.support).collect(),
            LocalTarget::Eliminated(r) => r.supports.clone(),
        }
    }

    pub fn log_c(&self) -> Option<f64> {
        match self {
            LocalTarget::Surrogate(s) => Some(s.log_c),
            LocalTarget::Eliminated(_) => None,
        }
    }

    /// Full program draws for guide values.
    pub fn draws<R: Real>(&self, x: &[R]) -> Vec<Draw<R>> {
        match self {
            LocalTarget::Surrogate(_) => x.iter().map(|&v| Draw::Real(v)).collect(),
            LocalTarget::Eliminated(r) => r.expand(x),
        }
    }

    pub fn evaluate<P: Program, R: Real>(&self, program: &P, x: &[R]) -> SlpEval<R> {
        let draws = self.draws(x);
        match ReplayHandler::evaluate(program, &draws, Some(self.path())) {
            Ok(lp) => SlpEval::Member(lp),
            Err(Interrupt::PathDeviation(_)) => SlpEval::NonMember,
            Err(e) => SlpEval::Failed(e),
        }
    }

    /// `log γ_k`, `-inf` off the support.
    pub fn log_density<P: Program, R: Real>(&self, program: &P, x: &[R]) -> R {
        match self.evaluate(program, x) {
            SlpEval::Member(lp) => lp,
            _ => R::lift(f64::NEG_INFINITY),
        }
    }

    /// The training objective's density: `log γ̃_k` in surrogate mode, the
    /// reduced density otherwise.
    pub fn training_log_density<P: Program, R: Real>(&self, program: &P, x: &[R]) -> R {
        match (self.evaluate(program, x), self.log_c()) {
            (SlpEval::Member(lp), _) => lp,
            (SlpEval::NonMember, Some(log_c)) => R::lift(log_c),
            _ => R::lift(f64::NEG_INFINITY),
        }
    }

    /// Reduced targets cover their whole space, so only surrogate targets
    /// need a replay.
    pub fn accepts<P: Program>(&self, program: &P, x: &[f64]) -> bool {
        match self {
            LocalTarget::Surrogate(_) => matches!(self.evaluate(program, x), SlpEval::Member(_)),
            LocalTarget::Eliminated(_) => true,
        }
    }

    /// One prior simulation restricted to this SLP: `Some(values at the
    /// guide positions)` when the simulation lands in the SLP.
    pub fn prior_sample<P: Program, G: rand::Rng + ?Sized>(&self, program: &P, rng: &mut G) -> Option<Vec<f64>> {
        let trace = match self {
            LocalTarget::Surrogate(_) => run_prior(program, rng).ok()?,
            LocalTarget::Eliminated(r) => {
                crate::ppl::run_prior_clamped(program, rng, &r.clamps()).ok()?
            }
        };
        if &trace.path() != self.path() {
            return None;
        }
        let draws = trace.draws();
        self.positions()
            .into_iter()
            .map(|p| draws[p].as_real())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{DistKind, ObsValue};
    use crate::ppl::{Address, Handler};

    struct Branchy;

    impl Program for Branchy {
        fn run<H: Handler>(&self, h: &mut H) -> std::result::Result<(), Interrupt> {
            let n = |m: f64, s: f64| DistKind::normal(H::Scalar::lift(m), H::Scalar::lift(s));
            let x = h.sample_real_branching("x", &n(0.0, 1.0))?;
            let z = if x.value() < 0.0 {
                h.sample_real("z1", &n(-3.0, 1.0))?
            } else {
                h.sample_real("z2", &n(3.0, 1.0))?
            };
            h.observe("y", &DistKind::normal(z, H::Scalar::lift(2.0)), ObsValue::Real(2.0))
        }
    }

    /// Discrete switch between one and two continuous sites.
    struct Switch;

    impl Program for Switch {
        fn run<H: Handler>(&self, h: &mut H) -> std::result::Result<(), Interrupt> {
            let one = H::Scalar::lift(1.0);
            let zero = H::Scalar::lift(0.0);
            let k = h.sample_count("k", &DistKind::categorical(vec![0.3, 0.7]), true)?;
            for _ in 0..=k {
                let m = h.sample_real("m", &DistKind::normal(zero, one))?;
                h.observe("y", &DistKind::normal(m, one), ObsValue::Real(0.5))?;
            }
            Ok(())
        }
    }

    struct Single;

    impl Program for Single {
        fn run<H: Handler>(&self, h: &mut H) -> std::result::Result<(), Interrupt> {
            let m = h.sample_real("m", &DistKind::normal(H::Scalar::lift(0.0), H::Scalar::lift(1.0)))?;
            h.observe("y", &DistKind::normal(m, H::Scalar::lift(1.0)), ObsValue::Real(1.0))
        }
    }

    #[test]
    fn discovers_both_branches_with_balanced_hits() {
        let r = discover(&Branchy, 1000, 3, "discovery").unwrap();
        assert_eq!(r.slps.len(), 2);
        assert_eq!(r.slps[0].path.0[1], Address::new("z1", 0));
        assert_eq!(r.hit_counts.iter().sum::<usize>(), 1000);
        for &h in &r.hit_counts {
            assert!((h as i64 - 500).abs() <= 50, "{h}");
        }
        assert_eq!(r.slps[0].log_c, r.d_min + 0.01f64.ln());
    }

    #[test]
    fn discovery_is_deterministic() {
        let a = discover(&Branchy, 600, 9, "discovery").unwrap();
        let b = discover(&Branchy, 600, 9, "discovery").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_path_program() {
        let r = discover(&Single, 100, 1, "discovery").unwrap();
        assert_eq!(r.slps.len(), 1);
        assert_eq!(r.hit_counts, vec![100]);
    }

    #[test]
    fn zero_simulations_is_a_config_error() {
        assert!(matches!(
            discover(&Single, 0, 1, "d"),
            Err(SdviError::Config(_))
        ));
    }

    #[test]
    fn membership_and_densities() {
        let r = discover(&Branchy, 200, 3, "discovery").unwrap();
        let left = &r.slps[0];
        let member = [Draw::Real(-0.5), Draw::Real(-3.0)];
        let other = [Draw::Real(0.5), Draw::Real(3.0)];
        assert!(left.membership(&Branchy, &member));
        assert!(!left.membership(&Branchy, &other));
        assert!(!left.membership(&Branchy, &member[..1]));
        assert!((left.log_density(&Branchy, &member) + 6.699_962_780_174).abs() < 1e-9);
        assert_eq!(left.log_density(&Branchy, &other), f64::NEG_INFINITY);
        assert_eq!(left.surrogate_log_density(&Branchy, &other), left.log_c);
        assert_eq!(
            left.surrogate_log_density(&Branchy, &member),
            left.log_density(&Branchy, &member)
        );
    }

    #[test]
    fn surrogate_floor_from_d_min() {
        assert!((surrogate_log_c(-10.0) + 14.605_170_185_988_09).abs() < 1e-12);
        assert!((1e-9f64.ln() + 20.723).abs() < 1e-3);
    }

    #[test]
    fn continuous_branching_is_not_eliminable() {
        let r = discover(&Branchy, 200, 3, "discovery").unwrap();
        assert!(matches!(
            r.slps[0].eliminate_discrete_branching(),
            Elimination::NotApplicable(_)
        ));
    }

    #[test]
    fn discrete_branching_elimination_reinserts_values() {
        let r = discover(&Switch, 500, 4, "discovery").unwrap();
        assert_eq!(r.slps.len(), 2);
        for slp in &r.slps {
            let Elimination::Reduced(red) = slp.eliminate_discrete_branching() else {
                panic!("expected reduction")
            };
            assert_eq!(red.dim(), slp.len() - 1);
            let free: Vec<f64> = (0..red.dim()).map(|i| 0.3 * i as f64 - 0.2).collect();
            let full = red.expand(&free);
            assert_eq!(red.log_density(&Switch, &free), slp.log_density(&Switch, &full));
        }
    }

    #[test]
    fn program_without_branching_reduces_to_itself() {
        let r = discover(&Single, 50, 1, "discovery").unwrap();
        let Elimination::Reduced(red) = r.slps[0].eliminate_discrete_branching() else {
            panic!()
        };
        let x = [0.7];
        assert_eq!(
            red.log_density(&Single, &x),
            r.slps[0].log_density(&Single, &[Draw::Real(0.7)])
        );
    }

    #[test]
    fn merge_appends_new_paths() {
        let mut a = discover(&Switch, 1, 4, "one").unwrap();
        assert_eq!(a.slps.len(), 1);
        let b = discover(&Switch, 300, 4, "more").unwrap();
        let added = a.merge(b);
        assert_eq!(added, vec![1]);
        assert_eq!(a.slps[1].index, 1);
        assert_eq!(a.hit_counts.iter().sum::<usize>(), 301);
    }
}
