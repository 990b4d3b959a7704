use std::collections::HashMap;

use rand::Rng;

use super::trace::{EntryKind, EntryValue, Trace, TraceEntry};
use super::{Address, AddressPath, Handler, Interrupt, Program};
use crate::autodiff::Real;
use crate::distributions::{DistKind, Draw, Family, ObsValue};

#[derive(Debug, Default)]
struct Recorder {
    counters: HashMap<String, usize>,
    trace: Trace,
}

impl Recorder {
    fn address(&mut self, site: &str) -> Address {
        let counter = self.counters.entry(site.to_string()).or_insert(0);
        let address = Address::new(site, *counter);
        *counter += 1;
        address
    }

    fn push_sample<R: Real>(
        &mut self,
        site: &str,
        dist: &DistKind<R>,
        draw: Draw,
        log_factor: f64,
        branching: bool,
    ) {
        let address = self.address(site);
        self.trace.entries.push(TraceEntry {
            address,
            kind: EntryKind::Sample,
            value: draw.into(),
            log_factor,
            family: dist.family(),
            support: Some(dist.support()),
            branching,
        });
    }

    fn push_observe(&mut self, site: &str, family: Family, value: EntryValue, log_factor: f64) {
        let address = self.address(site);
        self.trace.entries.push(TraceEntry {
            address,
            kind: EntryKind::Observe,
            value,
            log_factor,
            family,
            support: None,
            branching: false,
        });
    }

    fn finish(mut self, sample: f64, observe: f64, scale: f64) -> Trace {
        self.trace.sample_log_density = sample;
        self.trace.observe_log_density = observe;
        self.trace.likelihood_scale = scale;
        self.trace.log_density = sample + scale * observe;
        self.trace
    }
}

/// Draws every sample site from its prior, optionally clamping some draw
/// positions to fixed values.
pub struct PriorHandler<'a, G: Rng + ?Sized> {
    rng: &'a mut G,
    clamps: &'a [(usize, Draw)],
    position: usize,
    sample_sum: f64,
    observe_sum: f64,
    scale: f64,
    recorder: Recorder,
}

impl<'a, G: Rng + ?Sized> PriorHandler<'a, G> {
    pub fn new(rng: &'a mut G) -> Self {
        Self::clamped(rng, &[])
    }

    pub fn clamped(rng: &'a mut G, clamps: &'a [(usize, Draw)]) -> Self {
        PriorHandler {
            rng,
            clamps,
            position: 0,
            sample_sum: 0.0,
            observe_sum: 0.0,
            scale: 1.0,
            recorder: Recorder::default(),
        }
    }

    pub fn into_trace(self) -> Trace {
        self.recorder
            .finish(self.sample_sum, self.observe_sum, self.scale)
    }
}

impl<G: Rng + ?Sized> Handler for PriorHandler<'_, G> {
    type Scalar = f64;

    fn sample(&mut self, site: &str, dist: &DistKind, branching: bool) -> Result<Draw, Interrupt> {
        dist.validate()
            .map_err(|e| Interrupt::domain(site, e.to_string()))?;
        let clamp = self
            .clamps
            .iter()
            .find(|(p, _)| *p == self.position)
            .map(|(_, d)| *d);
        let draw = clamp.unwrap_or_else(|| dist.sample(self.rng));
        let lp = dist.log_prob(draw);
        self.sample_sum += lp;
        self.recorder.push_sample(site, dist, draw, lp, branching);
        self.position += 1;
        Ok(draw)
    }

    fn observe(&mut self, site: &str, dist: &DistKind, value: ObsValue<'_>) -> Result<(), Interrupt> {
        dist.validate()
            .map_err(|e| Interrupt::domain(site, e.to_string()))?;
        let lp = dist.log_prob_obs(value);
        self.observe_sum += lp;
        self.recorder
            .push_observe(site, dist.family(), value.into(), lp);
        Ok(())
    }

    fn factor(&mut self, site: &str, log_weight: f64) -> Result<(), Interrupt> {
        if log_weight.is_nan() {
            return Err(Interrupt::domain(site, "NaN factor"));
        }
        self.observe_sum += log_weight;
        self.recorder
            .push_observe(site, Family::Factor, EntryValue::Real(log_weight), log_weight);
        Ok(())
    }

    fn scale_likelihood(&mut self, factor: f64) {
        self.scale *= factor;
    }
}

/// Replays a fixed sequence of draws and accumulates the log-density.
///
/// With an expected path, each requested site is checked against it and no
/// address bookkeeping is needed: identical site-id sequences imply identical
/// occurrence counters.
pub struct ReplayHandler<'d, R: Real> {
    draws: &'d [Draw<R>],
    expected: Option<&'d AddressPath>,
    position: usize,
    sample_sum: R,
    observe_sum: R,
    scale: f64,
    recorder: Option<Recorder>,
}

/// Result of a successful replay.
#[derive(Debug, Clone)]
pub struct DensityEvaluation<R> {
    pub log_density: R,
    pub trace: Option<Trace>,
}

impl<'d, R: Real> ReplayHandler<'d, R> {
    pub fn new(draws: &'d [Draw<R>], expected: Option<&'d AddressPath>, record: bool) -> Self {
        ReplayHandler {
            draws,
            expected,
            position: 0,
            sample_sum: R::lift(0.0),
            observe_sum: R::lift(0.0),
            scale: 1.0,
            recorder: (record || expected.is_none()).then(Recorder::default),
        }
    }

    pub fn finish(self) -> Result<DensityEvaluation<R>, Interrupt> {
        if self.position != self.draws.len() {
            return Err(Interrupt::PathDeviation(self.position));
        }
        if let Some(expected) = self.expected {
            if expected.len() != self.position {
                return Err(Interrupt::PathDeviation(self.position));
            }
        }
        let log_density = self.sample_sum + self.observe_sum * self.scale;
        if log_density.value().is_nan() {
            return Err(Interrupt::domain("<total>", "log-density is NaN"));
        }
        let trace = self.recorder.map(|r| {
            r.finish(
                self.sample_sum.value(),
                self.observe_sum.value(),
                self.scale,
            )
        });
        Ok(DensityEvaluation { log_density, trace })
    }

    /// Log-density of `draws`, or the reason they do not fit the program.
    pub fn evaluate<P: Program>(
        program: &P,
        draws: &'d [Draw<R>],
        expected: Option<&'d AddressPath>,
    ) -> Result<R, Interrupt> {
        let mut h = ReplayHandler::new(draws, expected, false);
        program.run(&mut h)?;
        h.finish().map(|e| e.log_density)
    }
}

impl<R: Real> Handler for ReplayHandler<'_, R> {
    type Scalar = R;

    fn sample(&mut self, site: &str, dist: &DistKind<R>, branching: bool) -> Result<Draw<R>, Interrupt> {
        let i = self.position;
        let Some(&draw) = self.draws.get(i) else {
            return Err(Interrupt::PathDeviation(i));
        };
        if let Some(expected) = self.expected {
            match expected.0.get(i) {
                Some(a) if a.site == site => {}
                _ => return Err(Interrupt::PathDeviation(i)),
            }
        }
        let support = dist.support();
        if !support.accepts_kind(draw.value()) {
            return Err(Interrupt::PathDeviation(i));
        }
        if support.is_discrete() && !support.contains(draw.value()) {
            return Err(Interrupt::PathDeviation(i));
        }
        let lp = dist.log_prob(draw);
        self.sample_sum = self.sample_sum + lp;
        if let Some(r) = self.recorder.as_mut() {
            r.push_sample(site, dist, draw.value(), lp.value(), branching);
        }
        self.position += 1;
        Ok(draw)
    }

    fn observe(&mut self, site: &str, dist: &DistKind<R>, value: ObsValue<'_>) -> Result<(), Interrupt> {
        let lp = dist.log_prob_obs(value);
        self.observe_sum = self.observe_sum + lp;
        if let Some(r) = self.recorder.as_mut() {
            r.push_observe(site, dist.family(), value.into(), lp.value());
        }
        Ok(())
    }

    fn factor(&mut self, site: &str, log_weight: R) -> Result<(), Interrupt> {
        self.observe_sum = self.observe_sum + log_weight;
        if let Some(r) = self.recorder.as_mut() {
            let w = log_weight.value();
            r.push_observe(site, Family::Factor, EntryValue::Real(w), w);
        }
        Ok(())
    }

    fn scale_likelihood(&mut self, factor: f64) {
        self.scale *= factor;
    }
}

/// Forward-simulates the program from its prior.
pub fn run_prior<P: Program, G: Rng + ?Sized>(program: &P, rng: &mut G) -> Result<Trace, Interrupt> {
    run_prior_clamped(program, rng, &[])
}

/// Forward simulation with the draws at the given positions held fixed.
pub fn run_prior_clamped<P: Program, G: Rng + ?Sized>(
    program: &P,
    rng: &mut G,
    clamps: &[(usize, Draw)],
) -> Result<Trace, Interrupt> {
    let mut h = PriorHandler::clamped(rng, clamps);
    program.run(&mut h)?;
    Ok(h.into_trace())
}

/// Re-executes the program on fixed draws and records the full trace.
pub fn replay<P: Program>(program: &P, draws: &[Draw]) -> Result<Trace, Interrupt> {
    let mut h = ReplayHandler::new(draws, None, true);
    program.run(&mut h)?;
    let eval = h.finish()?;
    Ok(eval.trace.expect("recording replay keeps its trace"))
}

/// `log γ(x)` together with its trace.
pub fn log_density_at<P: Program>(program: &P, draws: &[Draw]) -> Result<(f64, Trace), Interrupt> {
    let trace = replay(program, draws)?;
    Ok((trace.log_density, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::ppl::set_minibatch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Branchy;

    impl Program for Branchy {
        fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
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

    struct ObserveOnly;

    impl Program for ObserveOnly {
        fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
            let d = DistKind::normal(H::Scalar::lift(0.0), H::Scalar::lift(1.0));
            h.observe("y", &d, ObsValue::Real(1.0))?;
            h.observe("y", &d, ObsValue::Real(-0.5))
        }
    }

    /// Five conditionally independent observations of a shared mean.
    struct FivePoints;

    const FIVE: [f64; 5] = [0.3, -1.2, 2.0, 0.7, -0.1];

    impl Program for FivePoints {
        fn run<H: Handler>(&self, h: &mut H) -> Result<(), Interrupt> {
            self.run_on(h, &[0, 1, 2, 3, 4])
        }

        fn data_size(&self) -> Option<usize> {
            Some(5)
        }

        fn run_on<H: Handler>(&self, h: &mut H, batch: &[usize]) -> Result<(), Interrupt> {
            let one = H::Scalar::lift(1.0);
            let mu = h.sample_real("mu", &DistKind::normal(H::Scalar::lift(0.0), one))?;
            for &i in batch {
                h.observe("y", &DistKind::normal(mu, one), ObsValue::Real(FIVE[i]))?;
            }
            Ok(())
        }
    }

    fn path(sites: &[&str]) -> AddressPath {
        AddressPath(sites.iter().map(|s| Address::new(*s, 0)).collect())
    }

    fn prior_with_x(sign: f64) -> Trace {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        loop {
            let t = run_prior(&Branchy, &mut rng).unwrap();
            if t.draws()[0].as_real().unwrap().signum() == sign {
                return t;
            }
        }
    }

    #[test]
    fn prior_paths_follow_the_branch() {
        assert_eq!(prior_with_x(-1.0).path(), path(&["x", "z1"]));
        assert_eq!(prior_with_x(1.0).path(), path(&["x", "z2"]));
        let t = prior_with_x(-1.0);
        assert!(t.entries[0].branching && !t.entries[1].branching);
    }

    #[test]
    fn program_without_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = run_prior(&ObserveOnly, &mut rng).unwrap();
        assert!(t.path().is_empty());
        let expected = -0.5 - 0.125 - 2.0 * 0.918_938_533_204_672_8;
        assert!((t.log_density - expected).abs() < 1e-12);
        assert_eq!(t.entries[1].address, Address::new("y", 1));
    }

    #[test]
    fn replay_reports_deviation_position() {
        let t = replay(&Branchy, &[Draw::Real(-0.5), Draw::Real(-3.1)]).unwrap();
        assert_eq!(t.path(), path(&["x", "z1"]));
        assert_eq!(
            replay(&Branchy, &[Draw::Real(-0.5)]).unwrap_err(),
            Interrupt::PathDeviation(1)
        );
        assert_eq!(
            replay(&Branchy, &[Draw::Real(0.2), Draw::Real(-3.1), Draw::Real(99.0)]).unwrap_err(),
            Interrupt::PathDeviation(2)
        );
        assert_eq!(
            replay(&Branchy, &[Draw::Count(1), Draw::Real(0.0)]).unwrap_err(),
            Interrupt::PathDeviation(0)
        );
    }

    #[test]
    fn log_density_matches_independent_sum() {
        let (lp, _) = log_density_at(&Branchy, &[Draw::Real(-0.5), Draw::Real(-3.0)]).unwrap();
        // log N(-0.5; 0, 1) + log N(-3; -3, 1) + log N(2; -3, 2)
        assert!((lp + 6.699_962_780_174).abs() < 1e-9, "{lp}");
        let (empty, _) = log_density_at(&ObserveOnly, &[]).unwrap();
        assert!((empty + 2.462_877_066).abs() < 1e-8);
    }

    #[test]
    fn expected_path_mismatch_deviates() {
        let left = path(&["x", "z1"]);
        let draws = [Draw::Real(0.5), Draw::Real(3.0)];
        let got = ReplayHandler::evaluate(&Branchy, &draws, Some(&left));
        assert_eq!(got.unwrap_err(), Interrupt::PathDeviation(1));
        let ok = ReplayHandler::evaluate(&Branchy, &[Draw::Real(-0.5), Draw::Real(-3.0)], Some(&left));
        assert!((ok.unwrap() + 6.699_962_780_174).abs() < 1e-9);
    }

    #[test]
    fn replay_on_tape_gives_density_gradient() {
        let tape = Tape::new();
        let x = tape.var(-0.5);
        let z = tape.var(-3.0);
        let draws = [Draw::Real(x), Draw::Real(z)];
        let lp = ReplayHandler::evaluate(&Branchy, &draws, None).unwrap();
        let g = tape.backward(lp);
        // d/dx = -x; d/dz = -(z + 3) + (2 - z) / 4
        assert!((g.wrt(x) - 0.5).abs() < 1e-12);
        assert!((g.wrt(z) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn clamped_prior_holds_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clamps = [(0, Draw::Real(0.25))];
        for _ in 0..20 {
            let t = run_prior_clamped(&Branchy, &mut rng, &clamps).unwrap();
            assert_eq!(t.draws()[0], Draw::Real(0.25));
            assert_eq!(t.path(), path(&["x", "z2"]));
        }
    }

    #[test]
    fn minibatch_scaling() {
        let draws = [Draw::Real(0.4)];
        let full = replay(&FivePoints, &draws).unwrap();
        let all = set_minibatch(&FivePoints, vec![0, 1, 2, 3, 4]).unwrap();
        assert_eq!(all.scale(), 1.0);
        assert_eq!(replay(&all, &draws).unwrap().log_density, full.log_density);

        let one = set_minibatch(&FivePoints, vec![2]).unwrap();
        let t = replay(&one, &draws).unwrap();
        assert_eq!(t.likelihood_scale, 5.0);
        assert!((t.log_density - (t.sample_log_density + 5.0 * t.observe_log_density)).abs() < 1e-12);

        assert!(set_minibatch(&FivePoints, vec![]).is_err());
        assert!(set_minibatch(&FivePoints, vec![5]).is_err());
    }

    #[test]
    fn minibatch_average_recovers_full_likelihood() {
        let draws = [Draw::Real(-0.3)];
        let full = replay(&FivePoints, &draws).unwrap().observe_log_density;
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..5 {
            for j in i + 1..5 {
                let view = set_minibatch(&FivePoints, vec![i, j]).unwrap();
                let t = replay(&view, &draws).unwrap();
                total += t.likelihood_scale * t.observe_log_density;
                count += 1;
            }
        }
        assert!((total / count as f64 - full).abs() < 1e-9);
    }
}
