use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sdvi::guide::LocalGuide;
use sdvi::models::{Fig1, Gmm, GmmConfig, NormalIntervals};
use sdvi::ppl::run_prior;
use sdvi::rng::stream;
use sdvi::scheduler::{successive_halving, Candidate, PhaseScore, ShConfig};
use sdvi::slp::{discover, LocalTarget};
use sdvi::training::{estimate_local_elbo, reparameterized_gradient, score_function_gradient};

fn slp_density(c: &mut Criterion) {
    let gmm = Gmm::generate(&GmmConfig::default());
    let report = discover(&gmm, 200, 0, "bench").unwrap();
    let mut rng = stream(0, "bench/trace");
    let trace = loop {
        let t = run_prior(&gmm, &mut rng).unwrap();
        if report.find(&t.path()).is_some() {
            break t;
        }
    };
    let slp = report.find(&trace.path()).unwrap();
    let draws = trace.draws();
    c.bench_function("gmm slp log density", |b| b.iter(|| slp.log_density(&gmm, black_box(&draws))));
}

fn gradients(c: &mut Criterion) {
    let report = discover(&NormalIntervals, 1000, 0, "bench").unwrap();
    let target = LocalTarget::for_slp(&report.slps[3], false);
    let guide = LocalGuide::new(&target).unwrap();
    let mut rng = stream(0, "bench/grad");
    c.bench_function("intervals score-function gradient, 5 particles", |b| {
        b.iter(|| score_function_gradient(&guide, &target, &NormalIntervals, 5, 0.0, &mut rng))
    });
    c.bench_function("intervals reparameterized gradient, 5 particles", |b| {
        b.iter(|| reparameterized_gradient(&guide, &target, &NormalIntervals, 5, &mut rng))
    });

    let gmm = Gmm::generate(&GmmConfig::default());
    let report = discover(&gmm, 1000, 0, "bench").unwrap();
    let k3 = report.slps.iter().find(|s| s.path.len() == 7).unwrap();
    let target = LocalTarget::for_slp(k3, true);
    let guide = LocalGuide::new(&target).unwrap();
    c.bench_function("gmm K=3 reparameterized gradient, 1 particle", |b| {
        b.iter(|| reparameterized_gradient(&guide, &target, &gmm, 1, &mut rng))
    });
}

fn elbo_estimate(c: &mut Criterion) {
    let report = discover(&Fig1, 100, 0, "bench").unwrap();
    let target = LocalTarget::for_slp(&report.slps[0], false);
    let guide = LocalGuide::new(&target).unwrap();
    let mut rng = stream(0, "bench/elbo");
    c.bench_function("fig1 truncated ELBO, 1000 proposals", |b| {
        b.iter(|| estimate_local_elbo(&guide, &target, &Fig1, 1000, &mut rng))
    });
}

struct NoOp(usize);

impl Candidate for NoOp {
    fn train(&mut self, iterations: usize) {
        self.0 += iterations;
    }

    fn score(&mut self) -> PhaseScore {
        PhaseScore {
            elbo: self.0 as f64,
            surrogate: 0.0,
        }
    }
}

fn scheduler(c: &mut Criterion) {
    let cfg = ShConfig {
        budget: 100_000,
        min_candidates: 2,
        alpha: 1.0,
    };
    c.bench_function("successive halving bookkeeping, 64 candidates", |b| {
        b.iter(|| {
            let mut cands: Vec<NoOp> = (0..64).map(|_| NoOp(0)).collect();
            successive_halving(&mut cands, &cfg, None).unwrap()
        })
    });
}

criterion_group!(benches, slp_density, gradients, elbo_estimate, scheduler);
criterion_main!(benches);
