use std::path::Path;
use std::time::Duration;

use anyhow::Context;
use sdvi::baselines::{bbvi_elbo, bbvi_fit, bbvi_sample, BbviFit, GlobalGuide};
use sdvi::distributions::Draw;
use sdvi::engine::{fit_online_sdvi, fit_sdvi, SdviResult};
use sdvi::mixture::{lppd, lppd_from_pointwise, posterior_sample, Predictive};
use sdvi::models::BenchmarkModel;
use sdvi::ppl::{replay, AddressPath};
use sdvi::rng::stream;
use sdvi::scheduler::StopRule;
use sdvi::slp::discover;
use sdvi::training::ElboEstimate;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, RunConfig};
use crate::output::{read_json, write_csv, write_json, write_metrics, write_samples, Metric};

pub const RUN_CONFIG: &str = "run_config.toml";
pub const DISCOVERY: &str = "discovery.json";
pub const RESULT: &str = "result.json";
pub const SUMMARY: &str = "summary.json";
pub const TRAIN_METRICS: &str = "train_metrics.csv";
pub const LEDGER: &str = "ledger.csv";
pub const SAMPLES: &str = "posterior_samples.csv";
pub const BBVI_GUIDE: &str = "bbvi_guide.json";
pub const BBVI_TRAJECTORY: &str = "bbvi_trajectory.csv";
pub const BBVI_RESULT: &str = "bbvi_result.json";
pub const EVAL_METRICS: &str = "eval_metrics.csv";

fn prepare(config: &RunConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&config.output)
        .with_context(|| format!("creating output directory {}", config.output.display()))?;
    std::fs::write(config.output.join(RUN_CONFIG), config.to_toml()?)?;
    Ok(())
}

pub fn cmd_discover(config: &RunConfig) -> anyhow::Result<()> {
    prepare(config)?;
    let model = config.model()?;
    let report = discover(&model, config.sdvi.discovery_sims, config.seed, "discovery")?;
    write_json(&config.output.join(DISCOVERY), &report)?;
    println!(
        "{}: {} SLPs from {} simulations ({} failed)",
        model.name(),
        report.slps.len(),
        report.total_simulations,
        report.failed_simulations
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SlpSummary {
    slp: usize,
    path: String,
    weight: f64,
    #[serde(with = "sdvi::nonfinite")]
    elbo: f64,
    #[serde(with = "sdvi::nonfinite")]
    std_error: f64,
    acceptance_rate: f64,
    iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    model: String,
    algorithm: Algorithm,
    seed: u64,
    #[serde(with = "sdvi::nonfinite")]
    global_elbo: f64,
    slps: Vec<SlpSummary>,
    warnings: Vec<String>,
}

fn path_label(path: &AddressPath) -> String {
    path.iter().map(|a| a.to_string()).collect::<Vec<_>>().join("/")
}

pub fn cmd_fit(config: &RunConfig) -> anyhow::Result<()> {
    prepare(config)?;
    let model = config.model()?;
    match config.algorithm {
        Algorithm::Sdvi | Algorithm::SdviOnline => fit_with_sdvi(config, &model),
        Algorithm::Bbvi => fit_with_bbvi(config, &model),
    }
}

fn fit_with_sdvi(config: &RunConfig, model: &BenchmarkModel) -> anyhow::Result<()> {
    let mut sdvi_config = config.sdvi.clone();
    sdvi_config.record_metrics = true;
    let result = if config.algorithm == Algorithm::SdviOnline {
        let stop = StopRule {
            max_runs: config.max_runs,
            max_wall: config.max_wall_secs.map(Duration::from_secs_f64),
        };
        fit_online_sdvi(model, &sdvi_config, &stop)?
    } else {
        fit_sdvi(model, &sdvi_config)?
    };
    let out = &config.output;
    write_json(&out.join(DISCOVERY), &result.discovery)?;
    write_json(&out.join(RESULT), &result)?;
    write_csv(&out.join(TRAIN_METRICS), &result.metrics)?;
    write_csv(&out.join(LEDGER), &result.ledger.rows)?;

    let summary = Summary {
        model: config.model.clone(),
        algorithm: config.algorithm,
        seed: config.seed,
        global_elbo: result.global_elbo,
        slps: result
            .targets
            .iter()
            .enumerate()
            .map(|(i, t)| SlpSummary {
                slp: i,
                path: path_label(t.path()),
                weight: result.weights.probs[i],
                elbo: result.estimates[i].value,
                std_error: result.estimates[i].std_error,
                acceptance_rate: result.estimates[i].acceptance_rate(),
                iterations: result.diagnostics.iterations[i],
            })
            .collect(),
        warnings: result.diagnostics.warnings.clone(),
    };
    write_json(&out.join(SUMMARY), &summary)?;

    let mut rng = stream(config.seed, "posterior");
    let mut samples = Vec::with_capacity(config.posterior_samples);
    for _ in 0..config.posterior_samples {
        let (k, draws) = posterior_sample(&result, model, &mut rng)?;
        samples.push((Some(k), result.targets[k].path().clone(), draws));
    }
    write_samples(&out.join(SAMPLES), &samples)?;

    let best = result.weights.argmax();
    println!(
        "{}: {} SLPs, global ELBO {:.4}, top SLP {} (weight {:.4}): {}",
        model.name(),
        result.targets.len(),
        result.global_elbo,
        best,
        result.weights.probs[best],
        path_label(result.targets[best].path())
    );
    for w in &result.diagnostics.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct BbviResult {
    elbo: ElboEstimate,
}

fn fit_with_bbvi(config: &RunConfig, model: &BenchmarkModel) -> anyhow::Result<()> {
    let mut rng = stream(config.seed, "bbvi");
    let fit = bbvi_fit(model, &config.bbvi, &mut rng)?;
    let out = &config.output;
    write_json(&out.join(BBVI_GUIDE), &fit.guide)?;
    write_csv(&out.join(BBVI_TRAJECTORY), &fit.trajectory)?;
    let mut rng = stream(config.seed, "bbvi/estimate");
    let elbo = bbvi_elbo(&fit.guide, model, config.bbvi_elbo_samples, &mut rng);
    write_json(&out.join(BBVI_RESULT), &BbviResult { elbo })?;
    let samples = bbvi_draws(&fit, model, config.posterior_samples, config.seed)?;
    write_samples(
        &out.join(SAMPLES),
        &samples.into_iter().map(|(p, d)| (None, p, d)).collect::<Vec<_>>(),
    )?;
    println!("{}: BBVI ELBO {:.4} ± {:.4}", model.name(), elbo.value, elbo.std_error);
    Ok(())
}

fn bbvi_draws(
    fit: &BbviFit,
    model: &BenchmarkModel,
    n: usize,
    seed: u64,
) -> anyhow::Result<Vec<(AddressPath, Vec<Draw>)>> {
    let mut rng = stream(seed, "posterior");
    let mut out = Vec::with_capacity(n);
    let mut failures = 0;
    while out.len() < n {
        match bbvi_sample(&fit.guide, model, &mut rng) {
            Ok(draws) => {
                let trace = replay(model, &draws).map_err(|e| anyhow::anyhow!("replaying a guide draw: {e:?}"))?;
                out.push((trace.path(), draws));
            }
            Err(_) => {
                failures += 1;
                anyhow::ensure!(failures <= 100 * n.max(1), "global guide keeps producing failing executions");
            }
        }
    }
    Ok(out)
}

/// MAP summary of the top SLP: the component count for the GMM, the kernel
/// structure for the GP.
fn describe(model: &BenchmarkModel, draws: &[Draw]) -> (Option<usize>, Option<String>) {
    match model {
        BenchmarkModel::Gmm(m) => (m.decode(draws).map(|(k, _)| k), None),
        BenchmarkModel::Gp(m) => (None, m.decode(draws).map(|(k, _)| k.structure())),
        _ => (None, None),
    }
}

fn mode<T: Ord + Clone>(xs: impl IntoIterator<Item = T>) -> Option<T> {
    let mut counts = std::collections::BTreeMap::new();
    for x in xs {
        *counts.entry(x).or_insert(0usize) += 1;
    }
    counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|(x, _)| x)
}

pub fn cmd_eval(run_dir: &Path, samples: Option<usize>) -> anyhow::Result<Vec<Metric>> {
    let text = std::fs::read_to_string(run_dir.join(RUN_CONFIG))
        .with_context(|| format!("{} has no {RUN_CONFIG}; run `sdvi fit` first", run_dir.display()))?;
    let config = RunConfig::from_toml(&text)?;
    let model = config.model()?;
    let oracle = model.oracle();
    let n = samples.unwrap_or(config.posterior_samples).max(1);
    let has_heldout = model.predictive().is_some();
    let mut rng = stream(config.seed, "eval");

    let metrics = match config.algorithm {
        Algorithm::Sdvi | Algorithm::SdviOnline => {
            let result: SdviResult = read_json(&run_dir.join(RESULT))?;
            let estimated: Vec<(AddressPath, f64)> = result
                .targets
                .iter()
                .map(|t| t.path().clone())
                .zip(result.weights.probs.iter().copied())
                .collect();
            let lppd_value = if has_heldout {
                Some(lppd(&result, &model, n, &mut rng)?)
            } else {
                None
            };
            let best = result.weights.argmax();
            let top_draws = result.guides[best]
                .sample(&result.targets[best], &model, &mut rng)
                .ok()
                .map(|(x, _)| result.targets[best].draws(&x));
            let (map_k, structure) = top_draws.as_deref().map_or((None, None), |d| describe(&model, d));
            vec![
                Metric::num("weights_squared_error", oracle.weights_squared_error(&estimated)),
                Metric::num("global_elbo", Some(result.global_elbo)),
                Metric::num("log_z", oracle.log_z),
                Metric::num("elbo_minus_log_z", oracle.log_z.map(|z| result.global_elbo - z)),
                Metric::num("lppd", lppd_value),
                Metric::num("true_lppd", oracle.true_lppd),
                Metric::text("map_k", map_k.map(|k| k.to_string())),
                Metric::text("map_structure", structure),
                Metric::text("n_slps", Some(result.targets.len().to_string())),
            ]
        }
        Algorithm::Bbvi => {
            let guide: GlobalGuide = read_json(&run_dir.join(BBVI_GUIDE))?;
            let stored: BbviResult = read_json(&run_dir.join(BBVI_RESULT))?;
            let fit = BbviFit {
                guide,
                trajectory: Vec::new(),
            };
            let draws = bbvi_draws(&fit, &model, n, config.seed)?;
            let mut counts: Vec<(AddressPath, f64)> = Vec::new();
            for (p, _) in &draws {
                match counts.iter_mut().find(|(q, _)| q == p) {
                    Some(c) => c.1 += 1.0,
                    None => counts.push((p.clone(), 1.0)),
                }
            }
            counts.iter_mut().for_each(|c| c.1 /= draws.len() as f64);
            let lppd_value = has_heldout.then(|| {
                let rows: Vec<Vec<f64>> = draws.iter().map(|(_, d)| model.predictive_log_density(d)).collect();
                lppd_from_pointwise(&rows)
            });
            let described: Vec<_> = draws.iter().map(|(_, d)| describe(&model, d)).collect();
            let map_k = mode(described.iter().filter_map(|d| d.0));
            let structure = mode(described.iter().filter_map(|d| d.1.clone()));
            vec![
                Metric::num("weights_squared_error", oracle.weights_squared_error(&counts)),
                Metric::num("global_elbo", Some(stored.elbo.value)),
                Metric::num("log_z", oracle.log_z),
                Metric::num("elbo_minus_log_z", oracle.log_z.map(|z| stored.elbo.value - z)),
                Metric::num("lppd", lppd_value),
                Metric::num("true_lppd", oracle.true_lppd),
                Metric::text("map_k", map_k.map(|k| k.to_string())),
                Metric::text("map_structure", structure),
                Metric::text("n_slps", Some(counts.len().to_string())),
            ]
        }
    };
    write_metrics(&run_dir.join(EVAL_METRICS), &metrics)?;
    Ok(metrics)
}
