//! Run configuration: per-model defaults, overlaid by a TOML file, overlaid
//! by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::ValueEnum;
use sdvi::baselines::BbviConfig;
use sdvi::engine::SdviConfig;
use sdvi::error::ConfigError;
use sdvi::models::{BenchmarkModel, MODEL_NAMES};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Sdvi,
    SdviOnline,
    Bbvi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: String,
    /// Seed of the generated dataset, independent of the inference seed.
    pub data_seed: u64,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub output: PathBuf,
    pub sdvi: SdviConfig,
    pub bbvi: BbviConfig,
    /// Stop rule for online SDVI.
    pub max_runs: Option<usize>,
    pub max_wall_secs: Option<f64>,
    /// Posterior draws written after fitting and used for LPPD.
    pub posterior_samples: usize,
    /// Guide-driven executions for the BBVI ELBO estimate.
    pub bbvi_elbo_samples: usize,
}

/// Flags that override file and default values when given.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub data_seed: Option<u64>,
    pub algorithm: Option<Algorithm>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub discovery_sims: Option<usize>,
    pub budget: Option<usize>,
    pub min_candidates: Option<usize>,
    pub alpha: Option<f64>,
    pub particles: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub weight_samples: Option<usize>,
    pub workers: Option<usize>,
    pub iterations: Option<usize>,
    pub max_runs: Option<usize>,
    pub max_wall_secs: Option<f64>,
    pub posterior_samples: Option<usize>,
}

/// Inference settings used in the experiments of the original study, per model.
pub fn model_defaults(model: &str) -> Result<(SdviConfig, BbviConfig), ConfigError> {
    let base = SdviConfig {
        discovery_sims: 1000,
        min_candidates: Some(10),
        ..SdviConfig::default()
    };
    Ok(match model {
        "fig1" => (
            SdviConfig {
                budget: 2000,
                min_candidates: Some(2),
                learning_rate: 0.01,
                ..base
            },
            BbviConfig {
                iterations: 2000,
                learning_rate: 0.01,
                ..BbviConfig::default()
            },
        ),
        "normal-intervals" => (
            SdviConfig {
                budget: 100_000,
                particles: 5,
                learning_rate: 0.01,
                weight_samples: 1000,
                ..base
            },
            BbviConfig {
                iterations: 10_000,
                particles: 10,
                learning_rate: 0.01,
                ..BbviConfig::default()
            },
        ),
        "gmm" => (
            SdviConfig {
                budget: 20_000,
                particles: 10,
                learning_rate: 0.1,
                weight_samples: 100,
                ..base
            },
            BbviConfig {
                iterations: 20_000,
                particles: 10,
                learning_rate: 0.1,
                cap: 25,
                ..BbviConfig::default()
            },
        ),
        "gp" => (
            SdviConfig {
                budget: 1_000_000,
                particles: 1,
                learning_rate: 0.005,
                weight_samples: 100,
                ..base
            },
            BbviConfig {
                iterations: 100_000,
                particles: 10,
                learning_rate: 0.005,
                ..BbviConfig::default()
            },
        ),
        other => {
            return Err(ConfigError::new(format!(
                "unknown model `{other}`; expected one of {}",
                MODEL_NAMES.join(", ")
            )))
        }
    })
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn read_file(path: &Path) -> anyhow::Result<toml::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: toml::Value = toml::from_str(&text)
        .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
    Ok(value)
}

impl RunConfig {
    /// Resolves defaults, then the optional TOML file, then flags. The seed
    /// has no default and must come from the file or a flag.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> anyhow::Result<RunConfig> {
        let file_value = file.map(read_file).transpose()?;
        let file_str = |key: &str| {
            file_value
                .as_ref()
                .and_then(|v| v.get(key))
                .and_then(|v| v.as_str())
                .map(str::to_string)
        };
        let model = flags
            .model
            .clone()
            .or_else(|| file_str("model"))
            .ok_or_else(|| ConfigError::new("no model given; use --model or `model` in the config file"))?;
        let (sdvi, bbvi) = model_defaults(&model)?;
        let defaults = RawDefaults {
            model: model.clone(),
            data_seed: 0,
            algorithm: Algorithm::Sdvi,
            output: PathBuf::from("out"),
            sdvi,
            bbvi,
            posterior_samples: 1000,
            bbvi_elbo_samples: 1000,
        };
        let mut value = toml::Value::try_from(&defaults).context("encoding defaults")?;
        if let Some(f) = file_value {
            merge(&mut value, f);
        }
        let mut cfg: PartialRun = value
            .try_into()
            .map_err(|e| ConfigError::new(format!("invalid configuration: {e}")))?;
        cfg.model = model;
        cfg.apply(flags);
        let seed = cfg
            .seed
            .ok_or_else(|| ConfigError::new("a seed is required; use --seed or `seed` in the config file"))?;
        let mut run = RunConfig {
            model: cfg.model,
            data_seed: cfg.data_seed,
            algorithm: cfg.algorithm,
            seed,
            output: cfg.output,
            sdvi: cfg.sdvi,
            bbvi: cfg.bbvi,
            max_runs: cfg.max_runs,
            max_wall_secs: cfg.max_wall_secs,
            posterior_samples: cfg.posterior_samples,
            bbvi_elbo_samples: cfg.bbvi_elbo_samples,
        };
        run.sdvi.seed = seed;
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        BenchmarkModel::by_name(&self.model, self.data_seed)?;
        self.sdvi.validate()?;
        if self.algorithm == Algorithm::SdviOnline && self.max_runs.is_none() && self.max_wall_secs.is_none() {
            return Err(ConfigError::new("sdvi-online needs --max-runs or --max-wall-secs"));
        }
        if self.max_wall_secs.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(ConfigError::new("max_wall_secs must be positive"));
        }
        if self.bbvi.iterations == 0 {
            return Err(ConfigError::new("BBVI needs at least one iteration"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<BenchmarkModel, ConfigError> {
        BenchmarkModel::by_name(&self.model, self.data_seed)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new(format!("invalid run configuration: {e}")))
    }
}

#[derive(Serialize)]
struct RawDefaults {
    model: String,
    data_seed: u64,
    algorithm: Algorithm,
    output: PathBuf,
    sdvi: SdviConfig,
    bbvi: BbviConfig,
    posterior_samples: usize,
    bbvi_elbo_samples: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialRun {
    model: String,
    data_seed: u64,
    algorithm: Algorithm,
    seed: Option<u64>,
    output: PathBuf,
    sdvi: SdviConfig,
    bbvi: BbviConfig,
    max_runs: Option<usize>,
    max_wall_secs: Option<f64>,
    posterior_samples: usize,
    bbvi_elbo_samples: usize,
}

impl PartialRun {
    fn apply(&mut self, f: &Overrides) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut self.data_seed, &f.data_seed);
        set(&mut self.algorithm, &f.algorithm);
        if f.seed.is_some() {
            self.seed = f.seed;
        }
        set(&mut self.output, &f.output);
        set(&mut self.sdvi.discovery_sims, &f.discovery_sims);
        set(&mut self.sdvi.budget, &f.budget);
        if f.min_candidates.is_some() {
            self.sdvi.min_candidates = f.min_candidates;
        }
        set(&mut self.sdvi.alpha, &f.alpha);
        set(&mut self.sdvi.particles, &f.particles);
        set(&mut self.bbvi.particles, &f.particles);
        set(&mut self.sdvi.learning_rate, &f.learning_rate);
        set(&mut self.bbvi.learning_rate, &f.learning_rate);
        if f.batch_size.is_some() {
            self.sdvi.batch_size = f.batch_size;
        }
        set(&mut self.sdvi.weight_samples, &f.weight_samples);
        set(&mut self.sdvi.workers, &f.workers);
        set(&mut self.bbvi.iterations, &f.iterations);
        if f.max_runs.is_some() {
            self.max_runs = f.max_runs;
        }
        if f.max_wall_secs.is_some() {
            self.max_wall_secs = f.max_wall_secs;
        }
        set(&mut self.posterior_samples, &f.posterior_samples);
    }
}
