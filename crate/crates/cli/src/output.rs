//! Artifact writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use sdvi::distributions::Draw;
use sdvi::ppl::AddressPath;
use serde::Serialize;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(std::io::BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SampleRow {
    sample: usize,
    slp: Option<usize>,
    address: String,
    value: String,
}

/// Long-format posterior draws: one row per sampled site.
pub fn write_samples(path: &Path, samples: &[(Option<usize>, AddressPath, Vec<Draw>)]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for (i, (slp, path, draws)) in samples.iter().enumerate() {
        for (a, d) in path.iter().zip(draws) {
            let value = match d {
                Draw::Real(v) => format!("{v:?}"),
                Draw::Count(n) => n.to_string(),
            };
            w.serialize(SampleRow {
                sample: i,
                slp: *slp,
                address: a.to_string(),
                value,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A named evaluation metric; `None` is written as `unavailable`.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub name: &'static str,
    pub value: Option<String>,
}

impl Metric {
    pub fn num(name: &'static str, value: Option<f64>) -> Metric {
        Metric {
            name,
            value: value.map(|v| format!("{v:?}")),
        }
    }

    pub fn text(name: &'static str, value: Option<String>) -> Metric {
        Metric { name, value }
    }
}

pub fn write_metrics(path: &Path, metrics: &[Metric]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["metric", "value"])?;
    for m in metrics {
        w.write_record([m.name, m.value.as_deref().unwrap_or("unavailable")])?;
    }
    w.flush()?;
    Ok(())
}
