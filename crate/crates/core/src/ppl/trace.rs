use serde::{Deserialize, Serialize};

use super::{Address, AddressPath};
use crate::distributions::{Draw, Family, ObsValue, SupportSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    Sample,
    Observe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EntryValue {
    Real(f64),
    Count(u64),
    Vector(Vec<f64>),
}

impl From<Draw> for EntryValue {
    fn from(d: Draw) -> Self {
        match d {
            Draw::Real(x) => EntryValue::Real(x),
            Draw::Count(n) => EntryValue::Count(n),
        }
    }
}

impl From<ObsValue<'_>> for EntryValue {
    fn from(v: ObsValue<'_>) -> Self {
        match v {
            ObsValue::Real(x) => EntryValue::Real(x),
            ObsValue::Count(n) => EntryValue::Count(n),
            ObsValue::Vector(y) => EntryValue::Vector(y.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub address: Address,
    pub kind: EntryKind,
    pub value: EntryValue,
    pub log_factor: f64,
    pub family: Family,
    pub support: Option<SupportSpec>,
    pub branching: bool,
}

impl TraceEntry {
    pub fn draw(&self) -> Option<Draw> {
        match (self.kind, &self.value) {
            (EntryKind::Sample, EntryValue::Real(x)) => Some(Draw::Real(*x)),
            (EntryKind::Sample, EntryValue::Count(n)) => Some(Draw::Count(*n)),
            _ => None,
        }
    }
}

/// One recorded execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
    pub sample_log_density: f64,
    pub observe_log_density: f64,
    pub likelihood_scale: f64,
    pub log_density: f64,
}

impl Default for Trace {
    fn default() -> Self {
        Trace {
            entries: Vec::new(),
            sample_log_density: 0.0,
            observe_log_density: 0.0,
            likelihood_scale: 1.0,
            log_density: 0.0,
        }
    }
}

impl Trace {
    pub fn samples(&self) -> impl Iterator<Item = &TraceEntry> {
        self.entries.iter().filter(|e| e.kind == EntryKind::Sample)
    }

    pub fn path(&self) -> AddressPath {
        AddressPath(self.samples().map(|e| e.address.clone()).collect())
    }

    /// The raw random draws in execution order.
    pub fn draws(&self) -> Vec<Draw> {
        self.samples().filter_map(TraceEntry::draw).collect()
    }
}
