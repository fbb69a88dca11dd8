//! Per-epoch loss records and data-access auditing shared by the trainers.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

/// Mean losses over one epoch of one trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub domain: String,
    pub role: String,
    pub epoch: usize,
    pub steps: usize,
    pub losses: BTreeMap<String, f64>,
}

impl EpochRecord {
    pub fn all_finite(&self) -> bool {
        self.losses.values().all(|v| v.is_finite())
    }
}

/// Running sums for building an [`EpochRecord`].
#[derive(Debug, Default)]
pub(crate) struct LossAccumulator {
    sums: BTreeMap<String, f64>,
    steps: usize,
}

impl LossAccumulator {
    /// Adds one step's losses; fails on the first non-finite value.
    pub fn add(&mut self, values: &[(&str, f64)], epoch: usize) -> Result<()> {
        for &(name, v) in values {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    name: name.to_string(),
                    epoch,
                    step: self.steps,
                });
            }
            *self.sums.entry(name.to_string()).or_default() += v;
        }
        self.steps += 1;
        Ok(())
    }

    pub fn finish(self, stage: &str, domain: &str, role: &str, epoch: usize) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        EpochRecord {
            stage: stage.into(),
            domain: domain.into(),
            role: role.into(),
            epoch,
            steps: self.steps,
            losses: self.sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
        }
    }
}

/// Writes records as JSON lines.
pub fn write_jsonl(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Observer for every training batch: which trainer read samples from
/// which domains.
pub trait DataAudit: Sync {
    fn on_batch(&self, owner: &str, role: &str, sample_domains: &[&str]);
}

/// Audit that ignores everything.
pub struct NoAudit;

impl DataAudit for NoAudit {
    fn on_batch(&self, _: &str, _: &str, _: &[&str]) {}
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    pub owner: String,
    pub role: String,
    pub sample_domain: String,
}

/// Audit that records one entry per sample read.
#[derive(Debug, Default)]
pub struct AccessLog {
    records: Mutex<Vec<AccessRecord>>,
}

impl AccessLog {
    pub fn records(&self) -> Vec<AccessRecord> {
        self.records.lock().expect("audit lock").clone()
    }

    /// Reads where the sample's domain differs from the trainer's owner.
    pub fn foreign_reads(&self) -> Vec<AccessRecord> {
        self.records().into_iter().filter(|r| r.owner != r.sample_domain).collect()
    }
}

impl DataAudit for AccessLog {
    fn on_batch(&self, owner: &str, role: &str, sample_domains: &[&str]) {
        let mut g = self.records.lock().expect("audit lock");
        g.extend(sample_domains.iter().map(|d| AccessRecord {
            owner: owner.into(),
            role: role.into(),
            sample_domain: (*d).into(),
        }));
    }
}
