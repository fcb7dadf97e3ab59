//! Metrics files and summaries.
//!
//! `metrics.csv` holds one row per processed batch in the column order of
//! [`MetricsRecord`]. `summary.csv` and `summary.txt` hold the mean
//! accuracy per domain and the mean of those per-domain means, grouped by
//! scenario, method and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::run::MetricsRecord;
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Mean accuracy per domain, domains in order of first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub domains: Vec<(String, f64, usize)>,
}

impl Summary {
    /// Arithmetic mean of the per-domain means.
    pub fn overall(&self) -> f64 {
        if self.domains.is_empty() {
            return 0.0;
        }
        self.domains.iter().map(|d| d.1).sum::<f64>() / self.domains.len() as f64
    }

    pub fn domain(&self, tag: &str) -> Option<f64> {
        self.domains.iter().find(|d| d.0 == tag).map(|d| d.1)
    }
}

/// Groups by (scenario, method, seed) in order of first appearance.
pub fn summarize(records: &[MetricsRecord]) -> Vec<Summary> {
    let mut out: Vec<(Summary, Vec<f64>)> = Vec::new();
    for r in records {
        let at = match out
            .iter()
            .position(|(s, _)| s.scenario == r.scenario && s.method == r.method && s.seed == r.seed)
        {
            Some(i) => i,
            None => {
                out.push((
                    Summary {
                        scenario: r.scenario.clone(),
                        method: r.method.clone(),
                        seed: r.seed,
                        domains: Vec::new(),
                    },
                    Vec::new(),
                ));
                out.len() - 1
            }
        };
        let (s, sums) = &mut out[at];
        match s.domains.iter().position(|d| d.0 == r.domain) {
            Some(i) => {
                sums[i] += r.accuracy;
                s.domains[i].2 += 1;
            }
            None => {
                s.domains.push((r.domain.clone(), 0.0, 1));
                sums.push(r.accuracy);
            }
        }
    }
    out.into_iter()
        .map(|(mut s, sums)| {
            for (d, sum) in s.domains.iter_mut().zip(sums) {
                d.1 = sum / d.2 as f64;
            }
            s
        })
        .collect()
}

pub fn records_to_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn records_from_csv(bytes: &[u8]) -> Result<Vec<MetricsRecord>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::from)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    records_from_csv(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn summary_csv(summaries: &[Summary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scenario", "method", "seed", "domain", "batches", "accuracy"])?;
    for s in summaries {
        let seed = s.seed.to_string();
        for (d, acc, n) in &s.domains {
            w.write_record([&s.scenario, &s.method, &seed, d, &n.to_string(), &format!("{acc:.6}")])?;
        }
        let total: usize = s.domains.iter().map(|d| d.2).sum();
        w.write_record([&s.scenario, &s.method, &seed, "mean", &total.to_string(), &format!("{:.6}", s.overall())])?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Plain-text table: one row per group, one column per domain.
pub fn summary_text(summaries: &[Summary]) -> String {
    let mut out = String::new();
    for s in summaries {
        let _ = writeln!(out, "{} / {} / seed {}", s.scenario, s.method, s.seed);
        for (d, acc, n) in &s.domains {
            let _ = writeln!(out, "  {d:<24} {:>7.2}%  ({n} batches)", acc * 100.0);
        }
        let _ = writeln!(out, "  {:<24} {:>7.2}%", "mean", s.overall() * 100.0);
    }
    out
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the metrics file and both summaries into `dir`.
pub fn write_report(records: &[MetricsRecord], dir: impl AsRef<Path>) -> Result<Vec<Summary>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to report".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summaries = summarize(records);
    write(dir, METRICS_FILE, &records_to_csv(records)?)?;
    write(dir, SUMMARY_CSV, &summary_csv(&summaries)?)?;
    write(dir, SUMMARY_TXT, summary_text(&summaries).as_bytes())?;
    Ok(summaries)
}
