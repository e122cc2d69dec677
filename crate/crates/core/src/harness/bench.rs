use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::Estimator;
use crate::error::{Error, Result};
use crate::queries::{clamp_estimate, qerror, QueryClass, Workload};

/// Calls discarded before latency is recorded.
pub const WARMUP_CALLS: usize = 10;

/// `p`-th percentile by nearest rank on an ascending slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// `all` or a query class name.
    pub class: String,
    pub count: usize,
    pub failures: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
}

impl ClassStats {
    pub fn from_qerrors(class: &str, mut qerrors: Vec<f64>, failures: usize) -> Self {
        qerrors.sort_by(f64::total_cmp);
        let mean = if qerrors.is_empty() {
            f64::NAN
        } else {
            qerrors.iter().sum::<f64>() / qerrors.len() as f64
        };
        Self {
            class: class.to_string(),
            count: qerrors.len(),
            failures,
            mean,
            p50: nearest_rank(&qerrors, 50.0),
            p95: nearest_rank(&qerrors, 95.0),
            p99: nearest_rank(&qerrors, 99.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimator: String,
    pub classes: Vec<ClassStats>,
    pub avg_latency_ms: f64,
    pub size_bytes: usize,
    pub build_seconds: f64,
}

impl EstimatorReport {
    pub fn class(&self, name: &str) -> Option<&ClassStats> {
        self.classes.iter().find(|c| c.class == name)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub estimators: Vec<EstimatorReport>,
}

/// One CSV line per (estimator, class).
#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct CsvRow {
    estimator: String,
    class: String,
    count: usize,
    failures: usize,
    mean: f64,
    p50: f64,
    p95: f64,
    p99: f64,
    avg_latency_ms: f64,
    size_bytes: usize,
    build_seconds: f64,
}

impl BenchReport {
    pub fn get(&self, name: &str) -> Option<&EstimatorReport> {
        self.estimators.iter().find(|e| e.estimator == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.estimators {
            for c in &e.classes {
                w.serialize(CsvRow {
                    estimator: e.estimator.clone(),
                    class: c.class.clone(),
                    count: c.count,
                    failures: c.failures,
                    mean: c.mean,
                    p50: c.p50,
                    p95: c.p95,
                    p99: c.p99,
                    avg_latency_ms: e.avg_latency_ms,
                    size_bytes: e.size_bytes,
                    build_seconds: e.build_seconds,
                })
                .map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(s.as_bytes());
        let mut report = BenchReport::default();
        for row in r.deserialize() {
            let row: CsvRow = row.map_err(csv_err)?;
            if report.estimators.last().is_none_or(|e| e.estimator != row.estimator) {
                report.estimators.push(EstimatorReport {
                    estimator: row.estimator.clone(),
                    classes: Vec::new(),
                    avg_latency_ms: row.avg_latency_ms,
                    size_bytes: row.size_bytes,
                    build_seconds: row.build_seconds,
                });
            }
            report.estimators.last_mut().unwrap().classes.push(ClassStats {
                class: row.class,
                count: row.count,
                failures: row.failures,
                mean: row.mean,
                p50: row.p50,
                p95: row.p95,
                p99: row.p99,
            });
        }
        Ok(report)
    }

    /// Write `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        let json = stem.with_extension("json");
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = stem.with_extension("csv");
        fs::write(&csv, self.to_csv()?).map_err(|e| Error::io(&csv, e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// A built estimator and how long building took.
pub struct Entrant<'a> {
    pub estimator: &'a dyn Estimator,
    pub build_seconds: f64,
}

/// Run every estimator on every query, single-threaded, and aggregate
/// clamped Q-errors per class.
pub fn bench(entrants: &[Entrant], workload: &Workload, n: usize) -> BenchReport {
    let mut report = BenchReport::default();
    for ent in entrants {
        let est = ent.estimator;
        for entry in workload.entries.iter().cycle().take(WARMUP_CALLS) {
            let _ = est.estimate(&entry.labeled.query);
        }
        let mut per_class: Vec<(QueryClass, Option<f64>)> = Vec::with_capacity(workload.len());
        let mut elapsed = 0.0;
        for entry in &workload.entries {
            let t = Instant::now();
            let raw = est.estimate(&entry.labeled.query);
            elapsed += t.elapsed().as_secs_f64();
            let q = raw.ok().and_then(|r| {
                if r.is_finite() {
                    qerror(clamp_estimate(r, n), entry.labeled.cardinality as f64).ok()
                } else {
                    None
                }
            });
            per_class.push((entry.class, q));
        }
        let collect = |filter: Option<QueryClass>| {
            let rows = per_class.iter().filter(|(c, _)| filter.is_none_or(|f| f == *c));
            let (mut ok, mut failed) = (Vec::new(), 0);
            for (_, q) in rows {
                match q {
                    Some(q) => ok.push(*q),
                    None => failed += 1,
                }
            }
            (ok, failed)
        };
        let mut classes = Vec::new();
        let (all, failed) = collect(None);
        classes.push(ClassStats::from_qerrors("all", all, failed));
        for c in QueryClass::ALL {
            let (qs, failed) = collect(Some(c));
            if qs.len() + failed > 0 {
                classes.push(ClassStats::from_qerrors(c.as_str(), qs, failed));
            }
        }
        report.estimators.push(EstimatorReport {
            estimator: est.name().to_string(),
            classes,
            avg_latency_ms: if workload.is_empty() {
                0.0
            } else {
                elapsed * 1e3 / workload.len() as f64
            },
            size_bytes: est.size_bytes(),
            build_seconds: ent.build_seconds,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_example() {
        let s = ClassStats::from_qerrors("all", vec![4.0, 1.0, 2.0, 1.0], 0);
        assert_eq!((s.mean, s.p50, s.p95, s.p99), (2.0, 1.0, 4.0, 4.0));
    }

    #[test]
    fn csv_and_json_agree() {
        let report = BenchReport {
            estimators: vec![EstimatorReport {
                estimator: "x".into(),
                classes: vec![
                    ClassStats::from_qerrors("all", vec![1.0, 1.5, 3.25], 1),
                    ClassStats::from_qerrors("regular", vec![1.0 / 3.0 + 1.0], 0),
                ],
                avg_latency_ms: 0.123456789,
                size_bytes: 42,
                build_seconds: 1.5,
            }],
        };
        let from_csv = BenchReport::from_csv(&report.to_csv().unwrap()).unwrap();
        let from_json = BenchReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(from_csv, report);
        assert_eq!(from_json, report);
    }
}
