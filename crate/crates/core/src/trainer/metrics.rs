use std::collections::BTreeMap;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

use super::MetricsRecord;

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// `train`, `train_aug`, `val` or `target`.
    pub split: String,
    /// Domain id, or `all` for the pooled training batches.
    pub domain: String,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

/// One line of `traces.csv`: a sample's loss at one inner step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub sample_id: u64,
    #[serde(rename = "step_k")]
    pub step: usize,
    pub loss: f64,
}

pub fn metrics_rows(record: &MetricsRecord) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for e in &record.epochs {
        rows.push(MetricsRow {
            epoch: e.epoch,
            split: "train".into(),
            domain: "all".into(),
            loss: e.clean_loss,
            accuracy: e.clean_accuracy,
            seconds: e.train_seconds,
        });
        if let (Some(loss), Some(accuracy)) = (e.aug_loss, e.aug_accuracy) {
            rows.push(MetricsRow {
                epoch: e.epoch,
                split: "train_aug".into(),
                domain: "all".into(),
                loss,
                accuracy,
                seconds: e.train_seconds,
            });
        }
        for (d, v) in &e.val {
            rows.push(MetricsRow {
                epoch: e.epoch,
                split: "val".into(),
                domain: d.to_string(),
                loss: v.loss,
                accuracy: v.accuracy,
                seconds: v.seconds,
            });
        }
    }
    let last = record.epochs.last().map_or(0, |e| e.epoch);
    for (d, v) in &record.target {
        rows.push(MetricsRow {
            epoch: last,
            split: "target".into(),
            domain: d.to_string(),
            loss: v.loss,
            accuracy: v.accuracy,
            seconds: v.seconds,
        });
    }
    rows
}

/// Writes `rows`, emitting `header` alone when there are none.
pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::csv(path, e);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(header).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::csv(path, e))
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_csv(
        path,
        rows,
        &["epoch", "split", "domain", "loss", "accuracy", "seconds"],
    )
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    read_csv(path)
}

pub fn write_traces_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_csv(path, rows, &["epoch", "sample_id", "step_k", "loss"])
}

pub fn read_traces_csv(path: &Path) -> Result<Vec<TraceRow>> {
    read_csv(path)
}

/// Accuracy summary over one or more seeds of the same configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Mean accuracy per evaluated domain across seeds.
    pub per_domain: BTreeMap<String, f64>,
    /// Mean over seeds of each seed's domain-averaged accuracy.
    pub mean: f64,
    /// Sample standard deviation of those per-seed averages (0 for one seed).
    pub std: f64,
}

impl RunSummary {
    /// `runs` pairs each seed with its per-domain accuracies.
    pub fn new(config_hash: &str, runs: &[(u64, BTreeMap<String, f64>)]) -> Result<Self> {
        if runs.is_empty() || runs.iter().any(|(_, d)| d.is_empty()) {
            return Err(Error::InvalidArgument(
                "summary needs at least one evaluated run".into(),
            ));
        }
        let mut per_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (_, domains) in runs {
            for (d, &acc) in domains {
                per_domain.entry(d.clone()).or_default().push(acc);
            }
        }
        let per_seed: Vec<f64> = runs
            .iter()
            .map(|(_, d)| mean(d.values().copied()))
            .collect();
        Ok(Self {
            config_hash: config_hash.into(),
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            per_domain: per_domain
                .into_iter()
                .map(|(d, v)| (d, mean(v.into_iter())))
                .collect(),
            mean: mean(per_seed.iter().copied()),
            std: sample_std(&per_seed),
        })
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub(crate) fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values.iter().copied());
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}
