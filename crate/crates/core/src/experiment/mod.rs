//! Experiment drivers built on the trainer: single runs, leave-one-domain-out
//! benchmarks, one-axis sweeps and report merging.
//!
//! Every run directory has the same layout, so `report` can consume the
//! output of any driver:
//!
//! ```text
//! config.json      resolved training config
//! metrics.csv      epoch,split,domain,loss,accuracy,seconds
//! summary.json     config hash, per-domain accuracies, mean, std
//! trace_means.csv  epoch,step_k,loss (exploring methods only)
//! traces.csv       epoch,sample_id,step_k,loss (with record_traces)
//! checkpoint/      final parameters
//! ```

mod lodo;
mod report;
mod sweep;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{SampleSource, Samples, Split};
use crate::error::{Error, Result};
use crate::trainer::{
    evaluate, metrics_rows, read_csv, save_checkpoint, train_with, write_csv, write_metrics_csv,
    write_traces_csv, Evaluation, RunSummary, TrainConfig, TrainOutcome,
};

pub use lodo::{run_lodo, LodoReport, LodoRow, LodoSummaryRow};
pub use report::{build_report, write_report, MeanRow, MergedRow, Report, StepCurve};
pub use sweep::{run_sweep, SweepAxis, SweepRow, SweepSummaryRow};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACE_MEANS_FILE: &str = "trace_means.csv";
pub const TRACES_FILE: &str = "traces.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Mean exploration loss at one inner step of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMeanRow {
    pub epoch: usize,
    #[serde(rename = "step_k")]
    pub step: usize,
    pub loss: f64,
}

/// A finished run, with the held-out domain evaluated after training.
#[derive(Debug)]
pub struct RunResult {
    pub config: TrainConfig,
    pub sources: Vec<u32>,
    pub held_out: Option<u32>,
    pub outcome: TrainOutcome,
}

impl RunResult {
    /// Held-out evaluation, if a domain was held out.
    pub fn target(&self) -> Option<&Evaluation> {
        self.outcome.metrics.target.first().map(|(_, e)| e)
    }

    /// Total training wall-clock across epochs, excluding validation.
    pub fn train_seconds(&self) -> f64 {
        self.outcome
            .metrics
            .epochs
            .iter()
            .map(|e| e.train_seconds)
            .sum()
    }

    /// Accuracy per reported domain: the held-out domain when there is one,
    /// otherwise each source's final validation accuracy.
    pub fn accuracies(&self) -> BTreeMap<String, f64> {
        let evals: &[(u32, Evaluation)] = if self.held_out.is_some() {
            &self.outcome.metrics.target
        } else {
            self.outcome.metrics.epochs.last().map_or(&[], |e| &e.val)
        };
        evals
            .iter()
            .map(|(d, e)| (d.to_string(), e.accuracy))
            .collect()
    }

    pub fn summary(&self) -> Result<RunSummary> {
        RunSummary::new(
            &self.config.hash(),
            &[(self.config.seeds.init, self.accuracies())],
        )
    }

    pub fn trace_means(&self) -> Vec<TraceMeanRow> {
        self.outcome
            .metrics
            .epochs
            .iter()
            .flat_map(|e| {
                e.trace_means
                    .iter()
                    .enumerate()
                    .map(|(step, &loss)| TraceMeanRow {
                        epoch: e.epoch,
                        step,
                        loss,
                    })
            })
            .collect()
    }

    /// Writes the standard run directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(CONFIG_FILE), &self.config.resolved())?;
        write_metrics_csv(
            &dir.join(METRICS_FILE),
            &metrics_rows(&self.outcome.metrics),
        )?;
        write_json(&dir.join(SUMMARY_FILE), &self.summary()?)?;
        if self.config.method.explores() {
            write_csv(
                &dir.join(TRACE_MEANS_FILE),
                &self.trace_means(),
                &["epoch", "step_k", "loss"],
            )?;
        }
        if self.config.record_traces {
            write_traces_csv(&dir.join(TRACES_FILE), &self.outcome.traces)?;
        }
        save_checkpoint(
            &dir.join(CHECKPOINT_DIR),
            &self.outcome.model,
            &self.config,
            self.outcome.metrics.epochs.len(),
        )
    }
}

/// Trains on every domain except `held_out`, then scores the held-out
/// domain on all of its images (both splits). Writes the run directory to
/// `out` when given.
pub fn run_one(
    config: &TrainConfig,
    data: &dyn SampleSource,
    held_out: Option<u32>,
    out: Option<&Path>,
) -> Result<RunResult> {
    let domains = data.domain_ids();
    if let Some(h) = held_out {
        if !domains.contains(&h) {
            return Err(Error::Config(format!(
                "held-out domain {h} not in dataset domains {domains:?}"
            )));
        }
    }
    let sources: Vec<u32> = domains
        .into_iter()
        .filter(|&d| Some(d) != held_out)
        .collect();
    log::info!(
        "{} seed {}: training on domains {sources:?}{}",
        config.method,
        config.seeds.init,
        held_out.map_or(String::new(), |h| format!(", holding out {h}"))
    );
    let mut outcome = train_with(config, data, &sources, &mut |e| {
        let val = e.val.iter().map(|(_, v)| v.accuracy).sum::<f64>() / e.val.len().max(1) as f64;
        log::info!(
            "  epoch {:>3}  loss {:.4}  train acc {:.4}  val acc {val:.4}  {:.1}s",
            e.epoch,
            e.loss,
            e.clean_accuracy,
            e.train_seconds
        );
    })?;
    if let Some(h) = held_out {
        let sets: Vec<&Samples> = Split::ALL
            .into_iter()
            .map(|s| data.samples(h, s))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|s| !s.is_empty())
            .collect();
        let eval = evaluate(&outcome.model, &sets)?;
        log::info!("  held-out domain {h}: accuracy {:.4}", eval.accuracy);
        outcome.metrics.target.push((h, eval));
    }
    let result = RunResult {
        config: config.resolved(),
        sources,
        held_out,
        outcome,
    };
    if let Some(dir) = out {
        result.write(dir)?;
    }
    Ok(result)
}

/// Copy of `base` with all three seeds set to `seed`.
pub fn with_seed(base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut c = base.clone();
    c.seeds = crate::trainer::Seeds::all(seed);
    c
}

/// `base` switched to `method`. Switching drops an explicit `beta` so the
/// new method's default applies.
pub fn with_method(base: &TrainConfig, method: crate::trainer::Method) -> TrainConfig {
    let mut c = base.clone();
    if c.method != method {
        c.method = method;
        c.beta = None;
    }
    c
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn read_trace_means(path: &Path) -> Result<Vec<TraceMeanRow>> {
    read_csv(path)
}
