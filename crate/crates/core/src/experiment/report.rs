use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{mean, read_metrics_csv, read_traces_csv, sample_std, write_csv};

use super::{read_trace_means, METRICS_FILE, TRACES_FILE, TRACE_MEANS_FILE};

/// A `metrics.csv` line tagged with the run it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedRow {
    pub run: String,
    pub epoch: usize,
    pub split: String,
    pub domain: String,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

/// Cross-run statistics for one (epoch, split, domain) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub epoch: usize,
    pub split: String,
    pub domain: String,
    pub runs: usize,
    pub loss_mean: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Mean exploration loss at each inner step of one epoch, averaged over
/// the runs that explored.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCurve {
    pub epoch: usize,
    /// Indexed by inner step; `None` where no run reached that step.
    pub losses: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub merged: Vec<MergedRow>,
    pub means: Vec<MeanRow>,
    pub curves: Vec<StepCurve>,
}

/// Per-run (epoch, step) mean losses, from raw traces when recorded.
fn run_curve(dir: &Path) -> Result<BTreeMap<(usize, usize), f64>> {
    let traces = dir.join(TRACES_FILE);
    if traces.is_file() {
        let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for r in read_traces_csv(&traces)? {
            let e = acc.entry((r.epoch, r.step)).or_default();
            e.0 += r.loss;
            e.1 += 1;
        }
        return Ok(acc
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect());
    }
    let means = dir.join(TRACE_MEANS_FILE);
    if means.is_file() {
        return Ok(read_trace_means(&means)?
            .into_iter()
            .map(|r| ((r.epoch, r.step), r.loss))
            .collect());
    }
    Ok(BTreeMap::new())
}

/// Merges the run directories in `runs`. Each must contain `metrics.csv`;
/// trace files are optional.
pub fn build_report(runs: &[PathBuf]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument(
            "report needs at least one run directory".into(),
        ));
    }
    let mut merged = Vec::new();
    let mut curve_cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for dir in runs {
        let path = dir.join(METRICS_FILE);
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "metrics file is missing"),
            ));
        }
        let run = dir.display().to_string();
        merged.extend(read_metrics_csv(&path)?.into_iter().map(|r| MergedRow {
            run: run.clone(),
            epoch: r.epoch,
            split: r.split,
            domain: r.domain,
            loss: r.loss,
            accuracy: r.accuracy,
            seconds: r.seconds,
        }));
        for (cell, loss) in run_curve(dir)? {
            curve_cells.entry(cell).or_default().push(loss);
        }
    }

    // (epoch, split, domain) -> (losses, accuracies)
    type Cells<'a> = BTreeMap<(usize, &'a str, &'a str), (Vec<f64>, Vec<f64>)>;
    let mut cells = Cells::new();
    for r in &merged {
        let c = cells.entry((r.epoch, &r.split, &r.domain)).or_default();
        c.0.push(r.loss);
        c.1.push(r.accuracy);
    }
    let means = cells
        .into_iter()
        .map(|((epoch, split, domain), (loss, acc))| MeanRow {
            epoch,
            split: split.into(),
            domain: domain.into(),
            runs: acc.len(),
            loss_mean: mean(loss.into_iter()),
            accuracy_mean: mean(acc.iter().copied()),
            accuracy_std: sample_std(&acc),
        })
        .collect();

    let steps = curve_cells.keys().map(|&(_, k)| k + 1).max().unwrap_or(0);
    let mut curves: Vec<StepCurve> = Vec::new();
    for ((epoch, step), losses) in curve_cells {
        if curves.last().is_none_or(|c| c.epoch != epoch) {
            curves.push(StepCurve {
                epoch,
                losses: vec![None; steps],
            });
        }
        curves.last_mut().expect("just pushed").losses[step] = Some(mean(losses.into_iter()));
    }
    Ok(Report {
        merged,
        means,
        curves,
    })
}

/// Writes `report_metrics.csv`, `report_means.csv` and `inner_loss.csv`
/// (one row per epoch, one `step_k` column per inner step).
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        &dir.join("report_metrics.csv"),
        &report.merged,
        &[
            "run", "epoch", "split", "domain", "loss", "accuracy", "seconds",
        ],
    )?;
    write_csv(
        &dir.join("report_means.csv"),
        &report.means,
        &[
            "epoch",
            "split",
            "domain",
            "runs",
            "loss_mean",
            "accuracy_mean",
            "accuracy_std",
        ],
    )?;
    let path = dir.join("inner_loss.csv");
    let err = |e: csv::Error| Error::csv(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    let steps = report.curves.first().map_or(0, |c| c.losses.len());
    let header: Vec<String> = std::iter::once("epoch".to_string())
        .chain((0..steps).map(|k| format!("step_{k}")))
        .collect();
    w.write_record(&header).map_err(err)?;
    for c in &report.curves {
        let record: Vec<String> = std::iter::once(c.epoch.to_string())
            .chain(
                c.losses
                    .iter()
                    .map(|l| l.map_or(String::new(), |v| v.to_string())),
            )
            .collect();
        w.write_record(&record).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}
