use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::SampleSource;
use crate::error::{Error, Result};
use crate::trainer::{mean, sample_std, write_csv, TrainConfig};

use super::{run_one, with_seed};

/// The hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Beta,
    Gamma,
    K,
    M,
    Mu,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Gamma => "gamma",
            SweepAxis::K => "k",
            SweepAxis::M => "m",
            SweepAxis::Mu => "mu",
        }
    }

    /// `config` with this axis set to `value`. Count axes reject
    /// non-integral values.
    pub fn apply(self, config: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{self} must be a non-negative integer, got {value}"
                )))
            }
        };
        let mut c = config.clone();
        match self {
            SweepAxis::Beta => c.beta = Some(value),
            SweepAxis::Gamma => c.explore.gamma = value,
            SweepAxis::K => c.explore.k = count()?,
            SweepAxis::M => c.explore.m = count()?,
            SweepAxis::Mu => c.explore.mu = value,
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "beta" => Ok(SweepAxis::Beta),
            "gamma" => Ok(SweepAxis::Gamma),
            "k" => Ok(SweepAxis::K),
            "m" => Ok(SweepAxis::M),
            "mu" => Ok(SweepAxis::Mu),
            _ => Err(Error::Config(format!(
                "unknown sweep axis `{s}` (expected beta, gamma, k, m or mu)"
            ))),
        }
    }
}

/// One (value, seed) run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub seed: u64,
    /// Held-out domain, or empty when scoring source validation splits.
    pub held_out: Option<u32>,
    pub accuracy: f64,
    pub loss: f64,
    pub train_seconds: f64,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Varies one axis of `base` over `values`, everything else fixed. Scores
/// are held-out accuracy when `held_out` is given, otherwise mean final
/// validation accuracy over the source domains. Writes `sweep.csv`,
/// `sweep_summary.csv` and per-run directories under `out`.
pub fn run_sweep(
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    held_out: Option<u32>,
    data: &dyn SampleSource,
    out: Option<&Path>,
) -> Result<(Vec<SweepRow>, Vec<SweepSummaryRow>)> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "a sweep needs at least one value and one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    for &value in values {
        for &seed in seeds {
            log::info!("sweep {axis}={value} seed {seed}");
            let config = axis.apply(&with_seed(base, seed), value)?;
            let dir = out.map(|o| o.join("runs").join(format!("{axis}{value}_seed{seed}")));
            let run = run_one(&config, data, held_out, dir.as_deref())?;
            let (accuracy, loss) = match run.target() {
                Some(t) => (t.accuracy, t.loss),
                None => {
                    let val = run
                        .outcome
                        .metrics
                        .epochs
                        .last()
                        .map_or(&[][..], |e| &e.val[..]);
                    (
                        mean(val.iter().map(|(_, e)| e.accuracy)),
                        mean(val.iter().map(|(_, e)| e.loss)),
                    )
                }
            };
            rows.push(SweepRow {
                axis,
                value,
                seed,
                held_out,
                accuracy,
                loss,
                train_seconds: run.train_seconds(),
                checksum: run.outcome.model.checksum(),
            });
        }
    }
    let summary: Vec<SweepSummaryRow> = values
        .iter()
        .map(|&value| {
            let accs: Vec<f64> = rows
                .iter()
                .filter(|r| r.value == value)
                .map(|r| r.accuracy)
                .collect();
            SweepSummaryRow {
                axis,
                value,
                runs: accs.len(),
                accuracy_mean: mean(accs.iter().copied()),
                accuracy_std: sample_std(&accs),
            }
        })
        .collect();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("sweep.csv"), &rows, &[])?;
        write_csv(&dir.join("sweep_summary.csv"), &summary, &[])?;
    }
    Ok((rows, summary))
}
