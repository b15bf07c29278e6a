use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::SampleSource;
use crate::error::{Error, Result};
use crate::trainer::{mean, sample_std, write_csv, Method, TrainConfig};

use super::{run_one, with_method, with_seed, write_json};

/// Held-out score of one (method, domain, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoRow {
    pub method: Method,
    pub held_out: u32,
    pub seed: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub train_seconds: f64,
}

/// Seed statistics for one method on one held-out domain, or across all
/// domains when `held_out` is `mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoSummaryRow {
    pub method: Method,
    pub held_out: String,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    /// This method's mean minus ERM's on the same domain; empty without ERM.
    pub delta_vs_erm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoReport {
    pub rows: Vec<LodoRow>,
    pub summary: Vec<LodoSummaryRow>,
    /// Mean held-out accuracy over every domain and seed, per method.
    pub method_means: BTreeMap<String, f64>,
    pub runtime_seconds: f64,
}

impl LodoReport {
    /// Aggregates `rows`; the `mean` std is taken over per-seed averages
    /// across domains.
    pub fn from_rows(rows: Vec<LodoRow>, runtime_seconds: f64) -> Self {
        let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
        methods.sort_by_key(|m| Method::ALL.iter().position(|x| x == m));
        methods.dedup();
        let mut domains: Vec<u32> = rows.iter().map(|r| r.held_out).collect();
        domains.sort_unstable();
        domains.dedup();

        let accs = |m: Method, d: Option<u32>| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.method == m && d.is_none_or(|d| r.held_out == d))
                .map(|r| r.accuracy)
                .collect()
        };
        let per_seed = |m: Method| -> Vec<f64> {
            let mut seeds: Vec<u64> = rows
                .iter()
                .filter(|r| r.method == m)
                .map(|r| r.seed)
                .collect();
            seeds.sort_unstable();
            seeds.dedup();
            seeds
                .into_iter()
                .map(|s| {
                    mean(
                        rows.iter()
                            .filter(|r| r.method == m && r.seed == s)
                            .map(|r| r.accuracy),
                    )
                })
                .collect()
        };
        let erm_mean = |d: Option<u32>| {
            let v = accs(Method::Erm, d);
            (!v.is_empty()).then(|| mean(v.into_iter()))
        };

        let mut summary = Vec::new();
        let mut method_means = BTreeMap::new();
        for &m in &methods {
            for &d in &domains {
                let v = accs(m, Some(d));
                if v.is_empty() {
                    continue;
                }
                let am = mean(v.iter().copied());
                summary.push(LodoSummaryRow {
                    method: m,
                    held_out: d.to_string(),
                    runs: v.len(),
                    accuracy_mean: am,
                    accuracy_std: sample_std(&v),
                    delta_vs_erm: erm_mean(Some(d)).map(|e| am - e),
                });
            }
            let all = accs(m, None);
            let am = mean(all.iter().copied());
            method_means.insert(m.as_str().to_string(), am);
            summary.push(LodoSummaryRow {
                method: m,
                held_out: "mean".into(),
                runs: all.len(),
                accuracy_mean: am,
                accuracy_std: sample_std(&per_seed(m)),
                delta_vs_erm: erm_mean(None).map(|e| am - e),
            });
        }
        Self {
            rows,
            summary,
            method_means,
            runtime_seconds,
        }
    }

    /// Writes `lodo.csv`, `lodo_summary.csv` and `lodo_report.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(
            &dir.join("lodo.csv"),
            &self.rows,
            &[
                "method",
                "held_out",
                "seed",
                "accuracy",
                "loss",
                "train_seconds",
            ],
        )?;
        write_csv(
            &dir.join("lodo_summary.csv"),
            &self.summary,
            &[
                "method",
                "held_out",
                "runs",
                "accuracy_mean",
                "accuracy_std",
                "delta_vs_erm",
            ],
        )?;
        write_json(&dir.join("lodo_report.json"), self)
    }
}

/// Leave-one-domain-out: for every method, domain and seed, trains on the
/// remaining domains and scores the held-out one. Runs go to
/// `out/runs/{method}_heldout{d}_seed{s}` and the aggregate to `out`.
pub fn run_lodo(
    base: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
    data: &dyn SampleSource,
    out: Option<&Path>,
) -> Result<LodoReport> {
    let domains = data.domain_ids();
    if domains.len() < 3 {
        return Err(Error::Config(format!(
            "leave-one-domain-out needs at least 3 domains, dataset has {}",
            domains.len()
        )));
    }
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "need at least one method and one seed".into(),
        ));
    }
    let started = Instant::now();
    let total = methods.len() * domains.len() * seeds.len();
    let mut rows = Vec::with_capacity(total);
    for &method in methods {
        for &d in &domains {
            for &seed in seeds {
                log::info!("lodo run {}/{total}", rows.len() + 1);
                let config = with_method(&with_seed(base, seed), method);
                let dir = out.map(|o| {
                    o.join("runs")
                        .join(format!("{method}_heldout{d}_seed{seed}"))
                });
                let run = run_one(&config, data, Some(d), dir.as_deref())?;
                let target = run.target().expect("held-out domain is evaluated");
                rows.push(LodoRow {
                    method,
                    held_out: d,
                    seed,
                    accuracy: target.accuracy,
                    loss: target.loss,
                    train_seconds: run.train_seconds(),
                });
            }
        }
    }
    let report = LodoReport::from_rows(rows, started.elapsed().as_secs_f64());
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}
