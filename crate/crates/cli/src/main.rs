//! `mode`: generate synthetic multi-domain data, train with worst-case style
//! exploration, and run leave-one-domain-out benchmarks and sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mode_core::datagen::{generate_dataset, GenerateConfig};
use mode_core::dataset::{export_ppm, DomainDataset, Split};
use mode_core::experiment::{
    build_report, read_json, run_lodo, run_one, run_sweep, with_method, with_seed, write_json,
    write_report, SweepAxis, CHECKPOINT_DIR,
};
use mode_core::trainer::{
    evaluate, load_checkpoint, Method, RunSummary, TrainConfig, CHECKPOINT_INDEX,
};

#[derive(Parser)]
#[command(
    name = "mode",
    version,
    about = "Worst-case style exploration for domain generalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-domain dataset.
    Generate {
        /// Generator config (JSON); defaults to 4 domains x 10 classes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write one PPM per (domain, class) under OUT/ppm.
        #[arg(long)]
        export_ppm: bool,
    },
    /// Train one model per seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Domain to exclude from training and score afterwards.
        #[arg(long)]
        held_out: Option<u32>,
    },
    /// Score a checkpoint on every domain and split of a dataset.
    Eval {
        /// Run directory or checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write eval.csv; printed only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Leave-one-domain-out benchmark over methods and seeds.
    Lodo {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Vary one exploration hyperparameter with everything else fixed.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// beta, gamma, k, m or mu.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. "0,0.25,0.5,1".
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Score this domain after training on the rest; otherwise report
        /// source validation accuracy.
        #[arg(long)]
        held_out: Option<u32>,
    },
    /// Merge run directories into tables and inner-step loss curves.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Training config (JSON mirroring TrainConfig); defaults to the method preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; each sets the init, data-order and exploration seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// erm, mode_f, mode_a or random_aug. `lodo` accepts a comma-separated
    /// list and defaults to "erm,mode_f".
    #[arg(long, value_delimiter = ',')]
    method: Vec<String>,
}

impl RunArgs {
    fn methods(&self) -> Result<Vec<Method>> {
        self.method
            .iter()
            .map(|m| Method::parse(m).map_err(Into::into))
            .collect()
    }

    /// The base config with a single `--method` applied.
    fn config(&self) -> Result<TrainConfig> {
        let methods = self.methods()?;
        if methods.len() > 1 {
            bail!(
                "this command takes a single --method, got {}",
                methods.len()
            );
        }
        let config = match &self.config {
            Some(path) => read_json::<TrainConfig>(path)?,
            None => TrainConfig::preset(methods.first().copied().unwrap_or(Method::ModeF)),
        };
        let config = match methods.first() {
            Some(&m) => with_method(&config, m),
            None => config,
        };
        config.validate()?;
        Ok(config)
    }

    fn seeds(&self, config: &TrainConfig) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![config.seeds.init]
        } else {
            self.seeds.clone()
        }
    }

    fn dataset(&self) -> Result<DomainDataset> {
        DomainDataset::load(&self.data)
            .with_context(|| format!("loading dataset from {}", self.data.display()))
    }
}

fn generate(config: Option<&Path>, out: &Path, ppm: bool) -> Result<()> {
    let config = match config {
        Some(path) => read_json::<GenerateConfig>(path)?,
        None => GenerateConfig::default(),
    };
    let dataset = generate_dataset(&config)?;
    dataset.save(out)?;
    let m = dataset.manifest();
    println!(
        "wrote {} domains x {} classes ({} files) to {}",
        m.domains.len(),
        m.classes,
        m.files.len() * 2,
        out.display()
    );
    if ppm {
        let written = export_ppm(&dataset, &out.join("ppm"))?;
        println!(
            "wrote {} PPM previews to {}",
            written.len(),
            out.join("ppm").display()
        );
    }
    Ok(())
}

fn train(args: &RunArgs, held_out: Option<u32>) -> Result<()> {
    let base = args.config()?;
    let data = args.dataset()?;
    let seeds = args.seeds(&base);
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let config = with_seed(&base, seed);
        let dir = if seeds.len() == 1 {
            args.out.clone()
        } else {
            args.out.join(format!("seed{seed}"))
        };
        let run = run_one(&config, &data, held_out, Some(&dir))?;
        let acc = run.accuracies();
        println!(
            "{} seed {seed}: {} -> {}",
            config.method,
            describe(&acc),
            dir.display()
        );
        per_seed.push((seed, acc));
    }
    if seeds.len() > 1 {
        let summary = RunSummary::new(&base.hash(), &per_seed)?;
        write_json(&args.out.join("summary.json"), &summary)?;
        println!(
            "mean {:.4} +/- {:.4} over {} seeds",
            summary.mean,
            summary.std,
            seeds.len()
        );
    }
    Ok(())
}

fn describe(acc: &BTreeMap<String, f64>) -> String {
    acc.iter()
        .map(|(d, a)| format!("domain {d} acc {a:.4}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let dir = if checkpoint.join(CHECKPOINT_INDEX).is_file() {
        checkpoint.to_path_buf()
    } else {
        checkpoint.join(CHECKPOINT_DIR)
    };
    let ckpt = load_checkpoint(&dir)?;
    let data = DomainDataset::load(data)
        .with_context(|| format!("loading dataset from {}", data.display()))?;
    let mut csv = String::from("domain,split,count,loss,accuracy\n");
    for d in data.domains() {
        for split in Split::ALL {
            let samples = d.split(split);
            if samples.is_empty() {
                continue;
            }
            let e = evaluate(&ckpt.model, &[samples])?;
            println!(
                "domain {} {split:<5} n={:<5} loss {:.4} acc {:.4}",
                d.spec.id, e.count, e.loss, e.accuracy
            );
            csv.push_str(&format!(
                "{},{split},{},{},{}\n",
                d.spec.id, e.count, e.loss, e.accuracy
            ));
        }
    }
    if let Some(out) = out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("eval.csv");
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn lodo(args: &RunArgs) -> Result<()> {
    let mut methods = args.methods()?;
    if methods.is_empty() {
        methods = vec![Method::Erm, Method::ModeF];
    }
    let base = match &args.config {
        Some(path) => read_json::<TrainConfig>(path)?,
        None => TrainConfig::preset(methods[0]),
    };
    let data = args.dataset()?;
    let report = run_lodo(&base, &methods, &args.seeds(&base), &data, Some(&args.out))?;
    for s in &report.summary {
        let delta = s
            .delta_vs_erm
            .map_or(String::new(), |d| format!("  delta vs erm {d:+.4}"));
        println!(
            "{:<10} held-out {:<4} acc {:.4} +/- {:.4} (n={}){delta}",
            s.method.as_str(),
            s.held_out,
            s.accuracy_mean,
            s.accuracy_std,
            s.runs
        );
    }
    println!(
        "{} runs in {:.1}s -> {}",
        report.rows.len(),
        report.runtime_seconds,
        args.out.display()
    );
    Ok(())
}

fn sweep(args: &RunArgs, axis: SweepAxis, values: &[f64], held_out: Option<u32>) -> Result<()> {
    let base = args.config()?;
    let data = args.dataset()?;
    let (_, summary) = run_sweep(
        &base,
        axis,
        values,
        &args.seeds(&base),
        held_out,
        &data,
        Some(&args.out),
    )?;
    for s in &summary {
        println!(
            "{axis}={:<6} acc {:.4} +/- {:.4} (n={})",
            s.value, s.accuracy_mean, s.accuracy_std, s.runs
        );
    }
    Ok(())
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let report = build_report(runs)?;
    write_report(&report, out)?;
    println!(
        "merged {} rows from {} runs, {} curve epochs -> {}",
        report.merged.len(),
        runs.len(),
        report.curves.len(),
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate {
            config,
            out,
            export_ppm,
        } => generate(config.as_deref(), &out, export_ppm),
        Command::Train { run, held_out } => train(&run, held_out),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => eval(&checkpoint, &data, out.as_deref()),
        Command::Lodo { run } => lodo(&run),
        Command::Sweep {
            run,
            axis,
            values,
            held_out,
        } => sweep(&run, axis, &values, held_out),
        Command::Report { out, runs } => report(&runs, &out),
    }
}
