//! Alternating maximization and minimization.
//!
//! Every batch is first explored toward per-sample worst-case styles with
//! the parameters frozen; the model then takes one SGD step on
//! `(1 - beta) * clean + beta * augmented` risk. ERM skips exploration and
//! random augmentation explores with zero ascent steps.

mod checkpoint;
mod config;
mod metrics;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Reduction};
use crate::dataset::{SampleSource, Samples, Split};
use crate::error::{Error, Result};
use crate::explore::{explore_batch, ExploreConfig, ExploreTrace, Mechanism, MechanismRegistry};
use crate::models::Cnn;
use crate::optim::{sgd_step, SgdState};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_INDEX};
pub use config::{combined_loss, Method, Seeds, TrainConfig};
pub(crate) use metrics::{mean, read_csv, sample_std, write_csv};
pub use metrics::{
    metrics_rows, read_metrics_csv, read_traces_csv, write_metrics_csv, write_traces_csv,
    MetricsRow, RunSummary, TraceRow,
};

const DATA_STREAM: u64 = 1;
const EXPLORE_STREAM: u64 = 2;
const EVAL_BATCH: usize = 256;

/// Seeded generator on a fixed stream, so the data-order and exploration
/// draws never interleave.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
    pub count: usize,
    pub seconds: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Accuracy and mean cross-entropy over the union of `sets`.
pub fn evaluate(model: &Cnn, sets: &[&Samples]) -> Result<Evaluation> {
    let start = Instant::now();
    let total: usize = sets.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty split".into(),
        ));
    }
    let (mut hits, mut loss) = (0usize, 0.0);
    for set in sets {
        let indices: Vec<usize> = (0..set.len()).collect();
        for chunk in indices.chunks(EVAL_BATCH) {
            let (x, y) = set.batch(chunk);
            let mut g = Graph::new();
            let params = model.bind(&mut g, false);
            let input = g.constant(x);
            let logits = model.forward(&mut g, input, &params, None)?;
            let l = g.softmax_cross_entropy(logits, &y, Reduction::Sum)?;
            loss += g.value(l)?.item();
            hits += correct(g.value(logits)?, &y);
        }
    }
    Ok(Evaluation {
        accuracy: hits as f64 / total as f64,
        loss: loss / total as f64,
        count: total,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Forward passes spent on one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardCount {
    /// Exploration evaluations (`K + 1` per explored batch).
    pub exploration: usize,
    /// Forwards that feed the parameter gradient (clean, plus augmented).
    pub training: usize,
}

impl ForwardCount {
    pub fn total(&self) -> usize {
        self.exploration + self.training
    }

    fn add(&mut self, other: ForwardCount) {
        self.exploration += other.exploration;
        self.training += other.training;
    }
}

#[derive(Debug, Clone)]
pub struct StepStats {
    /// Combined objective.
    pub loss: f64,
    pub clean_loss: f64,
    pub clean_correct: usize,
    pub aug_loss: Option<f64>,
    pub aug_correct: Option<usize>,
    pub traces: Vec<ExploreTrace>,
    pub forwards: ForwardCount,
}

/// Model, optimizer state and exploration stream of one run.
pub struct Trainer {
    config: TrainConfig,
    model: Cnn,
    opt: SgdState,
    explore: Option<(ExploreConfig, Arc<dyn Mechanism>)>,
    explore_rng: ChaCha8Rng,
    sources: Vec<u32>,
}

impl Trainer {
    pub fn new(config: TrainConfig, sources: Vec<u32>) -> Result<Self> {
        Self::with_registry(config, sources, &MechanismRegistry::with_builtins())
    }

    pub fn with_registry(
        config: TrainConfig,
        sources: Vec<u32>,
        registry: &MechanismRegistry,
    ) -> Result<Self> {
        config.validate()?;
        let model = Cnn::new(config.model_config())?;
        let explore = match config.effective_explore() {
            Some(e) => {
                let mechanism = registry.get(&e.mechanism)?;
                Some((e, mechanism))
            }
            None => None,
        };
        Ok(Self {
            explore_rng: stream_rng(config.seeds.explore, EXPLORE_STREAM),
            config,
            model,
            opt: SgdState::new(),
            explore,
            sources,
        })
    }

    pub fn model(&self) -> &Cnn {
        &self.model
    }

    pub fn into_model(self) -> Cnn {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One minimization step; `epoch` (0-based) selects the learning rate.
    pub fn train_step(
        &mut self,
        batch: &Tensor,
        labels: &[usize],
        domains: &[u32],
        epoch: usize,
    ) -> Result<StepStats> {
        let mut forwards = ForwardCount::default();
        let explored = match &self.explore {
            Some((cfg, mechanism)) => {
                let (aug, traces) = explore_batch(
                    &self.model,
                    batch,
                    labels,
                    domains,
                    &self.sources,
                    cfg,
                    mechanism.as_ref(),
                    &mut self.explore_rng,
                )?;
                forwards.exploration = cfg.k + 1;
                Some((aug, traces))
            }
            None => None,
        };

        let (clean_loss, clean_grads, clean_correct) =
            self.loss_and_grads(labels, |g, model, p| {
                let x = g.constant(batch.clone());
                model.forward(g, x, p, None)
            })?;
        forwards.training += 1;

        let beta = self.config.beta();
        let (loss, grads, aug_loss, aug_correct, traces) = match explored {
            None => (clean_loss, clean_grads, None, None, Vec::new()),
            Some((aug, traces)) => {
                let (aug_loss, aug_grads, aug_correct) =
                    self.loss_and_grads(labels, |g, model, p| aug.logits(g, model, p, batch))?;
                forwards.training += 1;
                // Written as a correction to the clean gradient so beta = 0,
                // or an augmented batch equal to the clean one, reproduces the
                // clean step bit for bit.
                let grads = clean_grads
                    .iter()
                    .zip(&aug_grads)
                    .map(|(c, a)| c.zip_map(a, |c, a| c + beta * (a - c)))
                    .collect::<Result<Vec<_>>>()?;
                (
                    combined_loss(clean_loss, aug_loss, beta),
                    grads,
                    Some(aug_loss),
                    Some(aug_correct),
                    traces,
                )
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} (clean {clean_loss}, augmented {aug_loss:?})"
            )));
        }
        sgd_step(
            self.model.params_mut(),
            &grads,
            self.config.sgd(epoch),
            &mut self.opt,
        )?;
        Ok(StepStats {
            loss,
            clean_loss,
            clean_correct,
            aug_loss,
            aug_correct,
            traces,
            forwards,
        })
    }

    fn loss_and_grads(
        &self,
        labels: &[usize],
        logits: impl FnOnce(&mut Graph, &Cnn, &[NodeId]) -> Result<NodeId>,
    ) -> Result<(f64, Vec<Tensor>, usize)> {
        let mut g = Graph::new();
        let params = self.model.bind(&mut g, true);
        let out = logits(&mut g, &self.model, &params)?;
        let loss = g.softmax_cross_entropy(out, labels, Reduction::Mean)?;
        let hits = correct(g.value(out)?, labels);
        let value = g.value(loss)?.item();
        let mut grads = g.backward(loss, &params)?;
        let grads = params
            .iter()
            .map(|&p| grads.take(p).expect("parameter gradient"))
            .collect();
        Ok((value, grads, hits))
    }
}

/// Everything measured in one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean combined objective over steps.
    pub loss: f64,
    pub clean_loss: f64,
    pub clean_accuracy: f64,
    pub aug_loss: Option<f64>,
    pub aug_accuracy: Option<f64>,
    /// Validation split of every source domain.
    pub val: Vec<(u32, Evaluation)>,
    pub train_seconds: f64,
    /// Mean exploration loss at each inner step; empty without exploration.
    pub trace_means: Vec<f64>,
    pub forwards: ForwardCount,
    /// Parameter checksum at the end of the epoch.
    pub checksum: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRecord {
    pub epochs: Vec<EpochMetrics>,
    /// Held-out domains, filled in after training.
    pub target: Vec<(u32, Evaluation)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Cnn,
    pub metrics: MetricsRecord,
    /// Per-sample exploration losses when `record_traces` is set.
    pub traces: Vec<TraceRow>,
}

/// Stable identifier of a training sample across epochs.
pub fn sample_id(domain: u32, index: usize) -> u64 {
    u64::from(domain) * 1_000_000 + index as u64
}

pub fn train(
    config: &TrainConfig,
    data: &dyn SampleSource,
    sources: &[u32],
) -> Result<TrainOutcome> {
    train_with(config, data, sources, &mut |_| {})
}

/// Trains on the `train` splits of `sources` only, validating on their
/// `val` splits after every epoch. Other domains are never read.
pub fn train_with(
    config: &TrainConfig,
    data: &dyn SampleSource,
    sources: &[u32],
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::Config("need at least one training domain".into()));
    }
    let mut unique = sources.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != sources.len() {
        return Err(Error::Config(format!(
            "duplicate training domains in {sources:?}"
        )));
    }
    let mc = config.model_config();
    let shape = data.image_shape();
    if data.classes() != mc.classes || shape != [mc.in_channels, mc.image_size, mc.image_size] {
        return Err(Error::Config(format!(
            "data has {} classes of {shape:?} images, model expects {} classes of {:?}",
            data.classes(),
            mc.classes,
            [mc.in_channels, mc.image_size, mc.image_size]
        )));
    }

    let mut trainer = Trainer::new(config.clone(), sources.to_vec())?;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            model: trainer.into_model(),
            metrics: MetricsRecord::default(),
            traces: Vec::new(),
        });
    }
    let train_sets: Vec<&Samples> = sources
        .iter()
        .map(|&d| data.samples(d, Split::Train))
        .collect::<Result<_>>()?;
    let val_sets: Vec<&Samples> = sources
        .iter()
        .map(|&d| data.samples(d, Split::Val))
        .collect::<Result<_>>()?;
    let mut pool: Vec<(usize, usize)> = train_sets
        .iter()
        .enumerate()
        .flat_map(|(s, set)| (0..set.len()).map(move |i| (s, i)))
        .collect();
    if pool.len() < config.batch_size {
        return Err(Error::Config(format!(
            "{} training samples cannot fill a batch of {}",
            pool.len(),
            config.batch_size
        )));
    }

    let mut data_rng = stream_rng(config.seeds.data, DATA_STREAM);
    let per_image: usize = shape.iter().product();
    let mut record = MetricsRecord::default();
    let mut trace_rows = Vec::new();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        pool.shuffle(&mut data_rng);
        let mut totals = (0.0, 0.0, 0usize, 0.0, 0usize);
        let mut forwards = ForwardCount::default();
        let mut step_sums: Vec<f64> = Vec::new();
        let mut traced = 0usize;
        let mut steps = 0usize;
        // The ragged tail of the shuffle is dropped.
        for (b, chunk) in pool.chunks_exact(config.batch_size).enumerate() {
            let mut pixels = Vec::with_capacity(chunk.len() * per_image);
            let mut labels = Vec::with_capacity(chunk.len());
            let mut domains = Vec::with_capacity(chunk.len());
            for &(s, i) in chunk {
                train_sets[s].extend_image(i, &mut pixels);
                labels.push(train_sets[s].labels()[i]);
                domains.push(sources[s]);
            }
            let mut batch_shape = vec![chunk.len()];
            batch_shape.extend_from_slice(&shape);
            let batch = Tensor::new(batch_shape, pixels)?;
            let stats = trainer
                .train_step(&batch, &labels, &domains, epoch)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!(
                        "{} run diverged at epoch {} batch {b} (lr {}): {msg}",
                        config.method,
                        epoch + 1,
                        config.sgd(epoch).lr
                    )),
                    other => other,
                })?;
            totals.0 += stats.loss;
            totals.1 += stats.clean_loss;
            totals.2 += stats.clean_correct;
            totals.3 += stats.aug_loss.unwrap_or(0.0);
            totals.4 += stats.aug_correct.unwrap_or(0);
            forwards.add(stats.forwards);
            for (t, &(s, i)) in stats.traces.iter().zip(chunk) {
                if step_sums.is_empty() {
                    step_sums = vec![0.0; t.losses.len()];
                }
                for (acc, l) in step_sums.iter_mut().zip(&t.losses) {
                    *acc += l;
                }
                traced += 1;
                if config.record_traces {
                    let id = sample_id(sources[s], i);
                    trace_rows.extend(t.losses.iter().enumerate().map(|(k, &loss)| TraceRow {
                        epoch: epoch + 1,
                        sample_id: id,
                        step: k,
                        loss,
                    }));
                }
            }
            steps += 1;
        }
        let train_seconds = started.elapsed().as_secs_f64();
        let seen = (steps * config.batch_size) as f64;
        let explored = trainer.explore.is_some();
        let val = sources
            .iter()
            .zip(&val_sets)
            .filter(|(_, set)| !set.is_empty())
            .map(|(&d, set)| evaluate(trainer.model(), &[set]).map(|e| (d, e)))
            .collect::<Result<Vec<_>>>()?;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr: config.sgd(epoch).lr,
            steps,
            loss: totals.0 / steps as f64,
            clean_loss: totals.1 / steps as f64,
            clean_accuracy: totals.2 as f64 / seen,
            aug_loss: explored.then(|| totals.3 / steps as f64),
            aug_accuracy: explored.then(|| totals.4 as f64 / seen),
            val,
            train_seconds,
            trace_means: step_sums.iter().map(|s| s / traced.max(1) as f64).collect(),
            forwards,
            checksum: trainer.model().checksum(),
        };
        on_epoch(&metrics);
        record.epochs.push(metrics);
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        metrics: record,
        traces: trace_rows,
    })
}
