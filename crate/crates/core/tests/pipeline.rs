//! End-to-end flows through the public API: data on disk, training,
//! checkpoints, and plugging a custom exploration mechanism into the registry.

use std::sync::Arc;

use mode_core::datagen::{generate_dataset, GenerateConfig};
use mode_core::dataset::{DomainDataset, SampleSource, Split};
use mode_core::explore::{
    Alpha, Augmented, BatchEvaluation, Mechanism, MechanismRegistry, PreparedBatch,
};
use mode_core::models::{Cnn, ModelConfig};
use mode_core::trainer::{
    evaluate, load_checkpoint, save_checkpoint, train, Method, TrainConfig, Trainer,
};
use mode_core::{Error, Result, Tensor};

fn small_data() -> DomainDataset {
    generate_dataset(&GenerateConfig {
        classes: 4,
        per_class: 10,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

fn small_config(method: Method) -> TrainConfig {
    let mut c = TrainConfig::preset(method);
    c.epochs = 2;
    c.batch_size = 12;
    c.explore.k = 2;
    c.model = ModelConfig {
        channels: vec![4, 8],
        classes: 4,
        ..Default::default()
    };
    c
}

#[test]
fn saved_dataset_trains_like_the_in_memory_one() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let loaded = DomainDataset::load(dir.path()).unwrap();
    assert_eq!(loaded, data);

    let config = small_config(Method::ModeF);
    let a = train(&config, &data, &[0, 1, 2]).unwrap();
    let b = train(&config, &loaded, &[0, 1, 2]).unwrap();
    assert_eq!(a.model.checksum(), b.model.checksum());
}

#[test]
fn checkpoint_restores_predictions() {
    let data = small_data();
    let config = small_config(Method::ModeA);
    let run = train(&config, &data, &[1, 2, 3]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &run.model, &config, config.epochs).unwrap();
    let restored = load_checkpoint(dir.path()).unwrap();
    assert_eq!(restored.epoch, config.epochs);
    assert_eq!(restored.config, config.resolved());

    let held_out = data.samples(0, Split::Val).unwrap();
    let (batch, _) = held_out.batch(&(0..held_out.len()).collect::<Vec<_>>());
    assert!(restored
        .model
        .logits(&batch)
        .unwrap()
        .bit_eq(&run.model.logits(&batch).unwrap()));
    let (a, b) = (
        evaluate(&restored.model, &[held_out]).unwrap(),
        evaluate(&run.model, &[held_out]).unwrap(),
    );
    assert_eq!((a.loss, a.accuracy), (b.loss, b.accuracy));
}

/// Replaces every image with its channel mean: a weight-free augmentation,
/// just enough to exercise the registry.
struct Grayscale;

struct GrayBatch(Tensor);

impl Mechanism for Grayscale {
    fn name(&self) -> &'static str {
        "grayscale"
    }

    fn prepare(
        &self,
        _: &Cnn,
        batch: &Tensor,
        _: &[Vec<usize>],
        _: f64,
    ) -> Result<Box<dyn PreparedBatch>> {
        let [n, c, h, w] =
            <[usize; 4]>::try_from(batch.shape()).map_err(|_| Error::ShapeMismatch {
                op: "grayscale",
                detail: "expected a 4-D batch".into(),
            })?;
        let plane = h * w;
        let gray = Tensor::from_fn(&[n, c, h, w], |i| {
            let (s, p) = (i / (c * plane), i % plane);
            (0..c)
                .map(|k| batch.data()[s * c * plane + k * plane + p])
                .sum::<f64>()
                / c as f64
        });
        Ok(Box::new(GrayBatch(gray)))
    }
}

impl PreparedBatch for GrayBatch {
    fn evaluate(
        &self,
        model: &Cnn,
        labels: &[usize],
        _: &[Alpha],
        _: bool,
    ) -> Result<BatchEvaluation> {
        let logits = model.logits(&self.0)?;
        let k = logits.shape()[1];
        let losses = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = &logits.data()[i * k..(i + 1) * k];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - row[y]
            })
            .collect();
        Ok((losses, None))
    }

    fn finish(self: Box<Self>, _: &[Alpha]) -> Result<Augmented> {
        Ok(Augmented::Images(self.0))
    }
}

#[test]
fn custom_mechanism_plugs_into_training() {
    let data = small_data();
    let mut registry = MechanismRegistry::with_builtins();
    registry.register(Arc::new(Grayscale));
    assert!(registry.names().contains(&"grayscale"));

    let mut config = small_config(Method::RandomAug);
    config.explore.mechanism = "grayscale".into();
    let mut trainer = Trainer::with_registry(config.clone(), vec![0, 1], &registry).unwrap();
    let train_split = data.samples(0, Split::Train).unwrap();
    let (batch, labels) = train_split.batch(&(0..12).collect::<Vec<_>>());
    let before = trainer.model().checksum();
    let stats = trainer.train_step(&batch, &labels, &[0; 12], 1).unwrap();
    assert!(stats.aug_loss.is_some());
    assert_ne!(trainer.model().checksum(), before);

    // The stock registry does not know it.
    assert!(Trainer::new(config, vec![0, 1]).is_err());
}
