use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdts::Container;
use crate::models::Cnn;

use super::TrainConfig;

pub const CHECKPOINT_INDEX: &str = "checkpoint.json";

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    files: BTreeMap<String, String>,
    shapes: BTreeMap<String, Vec<usize>>,
    config: TrainConfig,
    epoch: usize,
}

/// A restored model with the config and epoch it was saved at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Cnn,
    pub config: TrainConfig,
    pub epoch: usize,
}

/// One full-precision `MDTS` file per parameter plus a JSON index.
pub fn save_checkpoint(dir: &Path, model: &Cnn, config: &TrainConfig, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Index {
        files: BTreeMap::new(),
        shapes: BTreeMap::new(),
        config: config.resolved(),
        epoch,
    };
    for (name, p) in model.param_names().into_iter().zip(model.params()) {
        let file = format!("{name}.mdts");
        Container::from_tensor(p).write(&dir.join(&file))?;
        index.shapes.insert(name.clone(), p.shape().to_vec());
        index.files.insert(name, file);
    }
    let path = dir.join(CHECKPOINT_INDEX);
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let reference = Cnn::new(index.config.model_config())?;
    let mut params = Vec::with_capacity(reference.params().len());
    for (name, expected) in reference.param_names().into_iter().zip(reference.params()) {
        let file = index.files.get(&name).ok_or_else(|| {
            Error::format(&path, "files", format!("no file for parameter `{name}`"))
        })?;
        let t = Container::read(&dir.join(file))?.to_tensor()?;
        if t.shape() != expected.shape()
            || index.shapes.get(&name).map(Vec::as_slice) != Some(t.shape())
        {
            return Err(Error::format(
                dir.join(file),
                "extents",
                format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    expected.shape()
                ),
            ));
        }
        params.push(t);
    }
    Ok(Checkpoint {
        model: Cnn::from_params(index.config.model_config(), params)?,
        config: index.config,
        epoch: index.epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    fn config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                channels: vec![4, 8],
                image_size: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = config();
        let model = Cnn::new(c.model_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &c, 7).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.model.checksum(), model.checksum());
        assert_eq!(back.epoch, 7);
        assert_eq!(back.config, c.resolved());
        let index: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(CHECKPOINT_INDEX)).unwrap())
                .unwrap();
        assert_eq!(index["files"]["block0.kernel"], "block0.kernel.mdts");
        assert_eq!(index["shapes"]["head.bias"], serde_json::json!([10]));
    }

    #[test]
    fn missing_or_reshaped_parameter_rejected() {
        let c = config();
        let model = Cnn::new(c.model_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model, &c, 1).unwrap();
        let victim = dir.path().join("head.bias.mdts");
        Container::from_tensor(&crate::Tensor::zeros(&[3]))
            .write(&victim)
            .unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Format { .. })
        ));
        fs::remove_file(&victim).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io { .. })));
    }
}
