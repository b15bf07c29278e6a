use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explore::ExploreConfig;
use crate::models::ModelConfig;
use crate::optim::SgdParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Clean risk only.
    Erm,
    /// Worst-case Fourier amplitude mixing.
    ModeF,
    /// Worst-case feature-statistics mixing at the model hook.
    ModeA,
    /// Mixing with the uniform starting weights, no ascent (`K = 0`).
    RandomAug,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Erm, Method::ModeF, Method::ModeA, Method::RandomAug];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::ModeF => "mode_f",
            Method::ModeA => "mode_a",
            Method::RandomAug => "random_aug",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{name}` (expected one of erm, mode_f, mode_a, random_aug)"
                ))
            })
    }

    pub fn explores(self) -> bool {
        self != Method::Erm
    }

    /// MODE-F `0.3`, MODE-A `0.4`; random augmentation shares MODE-F's weight.
    pub fn default_beta(self) -> f64 {
        match self {
            Method::Erm => 0.0,
            Method::ModeF | Method::RandomAug => 0.3,
            Method::ModeA => 0.4,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The three independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub explore: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            init: seed,
            data: seed,
            explore: seed,
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::all(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    /// Weight of the augmented risk: `(1 - beta) * clean + beta * augmented`.
    /// Unset means the method default (see [`Method::default_beta`]).
    pub beta: Option<f64>,
    /// Exploration settings. `mechanism` is only consulted by `random_aug`;
    /// the MODE variants fix their own.
    pub explore: ExploreConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate multiplier applied every `lr_decay_period` epochs.
    pub lr_decay: f64,
    pub lr_decay_period: usize,
    pub seeds: Seeds,
    /// Architecture; its `seed` is replaced by `seeds.init`.
    pub model: ModelConfig,
    /// Keep every sample's per-step exploration loss, not just step means.
    pub record_traces: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Erm,
            beta: None,
            explore: ExploreConfig::default(),
            epochs: 20,
            batch_size: 128,
            // The 0.05 digits recipe collapses this normalization-free CNN
            // to a constant predictor; 0.01 trains stably.
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 0.1,
            lr_decay_period: 20,
            seeds: Seeds::default(),
            model: ModelConfig::default(),
            record_traces: false,
        }
    }
}

impl TrainConfig {
    pub fn preset(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// The augmented-risk weight in effect.
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or_else(|| self.method.default_beta())
    }

    /// Copy with `beta` filled in, as written next to run outputs.
    pub fn resolved(&self) -> Self {
        Self {
            beta: Some(self.beta()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let beta = self.beta();
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!("beta must be in [0, 1], got {beta}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 {
            return Err(Error::Config(format!(
                "lr_decay must be positive, got {}",
                self.lr_decay
            )));
        }
        if self.lr_decay_period == 0 {
            return Err(Error::Config("lr_decay_period must be positive".into()));
        }
        if self.method.explores() {
            self.explore.validate()?;
        }
        self.model_config().validate()?;
        if self.method == Method::ModeA && self.model.hook.is_none() {
            return Err(Error::Config("mode_a needs a model hook".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seeds.init,
            ..self.model.clone()
        }
    }

    /// Exploration as actually run: mechanism fixed by the method and
    /// `K = 0` for random augmentation. `None` for ERM.
    pub fn effective_explore(&self) -> Option<ExploreConfig> {
        let mut e = self.explore.clone();
        match self.method {
            Method::Erm => return None,
            Method::ModeF => e.mechanism = "fourier".into(),
            Method::ModeA => e.mechanism = "featstats".into(),
            Method::RandomAug => e.k = 0,
        }
        Some(e)
    }

    pub fn sgd(&self, epoch: usize) -> SgdParams {
        let decays = (epoch / self.lr_decay_period) as i32;
        SgdParams {
            lr: self.lr * self.lr_decay.powi(decays),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Hex SHA-256 of the canonical JSON of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.resolved()).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// `(1 - beta) * clean + beta * augmented`.
pub fn combined_loss(clean: f64, augmented: f64, beta: f64) -> f64 {
    (1.0 - beta) * clean + beta * augmented
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_loss_endpoints() {
        assert_eq!(combined_loss(1.7, 9.0, 0.0), 1.7);
        assert_eq!(combined_loss(1.7, 9.0, 1.0), 9.0);
        assert!((combined_loss(1.0, 2.0, 0.3) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn presets() {
        let f = TrainConfig::preset(Method::ModeF);
        assert_eq!(f.beta(), 0.3);
        assert_eq!(
            (f.explore.k, f.explore.mu, f.explore.m, f.explore.gamma),
            (10, 0.05, 3, 1.0)
        );
        assert_eq!(TrainConfig::preset(Method::ModeA).beta(), 0.4);
        assert_eq!(TrainConfig::preset(Method::Erm).beta(), 0.0);
        assert_eq!(
            (f.lr, f.momentum, f.weight_decay, f.batch_size),
            (0.01, 0.9, 5e-4, 128)
        );
        let r = TrainConfig::preset(Method::RandomAug)
            .effective_explore()
            .unwrap();
        assert_eq!(r.k, 0);
        let a = TrainConfig::preset(Method::ModeA)
            .effective_explore()
            .unwrap();
        assert_eq!(a.mechanism, "featstats");
        assert!(TrainConfig::preset(Method::Erm)
            .effective_explore()
            .is_none());
    }

    #[test]
    fn step_decay() {
        let c = TrainConfig {
            lr: 0.05,
            lr_decay: 0.1,
            lr_decay_period: 20,
            ..Default::default()
        };
        assert_eq!(c.sgd(0).lr, 0.05);
        assert_eq!(c.sgd(19).lr, 0.05);
        assert!((c.sgd(20).lr - 0.005).abs() < 1e-15);
        assert!((c.sgd(45).lr - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        TrainConfig::default().validate().unwrap();
        let bad = [
            TrainConfig {
                beta: Some(1.5),
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                lr: f64::NAN,
                ..Default::default()
            },
            TrainConfig {
                lr_decay_period: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let mut a = TrainConfig::preset(Method::ModeA);
        a.model.hook = None;
        assert!(a.validate().is_err());
    }

    #[test]
    fn json_mirrors_fields_and_hash_tracks_content() {
        let c = TrainConfig::preset(Method::ModeF);
        let json = serde_json::to_value(&c).unwrap();
        for key in [
            "method",
            "beta",
            "explore",
            "epochs",
            "batch_size",
            "lr",
            "momentum",
            "weight_decay",
            "lr_decay",
            "lr_decay_period",
            "seeds",
            "model",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["method"], "mode_f");
        assert!(json["beta"].is_null());
        assert_eq!(serde_json::to_value(c.resolved()).unwrap()["beta"], 0.3);
        let back: TrainConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(TrainConfig::default().hash(), c.hash());
        assert_eq!(c.resolved().hash(), c.hash());
        // Partial documents fill in defaults.
        let partial: TrainConfig =
            serde_json::from_str(r#"{"method":"mode_a","epochs":2}"#).unwrap();
        assert_eq!(partial.epochs, 2);
        assert_eq!(partial.beta(), 0.4);
        assert_eq!(partial.lr, 0.01);
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("dro").is_err());
    }
}
