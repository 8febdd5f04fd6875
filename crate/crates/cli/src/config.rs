//! JSON run configuration: parsing with field-path errors, flag overrides
//! and validation before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zoomiqa::augment::{TtaConfig, ZoomRegistry, ZoomSpec};
use zoomiqa::model::BackboneConfig;
use zoomiqa::ndgrad::AdamConfig;
use zoomiqa::training::{LossConfig, TrainConfig};
use zoomiqa::{Error, Result};

/// A built-in registry name or an inline list of zoom specs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegistryChoice {
    Named(String),
    Inline(Vec<ZoomSpec>),
}

impl RegistryChoice {
    pub fn resolve(&self) -> Result<ZoomRegistry> {
        match self {
            RegistryChoice::Named(n) => ZoomRegistry::builtin(n).map_err(|e| Error::usage(format!("registry: {e}"))),
            RegistryChoice::Inline(specs) => {
                ZoomRegistry::new(specs.clone()).map_err(|e| Error::usage(format!("registry: {e}")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub registry: RegistryChoice,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub tta: TtaConfig,
    pub data: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            registry: RegistryChoice::Named("combined".into()),
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            train: TrainSection::default(),
            tta: TtaConfig::default(),
            data: DataPaths::default(),
        }
    }
}

/// Command-line values that replace config fields when given.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub registry: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::usage(format!("config field `{path}`: {}", e.inner()))
        })
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.registry {
            self.registry = RegistryChoice::Named(v.clone());
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if let Some(v) = o.lr {
            self.train.optimizer.lr = v;
        }
        if let Some(v) = o.lambda {
            self.loss.lambda = v;
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            optimizer: self.train.optimizer,
        }
    }

    /// Checks every section; returns the resolved registry.
    pub fn validate(&self) -> Result<ZoomRegistry> {
        let registry = self.registry.resolve()?;
        self.backbone.validate().map_err(|e| Error::usage(format!("backbone: {e}")))?;
        self.loss.validate()?;
        self.train_config().validate()?;
        self.tta.validate()?;
        Ok(registry)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}
