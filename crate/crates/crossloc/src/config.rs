//! Run configuration: a TOML file, then command-line flags on top.
//!
//! ```toml
//! version = 1
//! out = "runs/demo"
//!
//! [model]
//! k = 4
//! dim = 64
//!
//! [train]
//! epochs = 20
//! lr = 1e-3
//!
//! [data]
//! annotations = "data/annotations.jsonl"
//! ```
//!
//! Every table and field is optional. Each run writes the effective
//! configuration to `config.json` in its output directory.

use std::path::{Path, PathBuf};

use crossloc_core::model::ModelConfig;
use crossloc_core::synth::SyntheticSpec;
use crossloc_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::write_json;
use crate::synthetic::SplitSizes;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON Lines annotations; when absent, samples are rendered in memory
    /// from `synthetic` with the split sizes below.
    pub annotations: Option<PathBuf>,
    /// Anchor file; when absent, anchors are clustered from the training split.
    pub anchors: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Iterations of anchor clustering.
    pub anchor_iters: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let sizes = SplitSizes::BENCHMARK;
        Self {
            annotations: None,
            anchors: None,
            synthetic: SyntheticSpec::default(),
            train_size: sizes.train,
            val_size: sizes.val,
            test_size: sizes.test,
            anchor_iters: 100,
        }
    }
}

impl DataConfig {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train_size,
            val: self.val_size,
            test: self.test_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Flag values; `None` leaves the configured value alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub k: Option<usize>,
    pub heads: Option<usize>,
    pub dim: Option<usize>,
    pub anchors: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Version {
                path: path.into(),
                found: cfg.version,
                expected: CONFIG_VERSION,
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text, path)
    }

    /// `--seed` seeds the model, the shuffle and the synthetic renderer.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.model.seed = s;
            self.train.seed = s;
            self.data.synthetic.seed = s;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.lr {
            self.train.lr = v;
        }
        if let Some(v) = o.k {
            self.model.k = v;
        }
        if let Some(v) = o.heads {
            self.model.heads = v;
        }
        if let Some(v) = o.dim {
            self.model.dim = v;
        }
        if let Some(v) = &o.anchors {
            self.data.anchors = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.annotations.is_none() {
            self.data.synthetic.validate()?;
            let s = &self.data.synthetic;
            if (s.query_size, s.reference_size) != (self.model.query_size, self.model.reference_size) {
                return Err(Error::Config(format!(
                    "synthetic images are {}/{} px but the model expects {}/{} px",
                    s.query_size, s.reference_size, self.model.query_size, self.model.reference_size
                )));
            }
        }
        Ok(())
    }

    /// Writes `config.json` into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.json");
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
