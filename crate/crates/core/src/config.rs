//! Run configuration: a TOML file overlaid with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{GenConfig, SampleOptions};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::TrainConfig;

/// How scenes become samples and splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Train, test and validation shares of the scenes.
    pub split: [f64; 3],
    /// Window stride; a full window when unset.
    pub stride: Option<usize>,
    /// Largest frame step that still continues a track.
    pub max_frame_gap: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            split: [0.7, 0.25, 0.05],
            stride: None,
            max_frame_gap: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory.
    pub data_dir: Option<PathBuf>,
    /// Output directory.
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(rename = "gen")]
    pub generator: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data_dir: None,
            out_dir: None,
            checkpoint: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            generator: GenConfig::default(),
        }
    }
}

/// Values given on the command line; each one replaces the file value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub map: Option<usize>,
    pub hidden: Option<usize>,
    pub t_obs: Option<usize>,
    pub t_pred: Option<usize>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Overrides {
    /// Whether any model field is overridden.
    pub fn touches_model(&self) -> bool {
        self.variant.is_some() || self.map.is_some() || self.hidden.is_some() || self.t_obs.is_some() || self.t_pred.is_some()
    }

    pub fn apply_model(&self, model: &mut ModelConfig) {
        if let Some(v) = self.variant {
            model.variant = v;
        }
        if let Some(m) = self.map {
            model.map = m;
        }
        if let Some(h) = self.hidden {
            model.hidden = h;
        }
        if let Some(t) = self.t_obs {
            model.t_obs = t;
        }
        if let Some(t) = self.t_pred {
            model.t_pred = t;
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        self.apply_model(&mut cfg.model);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(p) = &self.data_dir {
            cfg.data_dir = Some(p.clone());
        }
        if let Some(p) = &self.out_dir {
            cfg.out_dir = Some(p.clone());
        }
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// File values (or defaults) with `overrides` applied on top.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        overrides.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            t_obs: self.model.t_obs,
            t_pred: self.model.t_pred,
            stride: self.data.stride,
            max_frame_gap: self.data.max_frame_gap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generator.validate()?;
        self.sample_options().validate()
    }
}

/// Hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}
