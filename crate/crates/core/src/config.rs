//! The configuration tree and its TOML file format.
//!
//! An empty file gives the defaults. Keys that do not exist are reported
//! together; a value of the wrong type is reported with its dotted key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AeTrainConfig, AutoencoderConfig};
use crate::data::{AugmentationPolicy, SyntheticConfig};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::TransitionSchedule;
use crate::error::{Error, Result};
use crate::eval::MatchConfig;
use crate::inference::TileConfig;
use crate::objective::WceConfig;
use crate::train::TrainConfig;

/// Default run directory when `--checkpoint` / `--run` is not given.
pub const CHECKPOINT_DIR_ENV: &str = "LATENT_EDGE_CHECKPOINT_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub autoencoder: AutoencoderConfig,
    pub ae_training: AeTrainConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: TransitionSchedule,
    pub wce: WceConfig,
    pub augmentation: AugmentationPolicy,
    pub train: TrainConfig,
    pub tile: TileConfig,
    pub eval: MatchConfig,
    pub synthetic: SyntheticConfig,
}

/// A key set away from its default, as `(dotted path, value)`.
pub type Override = (String, String);

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.ae_training.validate()?;
        self.denoiser.validate()?;
        self.diffusion.validate()?;
        self.wce.validate()?;
        self.augmentation.validate()?;
        self.train.validate()?;
        self.tile.validate()?;
        self.eval.validate()?;
        self.synthetic.validate()?;
        let crop = self.augmentation.crop_size;
        if crop % 16 != 0 {
            return Err(Error::Config(format!("augmentation.crop_size = {crop} must be divisible by 16")));
        }
        if self.tile.window != crop {
            return Err(Error::Config(format!(
                "tile.window = {} must equal augmentation.crop_size = {crop} (the denoiser is size-specific)",
                self.tile.window
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self::parse_with_overrides(text)?.0)
    }

    /// Like [`Config::parse`], also listing every key the text sets.
    pub fn parse_with_overrides(text: &str) -> Result<(Self, Vec<Override>)> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("TOML syntax: {}", e.message())))?;
        let defaults = toml::Table::try_from(Config::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        let mut set = Vec::new();
        walk(&user, &defaults, "", &mut unknown, &mut set);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: Config = serde_path_to_error::deserialize(toml::Value::Table(user)).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok((cfg, set))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<Override>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with_overrides(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Loads `path` if given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<(Self, Vec<Override>)> {
        match path {
            Some(p) => Self::load(p),
            None => Ok((Self::default(), Vec::new())),
        }
    }
}

fn walk(user: &toml::Table, defaults: &toml::Table, prefix: &str, unknown: &mut Vec<String>, set: &mut Vec<Override>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, defaults.get(k)) {
            (_, None) => unknown.push(path),
            (toml::Value::Table(u), Some(toml::Value::Table(d))) => walk(u, d, &path, unknown, set),
            (v, Some(_)) => set.push((path, v.to_string())),
        }
    }
}

/// `LATENT_EDGE_CHECKPOINT_DIR`, if set.
pub fn default_checkpoint_dir() -> Option<PathBuf> {
    std::env::var_os(CHECKPOINT_DIR_ENV).map(PathBuf::from)
}
