//! Run manifest: everything needed to rerun a training job.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Config, Override};
use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Stage this manifest belongs to (`train-ae`, `train-diffusion`).
    pub stage: String,
    pub config: Config,
    pub seed: u64,
    pub version: String,
    pub dataset_fingerprint: String,
    pub dataset_size: usize,
    pub overrides: Vec<Override>,
    pub command: Vec<String>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl RunManifest {
    pub fn new(stage: &str, config: &Config, seed: u64, samples: &[Sample], overrides: Vec<Override>) -> Self {
        Self {
            stage: stage.to_string(),
            config: config.clone(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_fingerprint: dataset_fingerprint(samples),
            dataset_size: samples.len(),
            overrides,
            command: std::env::args().collect(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn file_name(stage: &str) -> String {
        format!("manifest_{stage}.json")
    }

    /// Writes `run/manifest_{stage}.json`. An existing manifest is never
    /// replaced: writing fails unless it describes the same configuration
    /// and dataset (the resume case), in which case it is left untouched.
    pub fn write_once(&self, run: &Path) -> Result<()> {
        fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
        let path = run.join(Self::file_name(&self.stage));
        if path.exists() {
            let old = Self::read(&path)?;
            if old.config != self.config || old.dataset_fingerprint != self.dataset_fingerprint {
                return Err(Error::Config(format!(
                    "{} exists with a different config or dataset; use a fresh run directory",
                    path.display()
                )));
            }
            return Ok(());
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// SHA-256 over ids and pixel values, in sample order.
pub fn dataset_fingerprint(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        h.update([0u8]);
        let (rows, cols) = s.gt.dims();
        h.update((rows as u64).to_le_bytes());
        h.update((cols as u64).to_le_bytes());
        for v in s.image.data().iter().chain(s.gt.data()) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::{EdgeMap, RgbImage};

    fn sample(v: f32) -> Sample {
        Sample::new(RgbImage::zeros(4, 4), EdgeMap::from_fn(4, 4, |_, _| v), "a").unwrap()
    }

    #[test]
    fn fingerprint_tracks_content() {
        assert_eq!(dataset_fingerprint(&[sample(0.5)]), dataset_fingerprint(&[sample(0.5)]));
        assert_ne!(dataset_fingerprint(&[sample(0.5)]), dataset_fingerprint(&[sample(0.25)]));
    }

    #[test]
    fn never_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::default();
        let m = RunManifest::new("train-ae", &cfg, 0, &[sample(0.5)], vec![]);
        m.write_once(dir.path()).unwrap();
        let path = dir.path().join(RunManifest::file_name("train-ae"));
        let before = fs::read(&path).unwrap();
        let mut again = m.clone();
        again.created_at += 10;
        again.write_once(dir.path()).unwrap();
        assert_eq!(fs::read(&path).unwrap(), before);
        let other = RunManifest::new("train-ae", &cfg, 0, &[sample(0.25)], vec![]);
        assert!(other.write_once(dir.path()).is_err());
    }
}
