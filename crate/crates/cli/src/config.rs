use std::fs;
use std::path::{Path, PathBuf};

use mcunet::arch::NetworkConfig;
use mcunet::data::{build_manifest, Manifest};
use mcunet::train::TrainConfig;
use mcunet::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run needs, as one JSON document. Missing keys take their
/// defaults; unknown keys are rejected. Relative paths are resolved against
/// the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub dataset_root: Option<PathBuf>,
    pub dataset_name: String,
    /// Explicit manifest; overrides `dataset_root`'s default split.
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            dataset_root: None,
            dataset_name: "DRIVE".into(),
            manifest: None,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            context: format!("reading {}", path.display()),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.dataset_root,
            &mut cfg.manifest,
            &mut cfg.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn manifest(&self) -> Result<Manifest> {
        match (&self.manifest, &self.dataset_root) {
            (Some(path), _) => Manifest::load(path),
            (None, Some(root)) => build_manifest(root, &self.dataset_name),
            (None, None) => Err(Error::Config(
                "either \"manifest\" or \"dataset_root\" must be set".into(),
            )),
        }
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("run config serializes");
        serde_json::to_string_pretty(&value).expect("json value serializes")
    }
}
