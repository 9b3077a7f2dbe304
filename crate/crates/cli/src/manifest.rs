use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Settings;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Written into every output directory. Holds no timestamps, so identical
/// runs produce identical manifests. `dwrag <cmd> --config manifest.toml`
/// reuses the recorded settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Command arguments that are not settings (question, dataset, grid).
    pub args: BTreeMap<String, String>,
    pub template_digest: String,
    /// sha256 of every input file, keyed by role.
    pub inputs: BTreeMap<String, String>,
    pub config: Settings,
}

impl RunManifest {
    pub fn new(command: &str, settings: &Settings) -> Result<Self> {
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: BTreeMap::new(),
            template_digest: settings.template_catalog()?.digest(),
            inputs: BTreeMap::new(),
            config: settings.resolved()?,
        })
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.into(), value.to_string());
        self
    }

    /// Records the digest of `path` under `role`.
    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(role.into(), file_digest(path)?);
        Ok(self)
    }

    /// Digests the sparse index files plus the dense store when present.
    pub fn index_inputs(mut self, dir: &Path) -> Result<Self> {
        for name in [crate::config::BM25_FILE, crate::config::DENSE_FILE] {
            let p = dir.join(name);
            if p.exists() {
                self = self.input(&format!("index/{name}"), &p)?;
            }
        }
        Ok(self)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).context("serializing manifest")?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackendKind;

    #[test]
    fn round_trips_through_the_config_loader() {
        let dir = tempfile::tempdir().unwrap();
        let s = Settings {
            backend: Some(BackendKind::Mock),
            width: Some(3),
            api_key: Some("secret".into()),
            ..Settings::default()
        };
        let m = RunManifest::new("run", &s).unwrap().arg("question", "q?");
        m.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(!text.contains("secret"));
        let back: RunManifest = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
        let loaded = Settings::from_file(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded.width, Some(3));
        assert_eq!(loaded.max_depth, Some(8));
        assert_eq!(loaded.frozen_clock, Some(true));
    }
}
