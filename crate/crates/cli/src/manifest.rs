use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

/// Provenance record written as `manifest.json` beside a command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Version string: `SPACON_BUILD_DESCRIBE` at build time if set, else the
/// crate version.
pub fn version() -> String {
    option_env!("SPACON_BUILD_DESCRIBE")
        .map(str::to_string)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

impl RunManifest {
    pub fn start(command: &str, seed: u64) -> Self {
        let t = now();
        RunManifest {
            command: command.to_string(),
            config: None,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            version: version(),
            started_unix: t,
            finished_unix: t,
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) -> &mut Self {
        self.inputs.insert(key.to_string(), path.to_path_buf());
        self
    }

    pub fn output(&mut self, key: &str, path: &Path) -> &mut Self {
        self.outputs.insert(key.to_string(), path.to_path_buf());
        self
    }

    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = now();
        let p = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))
    }
}
