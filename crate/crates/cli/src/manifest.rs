use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slotdisc::checkpoint::write_atomic;

pub const MANIFEST_SCHEMA: &str = "1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(InputDigest {
            path: path.to_path_buf(),
            sha256: slotdisc::alcore::hex(&Sha256::digest(&bytes)),
        })
    }

    /// Fails if the file no longer has the recorded content.
    pub fn verify(&self) -> Result<()> {
        let now = InputDigest::of(&self.path)?;
        if now.sha256 != self.sha256 {
            bail!(
                "{} changed since the manifest was written (sha256 {} != {})",
                self.path.display(),
                now.sha256,
                self.sha256
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub tool: String,
    pub dataset_schema: String,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            tool: env!("CARGO_PKG_VERSION").to_owned(),
            dataset_schema: slotdisc::SCHEMA_VERSION.to_owned(),
        }
    }
}

/// Everything needed to rerun a command. Written before any output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub inputs: Vec<InputDigest>,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub versions: Versions,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            schema: MANIFEST_SCHEMA.to_owned(),
            command: command.to_owned(),
            inputs: Vec::new(),
            seeds: Vec::new(),
            config,
            versions: Versions::default(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs.push(InputDigest::of(path)?);
        Ok(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        write_atomic(path, &serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest =
            serde_json::from_slice(&bytes).with_context(|| format!("parsing manifest {}", path.display()))?;
        if m.schema != MANIFEST_SCHEMA {
            bail!("unsupported manifest schema `{}`", m.schema);
        }
        Ok(m)
    }
}

/// `<file>.manifest.json` next to an output file.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
