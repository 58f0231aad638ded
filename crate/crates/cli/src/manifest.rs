//! Run manifests written next to every command's outputs.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fail;

pub const FILE: &str = "manifest.json";

pub const REVISION: &str = env!("LABES_REVISION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Interrupted,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Command parameters with every default materialized.
    pub config: serde_json::Value,
    pub revision: String,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: Option<String>,
    pub status: Status,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn digests(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>, inputs: &[PathBuf]) -> Result<RunManifest> {
        Ok(RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            revision: REVISION.into(),
            seed,
            started: now(),
            finished: None,
            status: Status::Running,
            inputs: digests(inputs)?,
            outputs: BTreeMap::new(),
        })
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| fail::data(format!("reading manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| fail::data(format!("parsing manifest {}: {e}", path.display())))
    }

    /// Fail unless every recorded input still has its recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for (p, want) in &self.inputs {
            let got = sha256_file(Path::new(p)).map_err(|e| fail::data(format!("{e:#}")))?;
            if &got != want {
                return Err(fail::data(format!("input {p} changed since the run started")));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&dir.join(FILE), text.as_bytes())
    }

    pub fn finish(&mut self, status: Status, outputs: &[PathBuf], dir: &Path) -> Result<()> {
        self.status = status;
        self.finished = Some(now());
        let present: Vec<PathBuf> = outputs.iter().filter(|p| p.is_file()).cloned().collect();
        self.outputs = digests(&present)?;
        self.write(dir)
    }
}

/// Write via a temporary sibling and rename so readers never see partial files.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}
