//! Run manifests: what ran, with which resolved config, and what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mmnet_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::{AblateArgs, EvalArgs, ExportArgs, GenDataArgs, TrainArgs};

/// The parsed command. Config flags are kept for the record, but replay uses
/// the resolved config stored next to it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    GenData(GenDataArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    Ablate(AblateArgs),
    ExportMasks(ExportArgs),
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::GenData(_) => "gen-data",
            Invocation::Train(_) => "train",
            Invocation::Eval(_) => "eval",
            Invocation::Ablate(_) => "ablate",
            Invocation::ExportMasks(_) => "export-masks",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub invocation: Invocation,
    pub argv: Vec<String>,
    /// Fully resolved config; absent only if resolution itself failed.
    pub config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

/// Collects artifacts while a command runs.
pub struct Recorder {
    pub invocation: Invocation,
    pub config: Option<TrainConfig>,
    pub artifacts: BTreeMap<String, PathBuf>,
    started: String,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl Recorder {
    pub fn new(invocation: Invocation) -> Self {
        Recorder { invocation, config: None, artifacts: BTreeMap::new(), started: now() }
    }

    pub fn artifact(&mut self, key: &str, path: &Path) {
        self.artifacts.insert(key.to_string(), path.to_path_buf());
    }

    /// Writes `<dir>/<command>.manifest.json` atomically.
    pub fn finish(self, dir: &Path, outcome: &Result<()>) -> Result<PathBuf> {
        let name = self.invocation.name();
        let manifest = RunManifest {
            argv: std::env::args().collect(),
            seed: self.config.as_ref().map(|c| c.seed),
            config: self.config,
            started: self.started,
            finished: now(),
            status: if outcome.is_ok() { Status::Ok } else { Status::Failed },
            error: outcome.as_ref().err().map(|e| format!("{e:#}")),
            artifacts: self.artifacts,
            invocation: self.invocation,
        };
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{name}.manifest.json"));
        write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(path)
    }
}

/// Writes to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}
