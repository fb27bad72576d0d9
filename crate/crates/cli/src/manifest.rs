//! Run manifests: one JSON file per invocation, enough to replay it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process;

use serde::{Deserialize, Serialize};

use crate::args::{Command, GlobalArgs};
use crate::Failure;

pub const RUN_FORMAT: &str = "blockflow-run";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub argv: Vec<String>,
    pub global: GlobalArgs,
    /// The parsed command with all defaults applied; replay runs this.
    pub invocation: Command,
    /// Library-level configs the command resolved its flags into.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub git_describe: String,
    pub duration_secs: f64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, Failure> {
        fs::create_dir_all(out_dir).map_err(|e| Failure::io(out_dir, e))?;
        let path = out_dir.join(Self::file_name(&self.command));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        if m.format != RUN_FORMAT {
            return Err(Failure::Io(format!(
                "{}: not a run manifest (format {:?})",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }
}

/// `git describe --always --dirty` of the working directory, or "unknown".
pub fn git_describe() -> String {
    process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
