use loid::format::write_atomic;
use loid::tensor::sha256_hex;
use loid::Result;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Record written next to every artifact. Rerunning `argv` reproduces the
/// artifacts byte for byte; only `wall_clock_secs` and `git_describe` vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
    pub git_describe: String,
}

pub fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn digest(path: &Path) -> Result<InputDigest> {
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&std::fs::read(path)?),
    })
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub struct Recorder {
    command: &'static str,
    started: Instant,
    inputs: Vec<InputDigest>,
}

impl Recorder {
    pub fn start(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: Vec::new(),
        }
    }

    /// Hashes `path` as it is read, so the digest matches what the run used.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    /// Writes `<primary>.manifest.json` and returns its path.
    pub fn finish(
        self,
        primary: &Path,
        artifacts: &[&Path],
        config: impl Serialize,
        seed: u64,
    ) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.into(),
            argv: std::env::args().collect(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: self.inputs,
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            git_describe: git_describe(),
        };
        let path = manifest_path(primary);
        write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(path)
    }
}
