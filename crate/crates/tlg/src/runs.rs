//! Run directories, locking, and the reproducibility manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Result, TlgError};

/// Everything needed to replay a command, written once per run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_path: Option<String>,
    pub config_hash: String,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub output_paths: Vec<String>,
    pub git_revision: String,
    /// Effective configuration after overrides, embedded verbatim.
    pub effective_config: String,
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Output root: `TLG_RUNS_DIR` when set, else `./runs`.
pub fn runs_root() -> PathBuf {
    std::env::var_os("TLG_RUNS_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// An exclusively created run directory holding exactly one manifest.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Create `root/<stamp>-<command>[-<n>]` exclusively; a lock file guards
    /// against two writers landing on the same directory.
    pub fn create(
        command: &str,
        config_path: Option<&Path>,
        config: &Config,
        overrides: &[String],
        seed: u64,
    ) -> Result<RunDir> {
        let root = runs_root();
        std::fs::create_dir_all(&root)?;
        let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
        let mut path = root.join(format!("{stamp}-{command}"));
        let mut counter = 1;
        loop {
            match std::fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    counter += 1;
                    path = root.join(format!("{stamp}-{command}-{counter}"));
                }
                Err(e) => return Err(e.into()),
            }
        }
        std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path.join("lock"))
            .map_err(|e| TlgError::Runtime(format!("run directory lock failed: {e}")))?;
        let run_id = path.file_name().unwrap().to_string_lossy().to_string();
        let manifest = RunManifest {
            run_id,
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            config_hash: config.hash(),
            overrides: overrides.to_vec(),
            seed,
            started_at: now_rfc3339(),
            finished_at: None,
            output_paths: Vec::new(),
            git_revision: git_revision(),
            effective_config: config.to_toml(),
        };
        let dir = RunDir { path, manifest };
        std::fs::write(dir.path.join("config.toml"), &dir.manifest.effective_config)?;
        dir.write_manifest()?;
        Ok(dir)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn record_output(&mut self, path: &Path) {
        self.manifest.output_paths.push(path.display().to_string());
    }

    pub fn finish(&mut self) -> Result<()> {
        self.manifest.finished_at = Some(now_rfc3339());
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| TlgError::Runtime(format!("manifest serialization failed: {e}")))?;
        std::fs::write(self.path.join("manifest.json"), text)?;
        Ok(())
    }
}
