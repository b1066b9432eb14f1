use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

/// Record of one command invocation, written before any work starts and
/// rewritten with the finish time on success.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub config: Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub threads: usize,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: Option<f64>,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn begin(path: &Path, command: &str, config: Value, seeds: Vec<u64>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Result<Self> {
        let m = Self {
            command: command.into(),
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds,
            inputs,
            outputs,
            threads: rayon::current_num_threads(),
            started_at: now(),
            finished_at: None,
            path: path.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&self.path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_at = Some(now());
        self.write()
    }
}
