//! Run manifest written next to every output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub gmfg: &'static str,
    pub arch: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config: String,
    pub spec_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub threads: usize,
    pub output_dir: PathBuf,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_clock_seconds: f64,
    pub versions: Versions,
    pub outputs: Vec<String>,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn new(command: Vec<String>, config: String, spec_hash: String, seed: Option<u64>, threads: usize, output_dir: &Path) -> Self {
        RunManifest {
            command,
            config,
            spec_hash,
            seed,
            threads,
            output_dir: output_dir.to_path_buf(),
            status: Status::Running,
            error: None,
            wall_clock_seconds: 0.0,
            versions: Versions { gmfg: env!("CARGO_PKG_VERSION"), arch: std::env::consts::ARCH },
            outputs: Vec::new(),
            started: Some(Instant::now()),
        }
    }

    pub fn path(&self) -> PathBuf {
        self.output_dir.join(FILE_NAME)
    }

    pub fn write(&mut self) -> std::io::Result<()> {
        if let Some(s) = self.started {
            self.wall_clock_seconds = s.elapsed().as_secs_f64();
        }
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(self.path(), text + "\n")
    }

    pub fn record(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn finish(&mut self, result: Result<(), String>) -> std::io::Result<()> {
        match result {
            Ok(()) => self.status = Status::Complete,
            Err(e) => {
                self.status = Status::Failed;
                self.error = Some(e);
            }
        }
        self.write()
    }
}
