use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub sharelens_cli: &'static str,
    pub sharelens: &'static str,
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub subcommand: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub config_sha256: String,
    pub versions: Versions,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub wall_time_secs: f64,
}

/// A fresh output directory for one invocation. Every file written through
/// it is hashed into the manifest.
pub struct Run {
    pub dir: PathBuf,
    subcommand: String,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

impl Run {
    /// Creates `<root>/<subcommand>-NNNN`, never reusing an existing name.
    pub fn create(root: &Path, subcommand: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root.display(), e))?;
        let prefix = format!("{subcommand}-");
        let mut next = std::fs::read_dir(root)
            .map_err(|e| CliError::io(root.display(), e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_prefix(&prefix)?.parse::<u32>().ok())
            .max()
            .map_or(1, |n| n + 1);
        loop {
            let dir = root.join(format!("{prefix}{next:04}"));
            match std::fs::create_dir(&dir) {
                Ok(()) => {
                    return Ok(Self {
                        dir,
                        subcommand: subcommand.to_string(),
                        started: Instant::now(),
                        inputs: Vec::new(),
                        outputs: Vec::new(),
                    })
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => next += 1,
                Err(e) => return Err(CliError::io(dir.display(), e)),
            }
        }
    }

    pub fn input(&mut self, path: &Path) {
        if !self.inputs.iter().any(|p| p == path) {
            self.inputs.push(path.to_path_buf());
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(path.display(), e))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Runtime(format!("serializing {name}: {e}")))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes through a closure that fills a byte buffer.
    pub fn write_with(
        &mut self,
        name: &str,
        fill: impl FnOnce(&mut Vec<u8>) -> sharelens::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        fill(&mut buf).map_err(|e| CliError::from_core(name, e))?;
        self.write(name, &buf)
    }

    /// Marks a file created by someone else inside the run directory.
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn finish(self, config: &PipelineConfig, threads: usize) -> Result<PathBuf, CliError> {
        let entry = |path: &Path, label: String| -> Result<FileEntry, CliError> {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path.display(), e))?;
            Ok(FileEntry {
                path: label,
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        };
        let inputs = self
            .inputs
            .iter()
            .map(|p| entry(p, p.display().to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut names = self.outputs.clone();
        names.sort();
        let outputs = names
            .iter()
            .map(|n| entry(&self.path(n), n.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let config_json = serde_json::to_vec(config).map_err(|e| CliError::Runtime(format!("config hash: {e}")))?;
        let manifest = Manifest {
            subcommand: &self.subcommand,
            seed: config.seed,
            threads,
            config_sha256: sha256_hex(&config_json),
            versions: Versions {
                sharelens_cli: env!("CARGO_PKG_VERSION"),
                sharelens: sharelens::VERSION,
            },
            inputs,
            outputs,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
        let path = self.path("manifest.json");
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(path.display(), e))?;
        Ok(self.dir)
    }
}
