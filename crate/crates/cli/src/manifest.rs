//! Run manifest: resolved settings, wall times and digests of emitted files.

use std::path::{Path, PathBuf};
use std::time::Instant;

use acronym_circuit::report;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub wall_seconds: f64,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Settings,
    pub experiments: Vec<ExperimentRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::missing_or_io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunManifest {
    pub fn new(command: String, config: Settings) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            experiments: Vec::new(),
        }
    }

    /// Runs one experiment, timing it and hashing the files it reports.
    pub fn record<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce() -> Result<Vec<PathBuf>, CliError>,
    {
        log::info!("{name}: running");
        let start = Instant::now();
        let files = f()?;
        let wall_seconds = start.elapsed().as_secs_f64();
        let root = &self.config.output_dir;
        let outputs = files
            .iter()
            .map(|p| {
                Ok(OutputRecord {
                    path: p.strip_prefix(root).unwrap_or(p).to_path_buf(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_, CliError>>()?;
        log::info!("{name}: {} files in {wall_seconds:.1}s", files.len());
        self.experiments.push(ExperimentRecord {
            name: name.to_owned(),
            wall_seconds,
            outputs,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        report::write_json(path, self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
