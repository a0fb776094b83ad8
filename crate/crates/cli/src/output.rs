//! Run artifacts: every file goes through a temp file in the target directory
//! and is renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::NamedTempFile;

use crate::config::CliError;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// What every `report.json` contains. Timing is kept out so reruns are byte-identical.
#[derive(Debug, Serialize)]
pub struct RunReport<C: Serialize, S: Serialize, M: Serialize> {
    pub schema_version: u32,
    pub version: &'static str,
    pub experiment: &'static str,
    pub seed: u64,
    pub config: C,
    pub summary: S,
    pub metrics: M,
}

impl<C: Serialize, S: Serialize, M: Serialize> RunReport<C, S, M> {
    pub fn new(experiment: &'static str, seed: u64, config: C, summary: S, metrics: M) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION"),
            experiment,
            seed,
            config,
            summary,
            metrics,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OutDir {
    path: PathBuf,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

impl OutDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(path).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let dest = self.path.join(name);
        let mut tmp = NamedTempFile::new_in(&self.path).map_err(|e| io_err(&self.path, e))?;
        tmp.write_all(bytes).map_err(|e| io_err(&dest, e))?;
        tmp.as_file().sync_all().map_err(|e| io_err(&dest, e))?;
        tmp.persist(&dest).map_err(|e| io_err(&dest, e))?;
        Ok(dest)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Run(e.to_string()))?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn write_csv<I>(&self, name: &str, header: &[&str], rows: I) -> Result<PathBuf, CliError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| CliError::Run(e.to_string()))?;
        for r in rows {
            w.write_record(&r).map_err(|e| CliError::Run(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Run(e.to_string()))?;
        self.write_bytes(name, &bytes)
    }
}

/// Shortest round-trip formatting, stable across runs.
pub fn num(v: f64) -> String {
    format!("{v}")
}
