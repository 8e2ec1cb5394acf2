//! Artifact files and the run manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub status: String,
    pub files: Vec<FileEntry>,
    pub stages: Vec<Stage>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub oracles: Vec<OracleStatus>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleStatus {
    pub id: String,
    pub passed: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Collects the files of one run and their stage timings.
pub struct RunOutput {
    dir: PathBuf,
    pub files: Vec<FileEntry>,
    pub stages: Vec<Stage>,
}

impl RunOutput {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            stages: Vec::new(),
        })
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Renders a file with `f` into memory and writes it.
    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> bsvie_core::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn write_report(&mut self, name: &str, report: &impl Serialize) -> Result<(), CliError> {
        let text = toml::to_string(report).map_err(|e| CliError::Internal(e.to_string()))?;
        self.write_bytes(name, text.as_bytes())
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.stages.push(Stage {
            name: name.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<(), CliError> {
        let text = toml::to_string(manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(self.dir.join("manifest.toml"), text)?;
        Ok(())
    }
}

/// A gnuplot script plotting `columns` of `csv` against its first column
/// on log-log axes.
pub fn gnuplot_script(csv: &str, skip: usize, x: &str, columns: &[(usize, &str)]) -> String {
    let mut s = format!(
        "set datafile separator ','\nset logscale xy\nset xlabel '{x}'\nset key left top\nplot "
    );
    let plots: Vec<String> = columns
        .iter()
        .map(|(c, t)| format!("'{csv}' skip {skip} using 1:{c} with linespoints title '{t}'"))
        .collect();
    s.push_str(&plots.join(", \\\n     "));
    s.push('\n');
    s
}
