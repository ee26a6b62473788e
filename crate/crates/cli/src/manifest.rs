//! Output directory bookkeeping and `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError};
use crate::plot::{render, PlotSpec, Table};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub kind: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub files: BTreeMap<String, FileEntry>,
    /// Wall-clock seconds per stage; the only non-reproducible field.
    pub timing: BTreeMap<String, f64>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

/// Writes files under one root and remembers their hashes.
pub struct Outputs {
    root: PathBuf,
    files: BTreeMap<String, FileEntry>,
    timing: BTreeMap<String, f64>,
    pub seeds: BTreeMap<String, u64>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

impl Outputs {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
            timing: BTreeMap::new(),
            seeds: BTreeMap::new(),
            summary: BTreeMap::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(&p, bytes).map_err(io_err(&p))?;
        self.files.insert(rel.to_string(), FileEntry { sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    /// Records a file some other writer already produced.
    pub fn record(&mut self, rel: &str) -> Result<(), CliError> {
        let p = self.path(rel);
        let bytes = std::fs::read(&p).map_err(io_err(&p))?;
        self.files.insert(rel.to_string(), FileEntry { sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn write_table(&mut self, rel: &str, table: &Table) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&table.headers)?;
        for r in &table.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Plot(e.to_string()))?;
        self.write(rel, &bytes)
    }

    pub fn write_plot(&mut self, rel: &str, table: &Table, spec: &PlotSpec) -> Result<(), CliError> {
        let svg = render(table, spec)?;
        self.write(rel, svg.as_bytes())
    }

    /// Runs `f` and records its duration under `stage`.
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let start = Instant::now();
        log::info!("{stage}: started");
        let out = f(self)?;
        let secs = start.elapsed().as_secs_f64();
        log::info!("{stage}: done in {secs:.1} s");
        *self.timing.entry(stage.to_string()).or_default() += secs;
        Ok(out)
    }

    pub fn files(&self) -> &BTreeMap<String, FileEntry> {
        &self.files
    }

    pub fn finish(self, kind: &str, config_source: &[u8]) -> Result<Manifest, CliError> {
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            core_version: spectral_guidance::VERSION,
            kind: kind.to_string(),
            config_sha256: sha256_hex(config_source),
            seeds: self.seeds,
            files: self.files,
            timing: self.timing,
            summary: self.summary,
        };
        let p = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Plot(e.to_string()))?;
        std::fs::write(&p, text + "\n").map_err(io_err(&p))?;
        Ok(manifest)
    }
}
