//! Experiment records: JSON summary plus one CSV per table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{digest, ExperimentConfig};
use crate::LabError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, LabError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.into_inner().map_err(|e| LabError::Io(e.into_error()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    /// The property being checked, in words.
    pub property: String,
    pub passed: bool,
    pub detail: String,
}

impl Assertion {
    pub fn new(name: &str, property: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), property: property.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Diverged,
    Error,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Self::Pass => 0,
            Self::Fail | Self::Error => 2,
            Self::Diverged => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFile {
    pub name: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub format_version: u32,
    pub code_version: String,
    pub experiment: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_s: f64,
    pub crystal_cache_hit: bool,
    pub metrics: BTreeMap<String, f64>,
    pub assertions: Vec<Assertion>,
    pub tables: Vec<TableFile>,
    #[serde(skip)]
    pub table_data: Vec<Table>,
}

impl ExperimentRecord {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.table_data.iter().find(|t| t.name == name)
    }

    /// Writes `record.json` and the CSV tables into `dir`; fills in the table digests.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf, LabError> {
        fs::create_dir_all(dir)?;
        self.tables.clear();
        for t in &self.table_data {
            let bytes = t.to_csv()?;
            let file = format!("{}.csv", t.name);
            fs::write(dir.join(&file), &bytes)?;
            self.tables.push(TableFile { name: t.name.clone(), file, sha256: digest(&bytes) });
        }
        let path = dir.join("record.json");
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, LabError> {
        let text = fs::read_to_string(path)?;
        let rec: Self = serde_json::from_str(&text)?;
        if rec.format_version != FORMAT_VERSION {
            return Err(LabError::Config(format!("unsupported record format {}", rec.format_version)));
        }
        Ok(rec)
    }
}

/// Outcome of checking a written record against its files and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub config_hash_ok: bool,
    /// (file, matches)
    pub tables: Vec<(String, bool)>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.config_hash_ok && self.tables.iter().all(|t| t.1)
    }
}

/// Recomputes the configuration hash and the CSV digests of a record on disk.
pub fn verify(path: &Path) -> Result<Verification, LabError> {
    let rec = ExperimentRecord::read(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let tables = rec
        .tables
        .iter()
        .map(|t| {
            let ok = fs::read(dir.join(&t.file)).map(|b| digest(&b) == t.sha256).unwrap_or(false);
            (t.file.clone(), ok)
        })
        .collect();
    Ok(Verification { config_hash_ok: rec.config.hash() == rec.config_hash, tables })
}
