//! Run ledger: one JSON record per training/evaluation run, stored as
//! individual files in a results directory so concurrent runs never
//! contend on a shared file. Reports and the energy accounting read the
//! directory back; re-running a finished configuration is detected by
//! run id + config hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    /// standalone | transfer | svr
    pub mode: String,
    /// rnn | cnn | svr
    pub arch: String,
    pub site: String,
    pub p: usize,
    pub dn: usize,
    pub seed: u64,
    pub config_hash: String,
    pub param_count: usize,
    pub trainable_param_count: usize,
    /// Freeze-mask bits over the last three parameterized layers
    /// (transfer runs only), e.g. "010".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub epochs_used: usize,
    pub wall_time_s: f64,
    pub mse: f64,
    pub per_output_mse: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persistence_mse: Option<f64>,
}

impl RunRecord {
    pub fn file_name(&self) -> String {
        format!("{}.json", self.run_id)
    }
}

/// Stable hash of any serializable configuration, used to detect config
/// drift when resuming.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).unwrap_or_default();
    format!("{:016x}", derive_seed(0xc0ff_ee00, &text))
}

pub fn save_record(dir: &Path, record: &RunRecord) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(record.file_name());
    fs::write(&path, serde_json::to_string_pretty(record)?)?;
    Ok(path)
}

/// Load every record in the directory, sorted by run id.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let record: RunRecord = serde_json::from_str(&fs::read_to_string(&path)?)?;
        out.push(record);
    }
    Ok(out)
}

/// A run already in the ledger with the same id and config hash can be
/// skipped on resume.
pub fn find(dir: &Path, run_id: &str) -> Result<Option<RunRecord>> {
    let path = dir.join(format!("{run_id}.json"));
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(&path)?)?))
}
