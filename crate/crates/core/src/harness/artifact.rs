//! Run artifacts: the files a run directory contains and their formats.
//!
//! Every format is plain text with a fixed field order so byte-identical
//! reruns are meaningful:
//! - `trace.csv`: header line, then one comma-separated row per step.
//! - `policy.txt`: `pbkd-policy-v1`, metadata lines, then one weight per line.
//! - `reward.txt`: `pbkd-params-v1`, metadata lines, then one value per line.
//! - `manifest.json` / `config.json`: pretty-printed JSON with a trailing
//!   newline.
//!
//! Numbers are written with the shortest representation that round-trips,
//! and the writers refuse non-finite values instead of persisting them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::SoftmaxLinearPolicy;

/// Schema id of `manifest.json`.
pub const MANIFEST_SCHEMA: &str = "pbkd-manifest-v1";

/// Columnar trace with a fixed header order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    pub headers: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl TraceTable {
    pub fn new(headers: Vec<&'static str>) -> Self {
        Self {
            headers,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.headers.len() {
            return Err(Error::DimensionMismatch(format!(
                "trace row has {} cells, header has {}",
                row.len(),
                self.headers.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Renders the whole table, rejecting any non-finite cell before a
    /// single byte is written.
    pub fn render(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&self.headers.join(","));
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.headers.len() {
                return Err(Error::DimensionMismatch(format!(
                    "trace row {i} has {} cells, header has {}",
                    row.len(),
                    self.headers.len()
                )));
            }
            for (j, cell) in row.iter().enumerate() {
                if !cell.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "trace cell {} at row {i}",
                        self.headers[j]
                    )));
                }
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{cell}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Learned parameter vector persisted as `reward.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    /// `reward` for adversarial or fitted reward weights, `q-linear` for a
    /// moment-matching Q-function.
    pub kind: &'static str,
    pub bound: f64,
    pub values: Vec<f64>,
}

impl ParamBlock {
    pub fn render(&self) -> Result<String> {
        if !self.bound.is_finite() {
            return Err(Error::NonFinite("param bound".into()));
        }
        let mut out = format!(
            "pbkd-params-v1\nkind {}\nbound {}\ndim {}\n",
            self.kind,
            self.bound,
            self.values.len()
        );
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("param value {i}")));
            }
            out.push_str(&format!("{v}\n"));
        }
        Ok(out)
    }
}

/// Serializes a softmax-linear policy as `policy.txt`.
pub fn render_policy(policy: &SoftmaxLinearPolicy) -> Result<String> {
    let mut out = format!(
        "pbkd-policy-v1\nkind softmax-linear\ncontext_len {}\ntemperature {}\nparams {}\n",
        policy.context_len(),
        policy.temperature(),
        policy.param_len()
    );
    for (i, w) in policy.weights().iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("policy weight {i}")));
        }
        out.push_str(&format!("{w}\n"));
    }
    Ok(out)
}

/// Environment and identity record persisted next to every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub tool_version: String,
    pub algorithm: String,
    pub label: String,
    pub master_seed: u64,
    /// Task and algorithm identity shared across seeds.
    pub config_hash: String,
    /// Run identity: `config_hash` plus the master seed.
    pub run_id: String,
    pub mdp_fingerprint: String,
    pub rstar_fingerprint: String,
    pub final_metrics: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Parse(format!("{e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads the manifest of a run directory.
pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("manifest {}: {e}", path.display())))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(Error::Parse(format!(
            "manifest {}: schema {:?}, expected {MANIFEST_SCHEMA:?}",
            path.display(),
            manifest.schema
        )));
    }
    Ok(manifest)
}

/// A loaded run directory.
#[derive(Debug, Clone)]
pub struct RunHandle {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

pub fn load_run(dir: &Path) -> Result<RunHandle> {
    Ok(RunHandle {
        dir: dir.to_path_buf(),
        manifest: load_manifest(dir)?,
    })
}
