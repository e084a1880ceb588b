//! Artifacts are collected in memory and written only after the pipeline finishes,
//! each through a temporary file and a rename.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Default)]
pub struct Report {
    artifacts: Vec<(String, Vec<u8>)>,
    pub residuals: BTreeMap<String, f64>,
    pub results: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
    pub stages: Vec<(String, f64)>,
}

impl Report {
    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<(), CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(csv_err)?;
        for row in rows {
            // `{:?}` keeps the shortest round-trip representation
            w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
        self.artifacts.push((name.to_string(), bytes));
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Io(e.into()))?;
        bytes.push(b'\n');
        self.artifacts.push((name.to_string(), bytes));
        Ok(())
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.to_string(), pass, detail: detail.into() });
    }

    pub fn result(&mut self, name: &str, value: impl Serialize) {
        self.results.insert(name.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn residual(&mut self, name: &str, value: f64) {
        self.residuals.insert(name.to_string(), value);
    }

    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        self.stages.push((stage.to_string(), start.elapsed().as_secs_f64()));
        out
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn artifact_names(&self) -> Vec<String> {
        self.artifacts.iter().map(|a| a.0.clone()).collect()
    }

    /// Writes every artifact, then `timings.json`, then `manifest.json` last.
    pub fn write(&self, dir: &Path, manifest: &Value) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.artifacts {
            write_atomic(&dir.join(name), bytes)?;
        }
        let timings: BTreeMap<&str, f64> = self.stages.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        let mut t = serde_json::to_vec_pretty(&timings).map_err(|e| CliError::Io(e.into()))?;
        t.push(b'\n');
        write_atomic(&dir.join("timings.json"), &t)?;
        let mut m = serde_json::to_vec_pretty(manifest).map_err(|e| CliError::Io(e.into()))?;
        m.push(b'\n');
        write_atomic(&dir.join("manifest.json"), &m)
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e.to_string()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = PathBuf::from(path);
    tmp.set_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
