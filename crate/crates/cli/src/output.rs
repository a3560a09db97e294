//! Run artifacts: verdict lines, the manifest, CSV files.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use martinv_core::verify::StatReport;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] martinv_core::error::Error),

    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// One pass/fail line.
#[derive(Debug, Clone, Serialize)]
pub struct VerdictLine {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl VerdictLine {
    /// Passes when `value <= threshold`.
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass: value <= threshold, value, threshold, detail: detail.into() }
    }

    pub fn flag(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), pass, value: pass as u8 as f64, threshold: 1.0, detail: detail.into() }
    }

    pub fn failed_stage(stage: &str, err: &CliError) -> Self {
        Self::flag(format!("stage {stage}"), false, err.to_string())
    }
}

impl From<&StatReport> for VerdictLine {
    fn from(r: &StatReport) -> Self {
        let hw = r.half_width.map(|h| format!(", half-width {h:.3e}")).unwrap_or_default();
        Self {
            name: r.name.clone(),
            pass: r.pass,
            value: r.value,
            threshold: r.threshold,
            detail: format!("n = {}{hw}; {}", r.n, r.detail),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub martinv: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub scenario: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub versions: Versions,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    pub verdicts: Vec<VerdictLine>,
    pub pass: bool,
}

/// Collects files and verdicts for one scenario.
pub struct Run {
    scenario: String,
    dir: PathBuf,
    seed: u64,
    started: Instant,
    outputs: Vec<String>,
    pub verdicts: Vec<VerdictLine>,
}

impl Run {
    pub fn new(scenario: &str, dir: &Path, seed: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        Ok(Self {
            scenario: scenario.into(),
            dir: dir.to_path_buf(),
            seed,
            started: Instant::now(),
            outputs: Vec::new(),
            verdicts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn push(&mut self, v: VerdictLine) {
        self.verdicts.push(v);
    }

    pub fn stat(&mut self, r: &StatReport) {
        self.verdicts.push(r.into());
    }

    /// Runs a stage, recording a failed verdict instead of propagating its error.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Option<T> {
        match f(self) {
            Ok(v) => Some(v),
            Err(e) => {
                self.verdicts.push(VerdictLine::failed_stage(name, &e));
                None
            }
        }
    }

    /// Writes a CSV with a header row; floats use the shortest round-trip form.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|source| CliError::Io { path, source })?;
        self.outputs.push(name.into());
        Ok(())
    }

    /// Writes a CSV of serialisable records.
    pub fn records<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|source| CliError::Io { path, source })?;
        self.outputs.push(name.into());
        Ok(())
    }

    /// Creates an output file for a caller-supplied writer.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|source| CliError::Io { path, source })?;
        self.outputs.push(name.into());
        Ok(BufWriter::new(f))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        let s = serde_json::to_string_pretty(value)?;
        fs::write(&path, s).map_err(|source| CliError::Io { path, source })?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn pass(&self) -> bool {
        !self.verdicts.is_empty() && self.verdicts.iter().all(|v| v.pass)
    }

    /// Writes `verdicts.csv` and `manifest.json`.
    pub fn finish(mut self, config: serde_json::Value) -> Result<RunManifest> {
        let verdicts = self.verdicts.clone();
        self.records("verdicts.csv", &verdicts)?;
        let mut outputs = self.outputs.clone();
        outputs.push("manifest.json".into());
        let manifest = RunManifest {
            scenario: self.scenario.clone(),
            config,
            seed: self.seed,
            versions: Versions { martinv: env!("CARGO_PKG_VERSION") },
            outputs,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
            pass: self.pass(),
            verdicts,
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|source| CliError::Io { path, source })?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_existing_nonempty_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new("t", dir.path(), 1).unwrap();
        run.csv("a.csv", &["x", "y"], vec![vec![1.0, 0.1]]).unwrap();
        run.push(VerdictLine::at_most("v", 1.0, 2.0, ""));
        assert!(run.stage("boom", |_| -> Result<()> { Err(CliError::Config("no".into())) }).is_none());
        let m = run.finish(serde_json::json!({})).unwrap();
        assert!(!m.pass);
        for f in &m.outputs {
            assert!(fs::metadata(dir.path().join(f)).unwrap().len() > 0, "{f}");
        }
        let text = fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert_eq!(text, "x,y\n1,0.1\n");
    }
}
