//! Run manifest written next to the outputs of every CLI invocation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_path: String,
    pub config_hash: String,
    pub version: String,
    pub master_seed: u64,
    pub threads: usize,
    pub started: String,
    pub finished: Option<String>,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
    /// Named checks and whether they passed.
    pub checks: BTreeMap<String, bool>,
    pub summary: BTreeMap<String, serde_json::Value>,
    pub errors: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_path: &Path, config_hash: String, master_seed: u64, threads: usize) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.display().to_string(),
            config_hash,
            version: env!("CARGO_PKG_VERSION").into(),
            master_seed,
            threads,
            started: now(),
            finished: None,
            outputs: Vec::new(),
            checks: BTreeMap::new(),
            summary: BTreeMap::new(),
            errors: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.errors.is_empty() && self.checks.values().all(|&ok| ok)
    }

    pub fn check(&mut self, name: &str, ok: bool) {
        self.checks.insert(name.into(), ok);
    }

    pub fn record(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.summary.insert(key.into(), v);
    }

    /// Writes `contents` to `dir/name` atomically and lists it as an output.
    pub fn write_output(&mut self, dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
        let path = dir.join(name);
        write_atomic(&path, contents.as_bytes())?;
        self.outputs.push(name.into());
        Ok(path)
    }

    /// Stamps the finish time and writes `dir/manifest.json` atomically.
    pub fn finish(&mut self, dir: &Path) -> Result<PathBuf> {
        self.finished = Some(now());
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Write to a sibling temporary file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_no_leftovers() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new("simulate", Path::new("c.toml"), "ab".into(), 3, 1);
        m.write_output(dir.path(), "a.csv", "x\n1\n").unwrap();
        m.check("ok", true);
        m.record("n", 5);
        let p = m.finish(dir.path()).unwrap();
        let back: Manifest = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(back.passed());
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert!(names.iter().all(|n| !n.ends_with(".tmp")), "{names:?}");
    }
}
