//! Artifact writing and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliResult;

pub const MANIFEST: &str = "manifest.json";

/// Shortest decimal form that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes files into one output directory and remembers every name.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> CliResult<()>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for row in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        self.declare(name);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.dir.join(name), text)?;
        self.declare(name);
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> CliResult<()> {
        fs::write(self.dir.join(name), body)?;
        self.declare(name);
        Ok(())
    }

    fn declare(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub versions: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Latest run of each subcommand.
    pub runs: BTreeMap<String, RunRecord>,
    /// Union of the files declared by all runs.
    pub files: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path)?;
        match serde_json::from_str(&text) {
            Ok(m) => Ok(m),
            Err(_) => Ok(Self::default()),
        }
    }

    /// Records `run` under `name` and writes the manifest back.
    pub fn record(dir: &Path, name: &str, run: RunRecord) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        let mut m = Self::load(dir)?;
        m.runs.insert(name.to_string(), run);
        let mut files: Vec<String> = m.runs.values().flat_map(|r| r.files.iter().cloned()).collect();
        files.sort();
        files.dedup();
        m.files = files;
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("molrmog-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("molrmog-core".to_string(), molrmog_core::VERSION.to_string()),
    ])
}

/// Reads a JSON artifact if present.
pub fn read_json(dir: &Path, name: &str) -> CliResult<Option<Value>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}
