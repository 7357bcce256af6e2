//! Single-writer output directory: one `summary.json` plus CSV detail files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::error::CliError;

pub type Summary = Map<String, Value>;

pub struct Output {
    dir: PathBuf,
    written: Vec<String>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Writes `name` with a header row and one record per item.
    pub fn csv<R: Serialize>(
        &mut self,
        name: &str,
        rows: impl IntoIterator<Item = R>,
    ) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        let mut any = false;
        for r in rows {
            w.serialize(r)?;
            any = true;
        }
        if !any {
            return Err(CliError::Config(format!("{name}: nothing to write")));
        }
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Writes `summary.json`: the flat `fields`, the resolved config and the
    /// list of CSV files.
    pub fn summary(
        mut self,
        command: &str,
        fields: Summary,
        config: &RunConfig,
    ) -> Result<PathBuf, CliError> {
        let mut top = Map::new();
        top.insert("command".into(), Value::from(command));
        for (k, v) in fields {
            top.insert(k, v);
        }
        top.insert("config".into(), serde_json::to_value(config)?);
        self.written.sort();
        top.insert("files".into(), serde_json::to_value(&self.written)?);
        let path = self.dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(&Value::Object(top))?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Builds a flat JSON object from `key => value` pairs.
#[macro_export]
macro_rules! fields {
    ($($k:expr => $v:expr),* $(,)?) => {{
        let mut m = serde_json::Map::new();
        $( m.insert($k.to_string(), serde_json::json!($v)); )*
        m
    }};
}
