use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::HarnessError;

/// Numeric table with one header row.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    /// Finished, but a convergence or verification flag is down.
    Flagged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub command: String,
    pub code_version: String,
    /// TOML echo of the configuration; parsing it reproduces the config.
    pub config: String,
    pub status: Status,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: BTreeMap<String, Value>,
    pub series: BTreeMap<String, Table>,
    pub warnings: Vec<String>,
    pub wall_seconds: f64,
    pub reference_mode: bool,
}

impl ResultManifest {
    pub fn new(command: &str, config: String) -> Self {
        Self {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config,
            status: Status::Ok,
            error: None,
            outputs: BTreeMap::new(),
            series: BTreeMap::new(),
            warnings: Vec::new(),
            wall_seconds: 0.0,
            reference_mode: false,
        }
    }

    pub fn output(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("outputs serialize");
        self.outputs.insert(key.into(), v);
    }

    pub fn flag(&mut self, why: impl Into<String>) {
        let why = why.into();
        log::warn!("{why}");
        if self.status == Status::Ok {
            self.status = Status::Flagged;
        }
        self.warnings.push(why);
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        if !self.warnings.contains(&msg) {
            self.warnings.push(msg);
        }
    }

    /// Zeroes every wall-clock field so that the manifest depends only on the
    /// configuration and seed.
    pub fn normalize(&mut self) {
        self.reference_mode = true;
        self.wall_seconds = 0.0;
        for v in self.outputs.values_mut() {
            zero_wall_times(v);
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Writes `manifest.json` and one CSV per series into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
        let mut written = Vec::new();
        let path = dir.join("manifest.json");
        std::fs::write(&path, self.to_json()).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        written.push(path);
        for name in self.series.keys() {
            if self.series[name].rows.is_empty() {
                continue;
            }
            let path = dir.join(format!("{name}.csv"));
            let csv = emit_plot_data(self, name)?;
            std::fs::write(&path, csv).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn zero_wall_times(v: &mut Value) {
    match v {
        Value::Object(map) => {
            for (k, x) in map.iter_mut() {
                if k.starts_with("wall") && x.is_number() {
                    *x = Value::from(0.0);
                } else {
                    zero_wall_times(x);
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(zero_wall_times),
        _ => {}
    }
}

/// Renders one series as CSV; a missing or empty series is not found.
pub fn emit_plot_data(manifest: &ResultManifest, which: &str) -> Result<String, HarnessError> {
    let table = manifest
        .series
        .get(which)
        .filter(|t| !t.rows.is_empty())
        .ok_or_else(|| HarnessError::NotFound(format!("series `{which}`")))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| HarnessError::Io(e.to_string());
    w.write_record(&table.columns).map_err(io)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
