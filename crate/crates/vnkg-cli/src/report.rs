//! Every subcommand leaves a `report.json` behind: the effective config, the
//! seeds that went in, wall time, and where the outputs landed. A run is
//! reproducible from its report alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use crate::CliError;

pub struct Report {
    command: &'static str,
    started: Instant,
    started_unix: u64,
    pub outputs: BTreeMap<String, String>,
}

impl Report {
    pub fn start(command: &'static str) -> Report {
        Report {
            command,
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: BTreeMap::new(),
        }
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.display().to_string());
    }

    /// Write the report into `out_dir` and return its path.
    pub fn finish(
        mut self,
        out_dir: &Path,
        config: Value,
        body: Value,
    ) -> Result<PathBuf, CliError> {
        let path = out_dir.join("report.json");
        let mut doc = json!({
            "command": self.command,
            "started_unix": self.started_unix,
            "wall_seconds": self.started.elapsed().as_secs_f64(),
            "config": config,
        });
        let map = doc.as_object_mut().unwrap();
        if !self.outputs.is_empty() {
            self.outputs
                .insert("report".to_string(), path.display().to_string());
            map.insert("outputs".into(), json!(self.outputs));
        }
        if let Value::Object(extra) = body {
            for (k, v) in extra {
                map.insert(k, v);
            }
        }
        write_json(&path, &doc)?;
        Ok(path)
    }
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("encoding {}: {e}", path.display())))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}
