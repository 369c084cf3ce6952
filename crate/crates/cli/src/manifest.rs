use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use moral_align_core::Result;
use serde::Serialize;

pub const FILE_NAME: &str = "run_manifest.json";

/// Written to the output directory after every run, successful or not.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: &'static str,
    pub seed: u64,
    /// Resolved configuration, `key -> value`.
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: String,
    /// `ok`, or the error message.
    pub status: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl RunManifest {
    pub fn start(command: &str, argv: Vec<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed: 0,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
            status: String::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn config(&mut self, entries: Vec<(&'static str, String)>) {
        self.config
            .extend(entries.into_iter().map(|(k, v)| (k.to_string(), v)));
    }

    pub fn finish(&mut self, status: String, dir: &Path) -> Result<()> {
        self.finished_at = now();
        self.status = status;
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(FILE_NAME), text + "\n")?;
        Ok(())
    }
}
