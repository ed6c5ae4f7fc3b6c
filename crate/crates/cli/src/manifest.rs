//! Run manifests: the fully resolved configuration of one command, written
//! as a config file so that `--config manifest.txt` replays the run.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mssnet::config::ConfigMap;

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Sections a config file (or manifest) may contain.
pub const SECTIONS: &[&str] = &["net", "train", "data", "gen", "eval", "ablate", "input", "run"];

pub struct RunManifest {
    pub command: String,
    pub entries: ConfigMap,
    pub started: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, entries: ConfigMap) -> Self {
        Self {
            command: command.to_string(),
            entries,
            started: unix_now(),
        }
    }

    fn render(&self, finished: Option<u64>) -> String {
        let mut m = self.entries.clone();
        m.set("run.command", self.command.as_str());
        m.set("run.tool", env!("CARGO_PKG_NAME"));
        m.set("run.version", env!("CARGO_PKG_VERSION"));
        m.set("run.started", self.started.to_string());
        m.set("run.finished", finished.map(|f| f.to_string()).unwrap_or_else(|| "-".into()));
        format!("# mssnet run manifest; replay with `mssnet {} --config <this file>`\n{}", self.command, m.to_text())
    }

    /// Writes the manifest with an open end timestamp.
    pub fn write_start(&self, dir: &Path) -> Result<()> {
        self.write(dir, None)
    }

    pub fn write_end(&self, dir: &Path) -> Result<()> {
        self.write(dir, Some(unix_now()))
    }

    fn write(&self, dir: &Path, finished: Option<u64>) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.render(finished)).with_context(|| format!("writing {}", path.display()))
    }
}
