//! `manifest.txt`: what a run was asked to do, written before it starts.
//!
//! The resolved settings are plain `key = value` lines and everything else is
//! a `#` comment, so a training manifest doubles as a config file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::exit::{CliError, OUTPUT_DIR};

pub const FILE: &str = "manifest.txt";

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub settings: Vec<(String, String)>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, out_dir: &Path) -> Self {
        Self {
            command: command.into(),
            settings: Vec::new(),
            seed,
            out_dir: out_dir.to_path_buf(),
            checkpoint: None,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.settings.push((key.into(), value.to_string()));
    }

    pub fn render(&self, started: u64) -> String {
        let mut s = String::new();
        writeln!(s, "# command = {}", self.command).unwrap();
        writeln!(s, "# started_unix = {started}").unwrap();
        writeln!(s, "# seed = {}", self.seed).unwrap();
        writeln!(s, "# out_dir = {}", self.out_dir.display()).unwrap();
        if let Some(ck) = &self.checkpoint {
            writeln!(s, "# checkpoint = {}", ck.display()).unwrap();
        }
        for (k, v) in &self.settings {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Creates the output directory and writes the manifest into it.
    pub fn write(&self) -> Result<(), CliError> {
        let unwritable = |e: std::io::Error| {
            CliError::new(OUTPUT_DIR, format!("cannot write to {}: {e}", self.out_dir.display()))
        };
        fs::create_dir_all(&self.out_dir).map_err(unwritable)?;
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        fs::write(self.out_dir.join(FILE), self.render(started)).map_err(unwritable)
    }
}

/// Writes `contents` to `dir/name`, classifying failures as output errors.
pub fn write_output(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::new(OUTPUT_DIR, format!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendered_manifest_parses_as_config() {
        let mut m = RunManifest::new("train", 3, Path::new("runs/a"));
        m.set("alpha", 0.2);
        m.set("dataset", "stripes");
        m.checkpoint = Some("runs/a/final.mfx".into());
        let text = m.render(0);
        let entries = maskfix::kv::parse(&text).unwrap();
        let keys: Vec<&str> = entries.iter().map(|e| e.key.as_str()).collect();
        assert_eq!(keys, ["alpha", "dataset"]);
        assert!(text.starts_with("# command = train\n"));
    }
}
