//! Output files of one command: atomic writes, a shared header, and
//! removal of everything written so far if the command fails.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use xwf_core::io::atomic_write;
use xwf_core::Result;

use crate::config::RunConfig;

pub struct Artifacts {
    dir: PathBuf,
    command: String,
    hash: String,
    seed: Option<u64>,
    config: Value,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Artifacts {
            dir: config.out.clone(),
            command: command.to_string(),
            hash: config.hash(),
            seed: config.seed,
            config: serde_json::to_value(config).expect("config serializes"),
            written: Vec::new(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Comment line embedded at the top of every CSV.
    pub fn header(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!("xwf {} config_sha256={} seed={}", self.command, self.hash, seed)
    }

    pub fn csv<F>(&mut self, name: &str, write: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write, Option<&str>) -> Result<()>,
    {
        let path = self.dir.join(name);
        let header = self.header();
        self.written.push(path.clone());
        atomic_write(&path, |out| write(out, Some(&header)))
    }

    /// JSON document wrapping `body` with the command, config, hash and seed.
    pub fn json<T: Serialize>(&mut self, name: &str, body: &T) -> Result<()> {
        let doc = json!({
            "command": self.command,
            "config_sha256": self.hash,
            "seed": self.seed,
            "config": self.config,
            "result": body,
        });
        let path = self.dir.join(name);
        self.written.push(path.clone());
        atomic_write(&path, |out| {
            serde_json::to_writer_pretty(&mut *out, &doc)?;
            writeln!(out)?;
            Ok(())
        })
    }

    /// Deletes the files this command has written.
    pub fn discard(self) {
        for p in self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discard_removes_written_files_and_header_names_seed() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            out: dir.path().to_path_buf(),
            seed: Some(5),
            ..RunConfig::default()
        };
        let mut a = Artifacts::new("fit-arv", &config);
        assert!(a.header().ends_with("seed=5"));
        a.csv("a.csv", |w, h| {
            xwf_core::io::write_comment(w, h)?;
            writeln!(w, "x")?;
            Ok(())
        })
        .unwrap();
        a.json("a.json", &[1, 2]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
        assert!(text.starts_with(&format!("# xwf fit-arv config_sha256={} seed=5\n", config.hash())));
        a.discard();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
