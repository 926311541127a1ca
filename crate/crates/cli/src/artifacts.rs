use std::io::Write;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Resolved;

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    config: &'a crate::config::ExperimentConfig,
    files: &'a [FileEntry],
    result: &'a T,
}

/// Writes the artifacts of one command. Text artifacts carry the config
/// hash and seed; binary ones are listed with their digests in the JSON
/// summary. Timestamps only go to `run.log`.
pub struct Artifacts<'a> {
    run: &'a Resolved,
    command: &'static str,
    files: Vec<FileEntry>,
}

impl<'a> Artifacts<'a> {
    pub fn new(run: &'a Resolved, command: &'static str) -> Result<Self> {
        std::fs::create_dir_all(&run.out)
            .with_context(|| format!("creating output directory {}", run.out.display()))?;
        Ok(Self {
            run,
            command,
            files: Vec::new(),
        })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.run.path(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn stamp(&self) -> String {
        format!("config_hash={} seed={}", self.run.hash, self.run.seed())
    }

    pub fn binary(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        self.write(name, bytes)
    }

    pub fn csv(&self, name: &str, body: &str) -> Result<PathBuf> {
        self.write(name, format!("# {}\n{body}", self.stamp()).as_bytes())
    }

    pub fn markdown(&self, name: &str, body: &str) -> Result<PathBuf> {
        self.write(name, format!("<!-- {} -->\n{body}", self.stamp()).as_bytes())
    }

    /// The command summary; call last so it lists every binary file.
    pub fn summary<T: Serialize>(&self, result: &T) -> Result<PathBuf> {
        let env = Envelope {
            command: self.command,
            config_hash: &self.run.hash,
            seed: self.run.seed(),
            config: &self.run.config,
            files: &self.files,
            result,
        };
        let text = serde_json::to_string_pretty(&env)? + "\n";
        self.write(&format!("{}.json", self.command), text.as_bytes())
    }

    pub fn log(&self, message: &str) -> Result<()> {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.run.path("run.log"))?;
        writeln!(f, "{secs} {} {} {message}", self.command, self.stamp())?;
        Ok(())
    }
}
