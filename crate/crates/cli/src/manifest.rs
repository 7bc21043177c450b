use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use gaussbox::projection::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub inputs: Vec<FileDigest>,
    pub seeds: BTreeMap<String, u64>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut f = File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn begin(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: None,
            inputs: Vec::new(),
            seeds: BTreeMap::new(),
            started_at: now(),
            finished_at: String::new(),
            outputs: Vec::new(),
        }
    }

    /// Inputs are digested up front, before anything is written.
    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn seed(&mut self, name: &str, v: u64) {
        self.seeds.insert(name.to_string(), v);
    }

    pub fn finish(mut self, outputs: &[PathBuf], path: &Path) -> gaussbox::Result<()> {
        self.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        self.finished_at = now();
        let mut json = serde_json::to_vec_pretty(&self).expect("manifest serializes");
        json.push(b'\n');
        write_atomic(path, &json)
    }
}

/// `<path>.manifest.json`
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
