//! Append-only run manifests with SHA-256 digests of every input and output.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::stages::Stage;

pub const MANIFEST_FORMAT: &str = "dapt-manifest-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = file.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(hasher.finalize()),
        bytes,
    })
}

/// Every regular file under `dir`, sorted.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    pub stage: Stage,
    pub config: PipelineConfig,
    pub seeds: Vec<u64>,
    /// Absolute input paths.
    pub inputs: Vec<FileDigest>,
    /// Output paths relative to the run's output directory.
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub wall_seconds: f64,
    pub formats: BTreeMap<String, String>,
    /// Stage-specific facts such as perplexities or best seeds.
    pub notes: serde_json::Value,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if m.format != MANIFEST_FORMAT {
            anyhow::bail!("manifest {} has unsupported format {}", path.display(), m.format);
        }
        Ok(m)
    }

    /// Writes under `out/manifests/` with the next free sequence number;
    /// existing manifests are never overwritten.
    pub fn append(&self, out: &Path) -> Result<PathBuf> {
        let dir = out.join("manifests");
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = serde_json::to_string_pretty(self)? + "\n";
        let mut n = std::fs::read_dir(&dir)?.count() + 1;
        loop {
            let path = dir.join(format!("{n:04}-{}.json", self.command));
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(text.as_bytes())?;
                    return Ok(path);
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(e).with_context(|| format!("writing {}", path.display())),
            }
        }
    }
}

/// Differences between recorded and re-computed digests, keyed by path.
pub fn compare(recorded: &[FileDigest], fresh: &[FileDigest]) -> Vec<String> {
    let fresh: BTreeMap<&Path, &FileDigest> = fresh.iter().map(|d| (d.path.as_path(), d)).collect();
    let mut out = Vec::new();
    for r in recorded {
        match fresh.get(r.path.as_path()) {
            None => out.push(format!("{}: missing", r.path.display())),
            Some(f) if f.sha256 != r.sha256 => {
                out.push(format!("{}: sha256 {} != recorded {}", r.path.display(), f.sha256, r.sha256))
            }
            Some(_) => {}
        }
    }
    let recorded: BTreeMap<&Path, ()> = recorded.iter().map(|d| (d.path.as_path(), ())).collect();
    for path in fresh.keys() {
        if !recorded.contains_key(path) {
            out.push(format!("{}: not in manifest", path.display()));
        }
    }
    out
}
