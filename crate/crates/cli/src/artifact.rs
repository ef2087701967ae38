//! Run-artifact layout: every subcommand that produces outputs writes them
//! into its own directory under the configured output root, stamps a
//! `MANIFEST.json` (file checksums plus a combined content hash) as the final
//! step, and appends one line to `<output_root>/index.jsonl` so runs can be
//! enumerated without scanning directories.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bdlab_core::error::{Error, Result};

/// Default artifact name when `--name` is not given.
pub fn run_name(explicit: Option<&str>, command: &str, seed: u64) -> String {
    match explicit {
        Some(name) => name.to_string(),
        None => format!("{command}-seed{seed}"),
    }
}

/// Create `<output_root>/<name>`. An existing non-empty directory is refused
/// unless `force` is set, in which case it is replaced wholesale.
pub fn create_run_dir(output_root: &Path, name: &str, force: bool) -> Result<PathBuf> {
    let dir = output_root.join(name);
    if dir.exists() {
        let occupied = fs::read_dir(&dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "artifact directory {} already exists; pass --force to replace it or --name to pick another",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Serialize `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::FileFormat {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(Error::Json)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub command: String,
    pub code_version: String,
    pub files: Vec<FileEntry>,
    /// Digest over the sorted `path:sha256` lines — one value that pins the
    /// whole artifact.
    pub content_hash: String,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Checksum every file in the run directory and write `MANIFEST.json`. Call
/// this last: the manifest covers everything already present and a partial
/// run is recognizable by its absence.
pub fn write_manifest(dir: &Path, run_id: &str, command: &str) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect_files(dir, dir, &mut paths)?;
    let mut files = Vec::new();
    for path in paths {
        let rel = path
            .strip_prefix(dir)
            .expect("collected under dir")
            .to_string_lossy()
            .replace('\\', "/");
        if rel == "MANIFEST.json" {
            continue;
        }
        let bytes = fs::read(&path)?;
        files.push(FileEntry {
            path: rel,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let mut combined = String::new();
    for f in &files {
        combined.push_str(&f.path);
        combined.push(':');
        combined.push_str(&f.sha256);
        combined.push('\n');
    }
    let manifest = Manifest {
        run_id: run_id.to_string(),
        command: command.to_string(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        files,
        content_hash: sha256_hex(combined.as_bytes()),
    };
    write_json(&dir.join("MANIFEST.json"), &manifest)?;
    Ok(manifest)
}

/// One line of `<output_root>/index.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct IndexRecord {
    pub run_id: String,
    pub command: String,
    /// "ok" or "failed".
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr_known: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr_unknown: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl IndexRecord {
    pub fn ok(run_id: &str, command: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            command: command.to_string(),
            status: "ok".into(),
            acc: None,
            asr_known: None,
            asr_unknown: None,
            error: None,
        }
    }

    pub fn failed(run_id: &str, command: &str, error: &Error) -> Self {
        Self {
            run_id: run_id.to_string(),
            command: command.to_string(),
            status: "failed".into(),
            acc: None,
            asr_known: None,
            asr_unknown: None,
            error: Some(error.to_string()),
        }
    }
}

/// Append one JSON line to `<output_root>/index.jsonl`.
pub fn append_index(output_root: &Path, record: &IndexRecord) -> Result<()> {
    fs::create_dir_all(output_root)?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(output_root.join("index.jsonl"))?;
    file.write_all(line.as_bytes())?;
    Ok(())
}
