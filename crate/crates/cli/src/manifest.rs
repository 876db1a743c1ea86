//! Run manifests: what a command read, what it wrote, and the content hash
//! of every file, so a rerun can be checked bit-for-bit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run's output root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| missing(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn missing(path: &Path, e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::MissingInput(path.display().to_string())
    } else {
        CliError::Io(e)
    }
}

/// Write via a temporary sibling and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".{}.tmp", path.file_name().unwrap().to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    // route through Value so object keys are emitted sorted
    let v = serde_json::to_value(value).map_err(|e| CliError::Format(e.to_string()))?;
    let mut out = serde_json::to_vec_pretty(&v).map_err(|e| CliError::Format(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Tracks the files a command touches inside one output root.
pub struct Recorder {
    root: PathBuf,
    command: String,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

impl Recorder {
    pub fn new(root: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(root.join(command))?;
        Ok(Self { root: root.to_path_buf(), command: command.into(), inputs: vec![], outputs: vec![] })
    }

    pub fn dir(&self) -> PathBuf {
        self.root.join(&self.command)
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }

    /// Write a file into this command's directory and record its hash.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir().join(name);
        write_atomic(&path, bytes)?;
        let sha256 = hex::encode(Sha256::digest(bytes));
        self.outputs.push(FileEntry { path: self.rel(&path), sha256 });
        Ok(path)
    }

    /// Read an upstream artifact, checking it against the producing
    /// command's manifest.
    pub fn read_input(&mut self, upstream: &str, name: &str) -> CliResult<Vec<u8>> {
        let path = self.root.join(upstream).join(name);
        let manifest = load_manifest(&self.root.join(upstream))?;
        let rel = self.rel(&path);
        let entry = manifest
            .outputs
            .iter()
            .find(|e| e.path == rel)
            .ok_or_else(|| CliError::StaleArtifact(format!("{rel} is not listed in the {upstream} manifest")))?;
        let bytes = fs::read(&path).map_err(|e| missing(&path, e))?;
        let sha256 = hex::encode(Sha256::digest(&bytes));
        if sha256 != entry.sha256 {
            return Err(CliError::StaleArtifact(format!("{rel} does not match its manifest hash")));
        }
        self.inputs.push(FileEntry { path: rel, sha256 });
        Ok(bytes)
    }

    pub fn finish(self, seed: u64, config: &impl Serialize) -> CliResult<RunManifest> {
        let mut outputs = self.outputs;
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            schema_version: MANIFEST_VERSION,
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: serde_json::to_value(config).map_err(|e| CliError::Format(e.to_string()))?,
            inputs: self.inputs,
            outputs,
        };
        write_atomic(&self.root.join(&self.command).join(MANIFEST_FILE), &to_json_bytes(&manifest)?)?;
        Ok(manifest)
    }
}

pub fn load_manifest(dir: &Path) -> CliResult<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| missing(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recorder_round_trip_and_stale_detection() {
        let tmp = tempfile::tempdir().unwrap();
        let mut up = Recorder::new(tmp.path(), "up").unwrap();
        up.write("a.txt", b"hello").unwrap();
        up.finish(1, &serde_json::json!({})).unwrap();

        let mut down = Recorder::new(tmp.path(), "down").unwrap();
        assert_eq!(down.read_input("up", "a.txt").unwrap(), b"hello");
        assert!(matches!(down.read_input("up", "b.txt"), Err(CliError::StaleArtifact(_))));

        fs::write(tmp.path().join("up/a.txt"), b"changed").unwrap();
        assert!(matches!(down.read_input("up", "a.txt"), Err(CliError::StaleArtifact(_))));
        assert!(matches!(down.read_input("missing", "a.txt"), Err(CliError::MissingInput(_))));
    }
}
