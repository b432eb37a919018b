//! Run directories and manifests.
//!
//! Every command writes into `runs/<name>/` with a fixed layout:
//!
//! ```text
//! runs/<name>/
//!     config.toml
//!     checkpoints/
//!     previews/
//!     metrics.json
//!     manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(runs_dir: impl AsRef<Path>, name: &str) -> Self {
        Self {
            root: runs_dir.as_ref().join(name),
        }
    }

    pub fn for_config(config: &Config) -> Self {
        Self::new(&config.output.runs_dir, &config.output.name)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, stem: &str) -> PathBuf {
        self.checkpoints().join(format!("{stem}.h4dc"))
    }

    pub fn previews(&self) -> PathBuf {
        self.root.join("previews")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn loss_csv(&self, stage: &str) -> PathBuf {
        self.root.join(format!("loss_{stage}.csv"))
    }

    /// Create the directory tree and write the config snapshot.
    pub fn create(&self, config: &Config) -> Result<()> {
        fs::create_dir_all(self.checkpoints())?;
        fs::create_dir_all(self.previews())?;
        fs::write(self.config(), config.to_toml()?)?;
        Ok(())
    }
}

/// Git blob id (`sha1("blob <len>\0" ‖ data)`) is the model; SHA-256 is
/// used for the digest.
pub fn blob_hash(data: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", data.len()).as_bytes());
    h.update(data);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Tree hash over every regular file under the given paths: sorted
/// `<blob hash> <input index>/<relative path>` lines hashed together. A path
/// that is a file contributes itself. Where the inputs live does not matter.
pub fn content_hash(paths: &[&Path]) -> Result<String> {
    let mut lines = Vec::new();
    for (i, root) in paths.iter().enumerate() {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            lines.push(format!("{} {i}/{}", blob_hash(&fs::read(&f)?), rel.display()));
        }
    }
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<_> = fs::read_dir(path)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        collect_files(&e.path(), out)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub input_hash: String,
    pub config: Config,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, layout: &RunLayout) -> Result<()> {
        fs::write(layout.manifest(), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("data");
        fs::create_dir_all(d.join("sub")).unwrap();
        fs::write(d.join("a.txt"), b"one").unwrap();
        fs::write(d.join("sub/b.txt"), b"two").unwrap();
        let h1 = content_hash(&[&d]).unwrap();
        assert_eq!(h1, content_hash(&[&d]).unwrap());
        fs::write(d.join("sub/b.txt"), b"three").unwrap();
        assert_ne!(h1, content_hash(&[&d]).unwrap());
        assert_eq!(blob_hash(b"").len(), 64);
    }

    #[test]
    fn layout_paths() {
        let l = RunLayout::new("runs", "x");
        assert_eq!(l.checkpoint("static"), PathBuf::from("runs/x/checkpoints/static.h4dc"));
        assert_eq!(l.metrics(), PathBuf::from("runs/x/metrics.json"));
    }
}
