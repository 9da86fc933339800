//! Run manifests: what produced an output file.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input path -> SHA-256 of its bytes.
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> io::Result<String> {
    Ok(digest_bytes(&fs::read(path)?))
}

/// `out.jsonl` -> `out.jsonl.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

impl Manifest {
    pub fn new(command: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Manifest {
            command: command.into(),
            config_hash: config_hash.into(),
            seeds: BTreeMap::new(),
            input_digests: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> io::Result<()> {
        self.input_digests
            .insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    /// Writes the manifest beside the first output.
    pub fn write(&self) -> io::Result<PathBuf> {
        let first = self
            .outputs
            .first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "manifest has no outputs"))?;
        let path = manifest_path(Path::new(first));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("in.txt");
        fs::write(&p, "a").unwrap();
        let d1 = file_digest(&p).unwrap();
        fs::write(&p, "a").unwrap();
        assert_eq!(d1, file_digest(&p).unwrap());
        fs::write(&p, "b").unwrap();
        assert_ne!(d1, file_digest(&p).unwrap());
    }

    #[test]
    fn manifest_sits_beside_output() {
        assert_eq!(
            manifest_path(Path::new("/w/report.json")),
            PathBuf::from("/w/report.json.manifest.json")
        );
    }
}
