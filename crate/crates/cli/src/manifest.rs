//! Per-invocation provenance record, written before any work starts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha1::{Digest, Sha1};

use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input file → git blob hash. Directories are expanded to their files.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
}

/// `sha1("blob <len>\0" ‖ bytes)`, as `git hash-object` prints it.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn collect(path: &Path, out: &mut BTreeMap<String, String>) -> CliResult {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect(&e, out)?;
        }
    } else {
        out.insert(path.display().to_string(), git_blob_hash(&fs::read(path)?));
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &str, config: impl Serialize, seed: Option<u64>) -> CliResult<Self> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    /// Hashes `path` (recursively for directories). Missing paths are
    /// skipped; the command itself reports them.
    pub fn input(mut self, path: &Path) -> CliResult<Self> {
        if path.exists() {
            collect(path, &mut self.inputs)?;
        }
        Ok(self)
    }

    pub fn output(mut self, path: impl Into<PathBuf>) -> Self {
        self.outputs.push(path.into());
        self
    }

    /// Writes `<dir>/run_manifest.json`, creating `dir`.
    pub fn write(&self, dir: &Path) -> CliResult {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin`, then the same for ''.
        assert_eq!(git_blob_hash(b"hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
        assert_eq!(git_blob_hash(b""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    }

    #[test]
    fn directories_expand_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("b.txt"), "b").unwrap();
        fs::write(dir.path().join("sub/a.txt"), "a").unwrap();
        let m = RunManifest::new("x", (), None).unwrap().input(dir.path()).unwrap();
        assert_eq!(m.inputs.len(), 2);
        assert!(m.inputs.keys().any(|k| k.ends_with("sub/a.txt")));
        assert_eq!(m.inputs.values().next().unwrap(), &git_blob_hash(b"b"));
    }
}
