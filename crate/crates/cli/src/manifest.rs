//! Reproducibility manifests: the resolved configuration of a run with
//! digests of what it read and wrote. Nothing time-dependent is recorded, so
//! reruns produce identical manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{io_failure, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
    for entry in fs::read_dir(dir).map_err(|e| io_failure("list", dir, e))? {
        let path = entry.map_err(|e| io_failure("list", dir, e))?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else if path.file_name().and_then(|n| n.to_str()) != Some(MANIFEST_NAME) {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 of a file, or of a directory's files (relative name and
/// contents, in sorted order, manifests excluded).
pub fn digest(path: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut files = Vec::new();
        files_under(path, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update(fs::read(&f).map_err(|e| io_failure("read", &f, e))?);
        }
    } else {
        h.update(fs::read(path).map_err(|e| io_failure("read", path, e))?);
    }
    Ok(hex(&h.finalize()))
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Manifest {
            tool: "rawvid",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: digest(path)?,
        });
        Ok(())
    }

    pub fn inputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a Path>) -> CliResult<()> {
        paths.into_iter().try_for_each(|p| self.input(p))
    }

    /// Records `path`, relative to `base` when it lies inside it.
    pub fn output(&mut self, base: &Path, path: &Path) -> CliResult<()> {
        let shown = path.strip_prefix(base).unwrap_or(path);
        self.outputs.push(FileDigest {
            path: shown.display().to_string(),
            sha256: digest(path)?,
        });
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| io_failure("write", path, e))
    }

    /// Digests every file of `dir` as an output and writes `dir/manifest.json`.
    pub fn finish_dir(mut self, dir: &Path) -> CliResult<()> {
        let mut files = Vec::new();
        files_under(dir, &mut files)?;
        files.sort();
        for f in &files {
            self.output(dir, f)?;
        }
        self.write(&dir.join(MANIFEST_NAME))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_digest_ignores_manifests_and_tracks_names() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("a.txt"), "x").unwrap();
        let before = digest(d.path()).unwrap();
        fs::write(d.path().join(MANIFEST_NAME), "{}").unwrap();
        assert_eq!(digest(d.path()).unwrap(), before);
        fs::rename(d.path().join("a.txt"), d.path().join("b.txt")).unwrap();
        assert_ne!(digest(d.path()).unwrap(), before);
    }

    #[test]
    fn file_digest_is_sha256() {
        let d = tempfile::tempdir().unwrap();
        let f = d.path().join("abc");
        fs::write(&f, "abc").unwrap();
        assert_eq!(
            digest(&f).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
