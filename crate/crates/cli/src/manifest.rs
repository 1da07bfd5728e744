//! Output directory bookkeeping: every file written through [`OutputDir`] is
//! hashed, and `manifest.json` listing them is written last.

use std::path::{Path, PathBuf};

use nanoflow_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a, C: Serialize, M: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'a str,
    pub mode: &'a str,
    pub preset: &'a str,
    pub seed: u64,
    pub config: &'a C,
    pub metrics: M,
    pub files: &'a [FileEntry],
    pub wall_clock_s: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct OutputDir {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| Error::Format(format!("{name}: {e}")))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    /// Writes the manifest after everything else.
    pub fn finish<C: Serialize, M: Serialize>(
        self,
        manifest: &RunManifest<'_, C, M>,
    ) -> Result<PathBuf> {
        let path = self.path(MANIFEST);
        let mut text = serde_json::to_string_pretty(manifest)
            .map_err(|e| Error::Format(format!("{MANIFEST}: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Re-hashes every file listed in `dir/manifest.json`.
#[cfg(test)]
pub fn verify(dir: &Path) -> Result<Vec<FileEntry>> {
    #[derive(Deserialize)]
    struct Listing {
        files: Vec<FileEntry>,
    }
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let listing: Listing =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST}: {e}")))?;
    for f in &listing.files {
        let p = dir.join(&f.path);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Format(format!("{}: hash mismatch", f.path)));
        }
    }
    Ok(listing.files)
}
