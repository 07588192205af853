use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

/// Output directory for one command. Files registered through [`OutputDir::file`]
/// are deleted again (and the directory too, if this run created it) unless
/// [`OutputDir::commit`] is reached.
pub struct OutputDir {
    dir: PathBuf,
    created: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        let created = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            created,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.files.push(p.clone());
        p
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// Writes `manifest.json` and keeps every output.
    pub fn commit(mut self, command: &str, mut manifest: Value) -> Result<()> {
        let outputs: Vec<String> = self
            .files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        manifest["command"] = json!(command);
        manifest["version"] = json!(env!("CARGO_PKG_VERSION"));
        manifest["outputs"] = json!(outputs);
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        self.write("manifest.json", text)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// Hex SHA-256 of the file, recorded in manifests to pin inputs.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn input_entry(path: &Path) -> Result<Value> {
    Ok(json!({ "path": path.display().to_string(), "sha256": file_digest(path)? }))
}
