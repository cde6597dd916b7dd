//! File-backed VPF registry.
//!
//! Layout under the store directory:
//!
//! ```text
//! manifest.jsonl        one ArtifactRecord (without blob) per line, append only
//! blobs/<hex digest>    raw artifact bytes
//! ```
//!
//! One writer at a time; readers share the lock.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use thiserror::Error;
use vpc_core::hash::Digest256;
use vpc_core::model::{SemVer, VpfDescriptor};
use vpc_core::registry::{ArtifactRecord, CatalogEntry, Registry, RegistryError};

const MANIFEST: &str = "manifest.jsonl";
const BLOBS: &str = "blobs";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

pub struct FileStore {
    dir: PathBuf,
    registry: RwLock<Registry>,
    writer: Mutex<()>,
}

impl FileStore {
    /// Opens (creating if needed) the store at `dir` and loads every record,
    /// re-checking each blob against its digest.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        let blobs = dir.join(BLOBS);
        fs::create_dir_all(&blobs).map_err(io(&blobs))?;
        let manifest = dir.join(MANIFEST);
        let mut registry = Registry::new();
        if manifest.exists() {
            let f = File::open(&manifest).map_err(io(&manifest))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(io(&manifest))?;
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |msg: String| StoreError::Manifest { path: manifest.clone(), line: i + 1, msg };
                let mut rec: ArtifactRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
                let path = blobs.join(rec.artifact_digest.to_string());
                rec.blob = fs::read(&path).map_err(io(&path))?;
                registry.restore(rec)?;
            }
        }
        Ok(FileStore { dir, registry: RwLock::new(registry), writer: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn publish(&self, desc: VpfDescriptor, blob: Vec<u8>) -> Result<Digest256, StoreError> {
        let _w = self.writer.lock().unwrap();
        // Validate on a scratch copy so nothing is visible before it is on disk.
        let mut scratch = Registry::new();
        let digest = scratch.publish(desc.clone(), blob.clone())?;
        {
            let r = self.registry.read().unwrap();
            if r.record(&desc.vpf_id, desc.version).is_some() {
                return Err(RegistryError::DuplicateVersion(desc.vpf_id, desc.version).into());
            }
        }
        let rec = scratch.record(&desc.vpf_id, desc.version).unwrap().clone();
        let path = self.dir.join(BLOBS).join(digest.to_string());
        if !path.exists() {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, &blob).map_err(io(&tmp))?;
            fs::rename(&tmp, &path).map_err(io(&path))?;
        }
        let manifest = self.dir.join(MANIFEST);
        let mut f = OpenOptions::new().create(true).append(true).open(&manifest).map_err(io(&manifest))?;
        let mut line = serde_json::to_string(&rec).expect("records serialize");
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(io(&manifest))?;
        f.sync_data().map_err(io(&manifest))?;
        self.registry.write().unwrap().restore(rec)?;
        Ok(digest)
    }

    pub fn fetch(&self, vpf_id: &str, version: SemVer) -> Result<(VpfDescriptor, Vec<u8>), StoreError> {
        let r = self.registry.read().unwrap();
        let (d, b) = r.fetch(vpf_id, version)?;
        Ok((d.clone(), b.to_vec()))
    }

    pub fn list(&self) -> Vec<CatalogEntry> {
        self.registry.read().unwrap().list()
    }
}
