//! On-disk layout: `<root>/projects/<id>/state.json` plus content-addressed
//! blobs under `<root>/projects/<id>/blobs/<sha256>.<ext>`. Every write goes
//! to a temporary file in the same directory and is renamed into place, so a
//! reader (or a restart after a kill) sees either the old or the new file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};
use crate::project::Project;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("projects"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn project_dir(&self, id: &str) -> Result<PathBuf> {
        // Ids come from URLs; refuse anything that could escape the store.
        if id.is_empty() || !id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-') {
            return Err(ServiceError::NotFound(id.to_string()));
        }
        Ok(self.root.join("projects").join(id))
    }

    pub fn exists(&self, id: &str) -> bool {
        self.project_dir(id).map(|d| d.join("state.json").is_file()).unwrap_or(false)
    }

    pub fn load(&self, id: &str) -> Result<Project> {
        let path = self.project_dir(id)?.join("state.json");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(ServiceError::NotFound(id.into())),
            Err(e) => return Err(e.into()),
        };
        serde_json::from_str(&text).map_err(|e| ServiceError::Corrupt(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, project: &Project) -> Result<()> {
        let dir = self.project_dir(&project.id)?;
        fs::create_dir_all(dir.join("blobs"))?;
        let json = serde_json::to_vec_pretty(project).expect("project serializes");
        write_atomic(&dir.join("state.json"), &json)
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("projects"))? {
            let entry = entry?;
            if entry.path().join("state.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Stores `bytes` under its digest and returns the digest.
    pub fn put_blob(&self, id: &str, bytes: &[u8], ext: &str) -> Result<String> {
        let digest = sha256_hex(bytes);
        let dir = self.project_dir(id)?.join("blobs");
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{digest}.{ext}"));
        if !path.is_file() {
            write_atomic(&path, bytes)?;
        }
        Ok(digest)
    }

    pub fn blob_path(&self, id: &str, digest: &str, ext: &str) -> Result<PathBuf> {
        if !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(ServiceError::Corrupt(format!("bad digest {digest:?}")));
        }
        Ok(self.project_dir(id)?.join("blobs").join(format!("{digest}.{ext}")))
    }

    /// Reads a blob and checks it still hashes to its name.
    pub fn get_blob(&self, id: &str, digest: &str, ext: &str) -> Result<Vec<u8>> {
        let path = self.blob_path(id, digest, ext)?;
        let bytes = fs::read(&path)?;
        if sha256_hex(&bytes) != digest {
            return Err(ServiceError::Corrupt(format!("{} does not match its digest", path.display())));
        }
        Ok(bytes)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().expect("file name").to_string_lossy(),
        uuid::Uuid::new_v4().simple()
    ));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)?;
    Ok(())
}
