//! Content-addressed description cache: one JSON file per key.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;

/// A generated (or degraded) item description, stored verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub item_index: usize,
    pub item_key: String,
    pub text: String,
    pub model_name: String,
    pub template_id: String,
    pub prompt_version: u32,
    /// Hash of the rendered prompt; differs between title-guided and title-free runs.
    pub prompt_hash: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    /// True when no image was available and the title stands in for the description.
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub item_key: String,
    pub image_hash: String,
    pub template_id: String,
    pub prompt_version: u32,
    pub prompt_hash: String,
    pub model_name: String,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        Fingerprinter::new("description-cache")
            .str(&self.item_key)
            .str(&self.image_hash)
            .str(&self.template_id)
            .u64(self.prompt_version as u64)
            .str(&self.prompt_hash)
            .str(&self.model_name)
            .finish()
    }
}

#[derive(Debug)]
pub struct EnrichmentCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl EnrichmentCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        let digest = key.digest();
        self.dir.join(&digest[..2]).join(format!("{digest}.json"))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Description>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        crate::io::read_json(&path).map(Some)
    }

    pub fn put(&self, key: &CacheKey, description: &Description) -> Result<()> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        crate::io::write_json(&self.path(key), description)
    }

    pub fn len(&self) -> usize {
        walk_json(&self.dir)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk_json(dir: &Path) -> usize {
    let Ok(entries) = std::fs::read_dir(dir) else { return 0 };
    entries
        .flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk_json(&p)
            } else {
                usize::from(p.extension().is_some_and(|x| x == "json"))
            }
        })
        .sum()
}
