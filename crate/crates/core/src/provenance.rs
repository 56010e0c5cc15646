//! Sidecar metadata files and content hashing for pipeline artifacts.
//!
//! Every artifact `foo.fmat` may carry `foo.fmat.meta`: `key=value` lines
//! recording what produced it.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sidecar {
    entries: BTreeMap<String, String>,
}

impl Sidecar {
    pub fn new(artifact: &str) -> Self {
        let mut s = Sidecar::default();
        s.entries.insert("artifact".into(), artifact.into());
        s
    }

    pub fn with(mut self, key: &str, value: impl Display) -> Self {
        self.set(key, value);
        self
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        let v = value.to_string().replace('\n', " ");
        self.entries.insert(key.to_owned(), v);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    pub fn write_for(&self, artifact: &Path) -> Result<()> {
        let path = Self::path_for(artifact);
        let body: String = self
            .entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }

    pub fn read_for(artifact: &Path) -> Result<Self> {
        let path = Self::path_for(artifact);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
            .collect();
        Ok(Sidecar { entries })
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hash_bytes(&bytes))
}

/// Hash of several labelled parts, order-sensitive.
pub fn hash_parts<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}
