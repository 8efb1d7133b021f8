//! Plain-text pipeline manifest: `key=value` lines, where every artifact key
//! `k` is accompanied by `k.sha256=<hex digest>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

const HASH_SUFFIX: &str = ".sha256";

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Manifest {
    path: PathBuf,
    entries: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    /// Loads `path`, or starts an empty manifest if it does not exist yet.
    pub fn open(path: &Path) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| CliError::Io(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
                entries.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self { path: path.to_path_buf(), entries })
    }

    fn base(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// Path as stored: relative to the manifest's directory when possible.
    fn stored_form(&self, file: &Path) -> String {
        let base = self.base().canonicalize().ok();
        let full = file.canonicalize().ok();
        match (base, full) {
            (Some(b), Some(f)) => match f.strip_prefix(&b) {
                Ok(rel) => rel.display().to_string(),
                Err(_) => f.display().to_string(),
            },
            _ => file.display().to_string(),
        }
    }

    fn resolve(&self, stored: &str) -> PathBuf {
        let p = Path::new(stored);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base().join(p)
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    #[cfg(test)]
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Records an artifact and its current content hash.
    pub fn record_file(&mut self, key: &str, file: &Path) -> Result<(), CliError> {
        let digest = sha256_file(file)?;
        self.set(key, self.stored_form(file));
        self.set(&format!("{key}{HASH_SUFFIX}"), digest);
        Ok(())
    }

    /// Fails if `file` is recorded under some key with a different hash.
    /// Files the manifest does not mention pass unchecked.
    pub fn verify_file(&self, file: &Path) -> Result<(), CliError> {
        let Ok(target) = file.canonicalize() else {
            return Ok(());
        };
        for (key, value) in &self.entries {
            if key.ends_with(HASH_SUFFIX) {
                continue;
            }
            if self.resolve(value).canonicalize().ok().as_deref() != Some(target.as_path()) {
                continue;
            }
            if let Some(expected) = self.entries.get(&format!("{key}{HASH_SUFFIX}")) {
                let actual = sha256_file(file)?;
                if &actual != expected {
                    return Err(CliError::Stale(format!(
                        "{} changed since it was recorded as `{key}` in {} (expected sha256 {expected}, found {actual})",
                        file.display(),
                        self.path.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Re-checks every recorded artifact.
    pub fn verify_all(&self) -> Result<(), CliError> {
        for (key, value) in &self.entries {
            if key.ends_with(HASH_SUFFIX) || !self.entries.contains_key(&format!("{key}{HASH_SUFFIX}")) {
                continue;
            }
            self.verify_file(&self.resolve(value))?;
        }
        Ok(())
    }

    pub fn save(&self) -> Result<(), CliError> {
        let mut text = String::from("# semid pipeline manifest\n");
        for (k, v) in &self.entries {
            text.push_str(&format!("{k}={v}\n"));
        }
        fs::write(&self.path, text).map_err(|e| CliError::io(&self.path, e))
    }
}

/// Optional manifest threaded through a command: verifies inputs, records outputs.
pub struct Tracker(Option<Manifest>);

impl Tracker {
    /// Opens the manifest and checks every artifact already recorded in it.
    pub fn new(path: Option<&Path>) -> Result<Self, CliError> {
        let manifest = path.map(Manifest::open).transpose()?;
        if let Some(m) = &manifest {
            m.verify_all()?;
        }
        Ok(Self(manifest))
    }

    pub fn input(&self, file: &Path) -> Result<(), CliError> {
        match &self.0 {
            Some(m) => m.verify_file(file),
            None => Ok(()),
        }
    }

    pub fn output(&mut self, key: &str, file: &Path) -> Result<(), CliError> {
        match &mut self.0 {
            Some(m) => m.record_file(key, file),
            None => Ok(()),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        if let Some(m) = &mut self.0 {
            m.set(key, value);
        }
    }

    pub fn finish(self) -> Result<(), CliError> {
        match self.0 {
            Some(m) => m.save(),
            None => Ok(()),
        }
    }
}
