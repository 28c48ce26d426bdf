use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;

pub const CACHE_ENV: &str = "LATENTKF_CACHE";

/// Checkpoint store: one directory per `(kind, key)`. Writes go to a
/// scratch directory that is renamed into place, so an interrupted run
/// never leaves a half-written entry behind.
#[derive(Clone, Debug)]
pub struct Cache {
    root: Option<PathBuf>,
}

impl Cache {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
        }
    }

    /// No persistence: every request rebuilds.
    pub fn disabled() -> Self {
        Self { root: None }
    }

    /// `$LATENTKF_CACHE`, falling back to `fallback`.
    pub fn from_env(fallback: &Path) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(v) if !v.is_empty() => Self::at(PathBuf::from(v)),
            _ => Self::at(fallback),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn entry(&self, kind: &str, key: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| r.join(format!("{kind}-{key}")))
    }

    pub fn contains(&self, kind: &str, key: &str) -> bool {
        self.entry(kind, key).is_some_and(|p| p.is_dir())
    }

    /// Load the entry if present (and loadable), otherwise build and store it.
    pub fn get_or_build<T>(
        &self,
        kind: &str,
        key: &str,
        load: impl Fn(&Path) -> anyhow::Result<T>,
        build: impl FnOnce() -> anyhow::Result<T>,
        save: impl Fn(&T, &Path) -> anyhow::Result<()>,
    ) -> anyhow::Result<T> {
        let Some(dir) = self.entry(kind, key) else {
            return build();
        };
        if dir.is_dir() {
            match load(&dir) {
                Ok(v) => {
                    log::info!("cache hit: {}", dir.display());
                    return Ok(v);
                }
                Err(e) => log::warn!("ignoring unreadable cache entry {}: {e:#}", dir.display()),
            }
        }
        let value = build()?;
        let root = dir.parent().expect("entry has a parent");
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let scratch = root.join(format!(".{kind}-{key}.{}", std::process::id()));
        if scratch.exists() {
            fs::remove_dir_all(&scratch)?;
        }
        fs::create_dir_all(&scratch)?;
        save(&value, &scratch)?;
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::rename(&scratch, &dir).with_context(|| format!("moving cache entry into {}", dir.display()))?;
        Ok(value)
    }
}
