use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use tracing::warn;

use super::{cache_key, BackendError, ChatBackend, ChatRequest, ChatResponse, SharedBackend};

/// Request-keyed response store, in memory and optionally mirrored to a
/// directory of `<key>.json` files.
#[derive(Debug, Default)]
pub struct ResponseCache {
    memory: RwLock<HashMap<String, ChatResponse>>,
    dir: Option<PathBuf>,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir: Some(dir), ..Self::default() })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        if let Some(hit) = self.memory.read().expect("cache lock poisoned").get(key) {
            return Some(hit.clone());
        }
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<ChatResponse>(&bytes) {
            Ok(resp) => {
                self.memory.write().expect("cache lock poisoned").insert(key.to_string(), resp.clone());
                Some(resp)
            }
            Err(e) => {
                warn!(path = %path.display(), error = %e, "ignoring unreadable cache entry");
                None
            }
        }
    }

    pub fn put(&self, key: &str, response: &ChatResponse) {
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        self.memory.write().expect("cache lock poisoned").insert(key.to_string(), response.clone());
        if let Some(dir) = &self.dir {
            if let Err(e) = write_atomic(dir, key, response) {
                warn!(error = %e, "failed to persist cache entry");
            }
        }
    }

    pub fn len(&self) -> usize {
        self.memory.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn write_atomic(dir: &Path, key: &str, response: &ChatResponse) -> std::io::Result<()> {
    let tmp = dir.join(format!(".{key}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(response)?)?;
    fs::rename(tmp, dir.join(format!("{key}.json")))
}

/// Serves repeated requests from a [`ResponseCache`].
///
/// Errors are never cached.
pub struct CachedBackend {
    inner: SharedBackend,
    cache: ResponseCache,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedBackend {
    pub fn new(inner: SharedBackend, cache: ResponseCache) -> Self {
        Self { inner, cache, hits: AtomicU64::new(0), misses: AtomicU64::new(0) }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }
}

impl ChatBackend for CachedBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = cache_key(request);
        if let Some(hit) = self.cache.get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let resp = self.inner.chat(request)?;
        self.cache.put(&key, &resp);
        Ok(resp)
    }
}
