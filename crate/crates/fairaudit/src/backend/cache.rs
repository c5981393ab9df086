//! Content-addressed on-disk response cache.
//!
//! One JSON record per key under `dir/<first two hex chars>/<key>.json`,
//! written to a temp file and renamed so readers never see partial records.
//! An in-process in-flight set guarantees at most one computation per key
//! even under concurrent workers; completed keys are skipped on re-runs,
//! which is what makes interrupted audits resumable.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};

use super::BackendError;

/// The persisted part of a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    pub attempt_count: u32,
    pub model: String,
}

pub struct ResponseCache {
    dir: PathBuf,
    inflight: Mutex<HashSet<String>>,
    done: Condvar,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ResponseCache {
            dir: dir.to_path_buf(),
            inflight: Mutex::new(HashSet::new()),
            done: Condvar::new(),
        })
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("xx");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entry_path(key).exists()
    }

    /// Reads a cached response; an unreadable record counts as a miss.
    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        let path = self.entry_path(key);
        let raw = fs::read_to_string(&path).ok()?;
        match serde_json::from_str(&raw) {
            Ok(resp) => Some(resp),
            Err(e) => {
                log::warn!("discarding unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    fn put(&self, key: &str, response: &CachedResponse) -> io::Result<()> {
        let path = self.entry_path(key);
        let parent = path.parent().expect("entry path has a parent");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".tmp-{key}"));
        fs::write(&tmp, serde_json::to_string(response)?)?;
        fs::rename(&tmp, &path)
    }

    /// Returns the cached response for `key`, or runs `compute` and stores
    /// the result. The boolean is true on a cache hit. Concurrent callers on
    /// the same key block until the first finishes; a failed computation is
    /// not cached, and the next caller tries again.
    pub fn get_or_compute<F>(
        &self,
        key: &str,
        compute: F,
    ) -> Result<(CachedResponse, bool), BackendError>
    where
        F: FnOnce() -> Result<CachedResponse, BackendError>,
    {
        loop {
            if let Some(hit) = self.get(key) {
                return Ok((hit, true));
            }
            let mut inflight = self.inflight.lock().expect("cache lock poisoned");
            if !inflight.contains(key) {
                inflight.insert(key.to_string());
                break;
            }
            while inflight.contains(key) {
                inflight = self.done.wait(inflight).expect("cache lock poisoned");
            }
            // The other worker finished (or failed); re-check the file.
        }

        let result = compute().and_then(|resp| {
            // Persist before releasing the key so waiters always see the file.
            self.put(key, &resp).map_err(BackendError::Cache)?;
            Ok(resp)
        });
        {
            let mut inflight = self.inflight.lock().expect("cache lock poisoned");
            inflight.remove(key);
            self.done.notify_all();
        }
        result.map(|resp| (resp, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn response(text: &str) -> CachedResponse {
        CachedResponse {
            text: text.into(),
            attempt_count: 1,
            model: "mock".into(),
        }
    }

    #[test]
    fn compute_once_then_hit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let calls = AtomicU32::new(0);
        let (first, hit) = cache
            .get_or_compute("k1", || {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(response("hello"))
            })
            .unwrap();
        assert!(!hit);
        assert_eq!(first.text, "hello");

        let (second, hit) = cache
            .get_or_compute("k1", || {
                calls.fetch_add(1, Ordering::SeqCst);
                Ok(response("other"))
            })
            .unwrap();
        assert!(hit);
        assert_eq!(second.text, "hello");
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn failures_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let err = cache.get_or_compute("k1", || {
            Err(BackendError::Transport {
                attempts: 1,
                message: "down".into(),
            })
        });
        assert!(err.is_err());
        assert!(!cache.contains("k1"));
        let (resp, hit) = cache.get_or_compute("k1", || Ok(response("ok"))).unwrap();
        assert!(!hit);
        assert_eq!(resp.text, "ok");
    }

    #[test]
    fn concurrent_callers_share_one_computation() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let calls = AtomicU32::new(0);
        std::thread::scope(|scope| {
            for _ in 0..8 {
                scope.spawn(|| {
                    let (resp, _) = cache
                        .get_or_compute("shared", || {
                            calls.fetch_add(1, Ordering::SeqCst);
                            std::thread::sleep(std::time::Duration::from_millis(20));
                            Ok(response("slow"))
                        })
                        .unwrap();
                    assert_eq!(resp.text, "slow");
                });
            }
        });
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn keys_are_independent_and_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = ResponseCache::open(dir.path()).unwrap();
            cache.get_or_compute("a", || Ok(response("A"))).unwrap();
            cache.get_or_compute("b", || Ok(response("B"))).unwrap();
        }
        let cache = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(cache.get("a").unwrap().text, "A");
        assert_eq!(cache.get("b").unwrap().text, "B");
        assert!(cache.get("c").is_none());
    }
}
