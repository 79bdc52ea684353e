use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{sha256_hex, Backend, BackendError, CompletionRequest, CompletionResponse, Message};

/// On-disk record: one file per key, named by the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub text: String,
    pub timestamp: u64,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend_id: &'a str,
    model_name: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_output_tokens: u32,
}

/// SHA-256 over the canonical JSON of everything that determines a response.
pub fn cache_key(backend_id: &str, request: &CompletionRequest) -> String {
    let material = KeyMaterial {
        backend_id,
        model_name: &request.model_name,
        messages: &request.messages,
        temperature: request.temperature,
        max_output_tokens: request.max_output_tokens,
    };
    sha256_hex(&serde_json::to_vec(&material).expect("key material serializes"))
}

/// Directory-backed response store. Concurrent writers of one key race
/// benignly: values for a key are identical by construction.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    /// `Ok(None)` on a plain miss; `Err` when the store itself misbehaves.
    pub fn get(&self, key: &str) -> std::io::Result<Option<CacheEntry>> {
        match std::fs::read(self.path(key)) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, key: &str, text: &str) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let entry = CacheEntry {
            request_digest: key.to_owned(),
            text: text.to_owned(),
            timestamp: crate::unix_timestamp(),
        };
        let tmp = self.dir.join(format!(
            ".{key}.{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        std::fs::rename(&tmp, self.path(key))
    }
}

/// Serves from `cache` when possible; otherwise calls the backend and stores
/// the result. Cache I/O problems are logged and never fail the call.
pub fn cached_complete(
    cache: Option<&ResponseCache>,
    backend: &dyn Backend,
    request: &CompletionRequest,
) -> Result<CompletionResponse, BackendError> {
    let Some(cache) = cache else {
        return backend.complete(request);
    };
    let key = cache_key(backend.id(), request);
    match cache.get(&key) {
        Ok(Some(entry)) => {
            cache.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(CompletionResponse {
                text: entry.text,
                backend_id: backend.id().to_owned(),
                cached: true,
                retries: 0,
            });
        }
        Ok(None) => {}
        Err(e) => log::warn!("response cache read failed for {key}: {e}; calling backend"),
    }
    cache.misses.fetch_add(1, Ordering::Relaxed);
    let response = backend.complete(request)?;
    if let Err(e) = cache.put(&key, &response.text) {
        log::warn!("response cache write failed for {key}: {e}");
    }
    Ok(response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockBackend;
    use std::sync::atomic::AtomicUsize;

    /// Counts calls so tests can see whether the backend was reached.
    struct Counting {
        inner: MockBackend,
        calls: AtomicUsize,
    }

    impl Backend for Counting {
        fn id(&self) -> &str {
            self.inner.id()
        }
        fn complete(&self, r: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.complete(r)
        }
    }

    fn counting() -> Counting {
        Counting {
            inner: MockBackend::echo(),
            calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn second_call_is_a_hit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let backend = counting();
        let req = CompletionRequest::single_user("m", "abc", 16);
        let first = cached_complete(Some(&cache), &backend, &req).unwrap();
        let second = cached_complete(Some(&cache), &backend, &req).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!((cache.hits(), cache.misses()), (1, 1));

        let key = cache_key(backend.id(), &req);
        let stored: CacheEntry =
            serde_json::from_slice(&std::fs::read(dir.path().join(&key)).unwrap()).unwrap();
        assert_eq!(stored.request_digest, key);
        assert_eq!(stored.text, "abc");
    }

    #[test]
    fn temperature_is_part_of_the_key() {
        let a = CompletionRequest::single_user("m", "abc", 16);
        let mut b = a.clone();
        b.temperature = 0.7;
        assert_ne!(cache_key("x", &a), cache_key("x", &b));
        assert_ne!(cache_key("x", &a), cache_key("y", &a));
    }

    #[test]
    fn deleted_cache_means_two_backend_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache_dir = dir.path().join("c");
        let cache = ResponseCache::new(&cache_dir);
        let backend = counting();
        let req = CompletionRequest::single_user("m", "abc", 16);
        cached_complete(Some(&cache), &backend, &req).unwrap();
        std::fs::remove_dir_all(&cache_dir).unwrap();
        let again = cached_complete(Some(&cache), &backend, &req).unwrap();
        assert!(!again.cached);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn unusable_cache_degrades_to_backend() {
        let dir = tempfile::tempdir().unwrap();
        // a regular file where the cache directory should be
        let blocker = dir.path().join("blocked");
        std::fs::write(&blocker, "x").unwrap();
        let cache = ResponseCache::new(&blocker);
        let backend = counting();
        let req = CompletionRequest::single_user("m", "abc", 16);
        let r = cached_complete(Some(&cache), &backend, &req).unwrap();
        assert_eq!(r.text, "abc");
        assert!(!r.cached);
    }

    #[test]
    fn corrupt_entry_degrades_to_backend() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path());
        let backend = counting();
        let req = CompletionRequest::single_user("m", "abc", 16);
        std::fs::write(dir.path().join(cache_key(backend.id(), &req)), "{garbage").unwrap();
        let r = cached_complete(Some(&cache), &backend, &req).unwrap();
        assert!(!r.cached);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    proptest::proptest! {
        #[test]
        fn key_survives_serde_round_trip(
            prompt in "\\PC{0,40}",
            temp in 0.0f64..2.0,
            max in 1u32..4096,
        ) {
            let mut req = CompletionRequest::single_user("model", prompt, max);
            req.temperature = temp;
            let back: CompletionRequest =
                serde_json::from_str(&serde_json::to_string(&req).unwrap()).unwrap();
            proptest::prop_assert_eq!(cache_key("b", &req), cache_key("b", &back));
        }
    }
}
