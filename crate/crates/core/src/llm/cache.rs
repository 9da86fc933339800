use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{
    cache_key, BackendError, CompletionBackend, CompletionRequest, CompletionResult, EmbeddingBackend, EmbeddingVector,
    TranscriptEntry,
};
use crate::jsonl;

type Slot = Arc<Mutex<Option<String>>>;

/// Persistent completion cache in front of another backend.
///
/// The file is append-only JSON-Lines `{key, text}`. Concurrent callers
/// asking for the same key wait on one slot, so the inner backend sees each
/// distinct key at most once.
pub struct CachedBackend<B> {
    inner: B,
    path: Option<PathBuf>,
    slots: Mutex<HashMap<String, Slot>>,
    writer: Mutex<()>,
    inner_calls: AtomicUsize,
}

impl<B: CompletionBackend> CachedBackend<B> {
    pub fn in_memory(inner: B) -> Self {
        CachedBackend {
            inner,
            path: None,
            slots: Mutex::new(HashMap::new()),
            writer: Mutex::new(()),
            inner_calls: AtomicUsize::new(0),
        }
    }

    /// Opens (or creates on first write) the cache file at `path`.
    pub fn open(inner: B, path: &Path) -> Result<Self, BackendError> {
        let mut slots = HashMap::new();
        if path.exists() {
            let lines = jsonl::read_lines::<TranscriptEntry>(path)
                .map_err(|e| BackendError::Cache(e.to_string()))?;
            for line in lines {
                slots.insert(line.value.key, Arc::new(Mutex::new(Some(line.value.text))));
            }
        }
        Ok(CachedBackend {
            inner,
            path: Some(path.to_path_buf()),
            slots: Mutex::new(slots),
            writer: Mutex::new(()),
            inner_calls: AtomicUsize::new(0),
        })
    }

    /// Number of requests forwarded to the inner backend.
    pub fn inner_calls(&self) -> usize {
        self.inner_calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn append(&self, key: &str, text: &str) -> Result<(), BackendError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let _guard = self.writer.lock().expect("cache writer lock");
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| BackendError::Cache(e.to_string()))?;
        }
        let mut line = serde_json::to_string(&TranscriptEntry {
            key: key.to_string(),
            text: text.to_string(),
        })
        .expect("entry serializes");
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| BackendError::Cache(e.to_string()))
    }
}

impl<B: CompletionBackend> CompletionBackend for CachedBackend<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let key = cache_key(request, self.inner.backend_id());
        let slot = {
            let mut slots = self.slots.lock().expect("cache slots lock");
            Arc::clone(slots.entry(key.clone()).or_default())
        };
        let mut cached = slot.lock().expect("cache slot lock");
        if let Some(text) = cached.as_ref() {
            return Ok(CompletionResult {
                text: text.clone(),
                backend_id: self.inner.backend_id().to_string(),
                from_cache: true,
            });
        }
        self.inner_calls.fetch_add(1, Ordering::SeqCst);
        let result = self.inner.complete(request)?;
        self.append(&key, &result.text)?;
        *cached = Some(result.text.clone());
        Ok(CompletionResult {
            from_cache: false,
            ..result
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::FnBackend;
    use crate::pool::map_bounded;

    fn echo() -> FnBackend<impl Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync> {
        FnBackend::new("echo", |r: &CompletionRequest| Ok(format!("re:{}", r.prompt)))
    }

    #[test]
    fn second_call_is_cached() {
        let cached = CachedBackend::in_memory(echo());
        let req = CompletionRequest::new("x", 4, 0.7);
        let a = cached.complete(&req).unwrap();
        let b = cached.complete(&req).unwrap();
        assert!(!a.from_cache);
        assert!(b.from_cache);
        assert_eq!(a.text, b.text);
        assert_eq!(cached.inner_calls(), 1);
    }

    #[test]
    fn persists_across_instances() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let req = CompletionRequest::new("x", 4, 0.7);
        CachedBackend::open(echo(), &path).unwrap().complete(&req).unwrap();
        let before = fs::read(&path).unwrap();

        let reopened = CachedBackend::open(echo(), &path).unwrap();
        let out = reopened.complete(&req).unwrap();
        assert!(out.from_cache);
        assert_eq!(out.text, "re:x");
        assert_eq!(reopened.inner_calls(), 0);
        assert_eq!(fs::read(&path).unwrap(), before);
    }

    #[test]
    fn concurrent_duplicates_hit_inner_once_per_key() {
        let cached = CachedBackend::in_memory(echo());
        let prompts: Vec<String> = (0..200).map(|i| format!("p{}", i % 7)).collect();
        let results = map_bounded(&prompts, 8, |_, p| {
            cached.complete(&CompletionRequest::new(p.clone(), 4, 0.7)).unwrap().text
        });
        assert_eq!(cached.inner_calls(), 7);
        for (p, r) in prompts.iter().zip(results) {
            assert_eq!(r, format!("re:{p}"));
        }
    }

    #[test]
    fn errors_are_not_cached() {
        let flaky = FnBackend::new("f", |_: &CompletionRequest| {
            Err(BackendError::Transport("down".into()))
        });
        let cached = CachedBackend::in_memory(flaky);
        let req = CompletionRequest::new("x", 4, 0.7);
        assert!(cached.complete(&req).is_err());
        assert!(cached.complete(&req).is_err());
        assert_eq!(cached.inner_calls(), 2);
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct EmbeddingEntry {
    key: String,
    values: Vec<f64>,
}

/// Persistent embedding cache keyed by SHA-256 of `(dimension, text)`.
/// Misses are embedded in one batch and appended to the file.
pub struct CachedEmbedder<E> {
    inner: E,
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, Vec<f64>>>,
    inner_calls: AtomicUsize,
}

impl<E: EmbeddingBackend> CachedEmbedder<E> {
    pub fn in_memory(inner: E) -> Self {
        CachedEmbedder {
            inner,
            path: None,
            entries: Mutex::new(HashMap::new()),
            inner_calls: AtomicUsize::new(0),
        }
    }

    pub fn open(inner: E, path: &Path) -> Result<Self, BackendError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let lines = jsonl::read_lines::<EmbeddingEntry>(path)
                .map_err(|e| BackendError::Cache(e.to_string()))?;
            entries.extend(lines.into_iter().map(|l| (l.value.key, l.value.values)));
        }
        Ok(CachedEmbedder {
            inner,
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
            inner_calls: AtomicUsize::new(0),
        })
    }

    pub fn inner_calls(&self) -> usize {
        self.inner_calls.load(Ordering::SeqCst)
    }

    fn key(&self, text: &str) -> String {
        let material = format!("{}\u{0}{}", self.inner.dimension(), text);
        crate::manifest::digest_bytes(material.as_bytes())
    }
}

impl<E: EmbeddingBackend> EmbeddingBackend for CachedEmbedder<E> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        let keys: Vec<String> = texts.iter().map(|t| self.key(t)).collect();
        let mut entries = self.entries.lock().expect("embedding cache lock");
        let mut missing: Vec<usize> = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if !entries.contains_key(k) && !missing.iter().any(|&j| keys[j] == *k) {
                missing.push(i);
            }
        }
        if !missing.is_empty() {
            self.inner_calls.fetch_add(1, Ordering::SeqCst);
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.inner.embed(&batch)?;
            let mut appended = String::new();
            for (&i, v) in missing.iter().zip(vectors) {
                let entry = EmbeddingEntry {
                    key: keys[i].clone(),
                    values: v.values,
                };
                appended.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
                appended.push('\n');
                entries.insert(entry.key, entry.values);
            }
            if let Some(path) = &self.path {
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .and_then(|mut f| f.write_all(appended.as_bytes()))
                    .map_err(|e| BackendError::Cache(e.to_string()))?;
            }
        }
        Ok(keys
            .iter()
            .map(|k| EmbeddingVector::new(entries[k].clone()))
            .collect())
    }
}
