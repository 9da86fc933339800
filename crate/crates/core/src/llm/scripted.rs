use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{apply_stop, cache_key, BackendError, CompletionBackend, CompletionRequest, CompletionResult};
use crate::jsonl;

pub const SCRIPTED_BACKEND_ID: &str = "scripted";

/// One `{key, text}` line of a transcript or cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: String,
    pub text: String,
}

/// Replays completions from a transcript keyed by [`cache_key`] under the
/// backend id `"scripted"`.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    entries: HashMap<String, String>,
}

impl ScriptedBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        ScriptedBackend {
            entries: entries.into_iter().map(|e| (e.key, e.text)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let lines = jsonl::read_lines::<TranscriptEntry>(path)
            .map_err(|e| BackendError::Cache(e.to_string()))?;
        Ok(Self::from_entries(lines.into_iter().map(|l| l.value)))
    }

    pub fn insert(&mut self, request: &CompletionRequest, text: impl Into<String>) {
        self.entries
            .insert(cache_key(request, SCRIPTED_BACKEND_ID), text.into());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn backend_id(&self) -> &str {
        SCRIPTED_BACKEND_ID
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let key = cache_key(request, SCRIPTED_BACKEND_ID);
        let text = self
            .entries
            .get(&key)
            .ok_or_else(|| BackendError::Refusal("unscripted prompt".into()))?;
        Ok(CompletionResult {
            text: apply_stop(text, &request.stop_sequences),
            backend_id: SCRIPTED_BACKEND_ID.into(),
            from_cache: false,
        })
    }
}

/// Completion backend driven by a closure. Useful for synthesizing
/// transcripts: wrap it in a [`super::CachedBackend`] with id `"scripted"`
/// and the cache file is a valid transcript.
pub struct FnBackend<F> {
    id: String,
    respond: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, respond: F) -> Self {
        FnBackend {
            id: id.into(),
            respond,
        }
    }
}

impl<F> CompletionBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let text = (self.respond)(request)?;
        Ok(CompletionResult {
            text: apply_stop(&text, &request.stop_sequences),
            backend_id: self.id.clone(),
            from_cache: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_lookup_and_refusal() {
        let req = CompletionRequest::new("hello", 8, 0.7);
        let mut backend = ScriptedBackend::default();
        backend.insert(&req, "world");
        let out = backend.complete(&req).unwrap();
        assert_eq!(out.text, "world");
        assert!(!out.from_cache);
        let other = CompletionRequest::new("bye", 8, 0.7);
        assert_eq!(
            backend.complete(&other),
            Err(BackendError::Refusal("unscripted prompt".into()))
        );
    }

    #[test]
    fn scripted_applies_stop() {
        let req = CompletionRequest::new("p", 8, 0.7).with_stop(vec!["\n\n".into()]);
        let backend = ScriptedBackend::from_entries([TranscriptEntry {
            key: cache_key(&req, SCRIPTED_BACKEND_ID),
            text: "fact.\n\nContext:junk".into(),
        }]);
        assert_eq!(backend.complete(&req).unwrap().text, "fact.");
    }

    #[test]
    fn transcript_file_roundtrip() {
        let req = CompletionRequest::new("q", 4, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let entry = TranscriptEntry {
            key: cache_key(&req, SCRIPTED_BACKEND_ID),
            text: "a".into(),
        };
        jsonl::write_lines(&path, &[entry]).unwrap();
        let backend = ScriptedBackend::load(&path).unwrap();
        assert_eq!(backend.complete(&req).unwrap().text, "a");
    }
}
