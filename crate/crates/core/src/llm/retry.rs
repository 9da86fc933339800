use std::time::Duration;

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResult, EmbeddingBackend, EmbeddingVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Calls `op` until it succeeds, fails with a non-retryable error, or the
    /// attempts run out. Delay doubles after each transport failure.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.attempts => {
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Wraps a backend with [`RetryPolicy`].
pub struct Retrying<B> {
    pub inner: B,
    pub policy: RetryPolicy,
}

impl<B> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Retrying { inner, policy }
    }
}

impl<B: CompletionBackend> CompletionBackend for Retrying<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        self.policy.run(|| self.inner.complete(request))
    }
}

impl<B: EmbeddingBackend> EmbeddingBackend for Retrying<B> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        self.policy.run(|| self.inner.embed(texts))
    }
}
