use sha2::{Digest, Sha256};

use super::{BackendError, EmbeddingBackend, EmbeddingVector};

pub const FALLBACK_DIMENSION: usize = 256;

/// Offline embedder: every whitespace token adds ±1 to one of 256 buckets
/// (bucket and sign from a SHA-256 of the token), then the vector is
/// L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

fn bucket_and_sign(token: &str) -> (usize, f64) {
    let digest = Sha256::digest(token.as_bytes());
    let bucket = u64::from_le_bytes(digest[..8].try_into().unwrap()) as usize % FALLBACK_DIMENSION;
    let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
    (bucket, sign)
}

impl HashingEmbedder {
    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("cannot embed empty text".into()));
        }
        let mut values = vec![0.0; FALLBACK_DIMENSION];
        for token in text.split_whitespace() {
            let (bucket, sign) = bucket_and_sign(token);
            values[bucket] += sign;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // opposite-signed collisions cancelled out; use the whole text's bucket
            let (bucket, _) = bucket_and_sign(text);
            values[bucket] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(EmbeddingVector::new(values))
    }
}

impl EmbeddingBackend for HashingEmbedder {
    fn dimension(&self) -> usize {
        FALLBACK_DIMENSION
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, BackendError> {
        texts.iter().map(|t| self.embed_one(t)).collect()
    }
}
