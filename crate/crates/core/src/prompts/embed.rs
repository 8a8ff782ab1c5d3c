//! Text embeddings and target-aware history retrieval.

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::PromptError;
use crate::corpus::tokenize_words;
use crate::remote::{Backoff, HttpTransport, InflightLimiter, JsonTransport, TransportError};

pub const LOCAL_DIM: usize = 64;

pub trait Embedder: Send + Sync {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, PromptError>;

    fn embed(&self, text: &str) -> Result<Vec<f64>, PromptError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// Signed feature hashing of word tokens, L2-normalized. Empty text maps to
/// the zero vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LocalEmbedder {
    pub dim: usize,
}

impl Default for LocalEmbedder {
    fn default() -> Self {
        LocalEmbedder { dim: LOCAL_DIM }
    }
}

impl LocalEmbedder {
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in tokenize_words(text) {
            let mut h = FnvHasher::default();
            h.write(tok.as_bytes());
            let h = h.finish();
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for LocalEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, PromptError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub base_url: String,
    pub model: String,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    pub api_key_env: String,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "text-embedding-3-small".into(),
            retries: 2,
            backoff_ms: 500,
            timeout_secs: 60,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

/// Embeddings endpoint client. Vectors are cached per text for the lifetime
/// of the client.
pub struct RemoteEmbedder {
    config: EmbedderConfig,
    api_key: Option<String>,
    transport: Arc<dyn JsonTransport>,
    limiter: Arc<InflightLimiter>,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

impl RemoteEmbedder {
    pub fn new(config: EmbedderConfig, limiter: Arc<InflightLimiter>) -> Self {
        let transport = Arc::new(HttpTransport::new(Duration::from_secs(config.timeout_secs)));
        Self::with_transport(config, limiter, transport)
    }

    pub fn with_transport(
        config: EmbedderConfig,
        limiter: Arc<InflightLimiter>,
        transport: Arc<dyn JsonTransport>,
    ) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        RemoteEmbedder {
            config,
            api_key,
            transport,
            limiter,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, TransportError> {
        let url = format!("{}/embeddings", self.config.base_url.trim_end_matches('/'));
        let body = json!({"model": self.config.model, "input": texts});
        let reply = {
            let _permit = self.limiter.acquire();
            self.transport.post_json(&url, self.api_key.as_deref(), &body)?
        };
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| TransportError::Decode("reply has no data array".into()))?;
        if data.len() != texts.len() {
            return Err(TransportError::Decode(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        data.iter()
            .map(|d| {
                d.get("embedding")
                    .and_then(Value::as_array)
                    .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .filter(|v| v.iter().all(|x| x.is_finite()))
                    .ok_or_else(|| TransportError::Decode("malformed embedding".into()))
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, PromptError> {
        let missing: Vec<&str> = {
            let cache = self.cache.lock().unwrap();
            let mut m: Vec<&str> = texts.iter().copied().filter(|t| !cache.contains_key(*t)).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let backoff = Backoff {
                retries: self.config.retries,
                base: Duration::from_millis(self.config.backoff_ms),
            };
            let vectors =
                backoff
                    .run(|_| self.request(&missing))
                    .map_err(|(e, attempts)| PromptError::EmbeddingUnavailable {
                        attempts,
                        last: e.to_string(),
                    })?;
            let mut cache = self.cache.lock().unwrap();
            for (t, v) in missing.iter().zip(vectors) {
                cache.insert(t.to_string(), v);
            }
        }
        let cache = self.cache.lock().unwrap();
        Ok(texts.iter().map(|t| cache[*t].clone()).collect())
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Indices of the `k` history texts most similar to `target`, most similar
/// first; equal similarities keep history order.
pub fn retrieve_top_k(
    history: &[&str],
    target: &str,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<usize>, PromptError> {
    let mut texts = Vec::with_capacity(history.len() + 1);
    texts.push(target);
    texts.extend_from_slice(history);
    let vecs = embedder.embed_batch(&texts)?;
    let sims: Vec<f64> = vecs[1..].iter().map(|v| cosine(v, &vecs[0])).collect();
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
    order.truncate(k);
    Ok(order)
}
