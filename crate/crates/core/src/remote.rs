//! Blocking JSON-over-HTTP plumbing shared by the remote reward and embedding
//! providers: a swappable transport, an in-flight cap and retry with backoff.

use serde_json::Value;
use std::sync::{Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("HTTP status {0}: {1}")]
    Status(u16, String),
    #[error("network error: {0}")]
    Network(String),
    #[error("could not decode reply: {0}")]
    Decode(String),
}

/// POSTs a JSON body and returns the decoded JSON reply.
pub trait JsonTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, TransportError>;
}

/// Transport backed by a pooled `ureq` agent.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTransport { agent }
    }
}

impl JsonTransport for HttpTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<Value, TransportError> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => TransportError::Status(code, e.to_string()),
            other => TransportError::Network(other.to_string()),
        })?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| TransportError::Decode(e.to_string()))
    }
}

/// Counting semaphore bounding concurrent requests.
pub struct InflightLimiter {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(cap: usize) -> Self {
        InflightLimiter {
            cap: cap.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock().unwrap();
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap();
        }
        *used += 1;
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.used.lock().unwrap()
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limiter.used.lock().unwrap() -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Retry schedule: `retries` extra attempts after the first, sleeping
/// `backoff * 2^k` before attempt `k + 1`.
#[derive(Clone, Copy, Debug)]
pub struct Backoff {
    pub retries: u32,
    pub base: Duration,
}

impl Backoff {
    /// Runs `f` until it succeeds or attempts run out; returns the last error
    /// and the attempt count on failure.
    pub fn run<T, E: std::fmt::Display>(&self, mut f: impl FnMut(u32) -> Result<T, E>) -> Result<T, (E, u32)> {
        let mut attempt = 0;
        loop {
            match f(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt >= self.retries => return Err((e, attempt + 1)),
                Err(e) => {
                    log::warn!("attempt {} failed: {e}", attempt + 1);
                    std::thread::sleep(self.base * 2u32.saturating_pow(attempt));
                    attempt += 1;
                }
            }
        }
    }
}
