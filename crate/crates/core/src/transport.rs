//! JSON-over-HTTP plumbing shared by the remote clients: a pluggable
//! transport, an in-flight request cap and retry with exponential backoff.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum TransportError {
    #[error("request to {url} failed: {message}")]
    Unreachable { url: String, message: String },
    #[error("{url} answered with status {status}: {body}")]
    Status { url: String, status: u16, body: String },
    #[error("{url} returned malformed json: {message}")]
    Malformed { url: String, message: String },
    #[error("replay cache has no entry for key {key}")]
    CacheMiss { key: String },
}

impl TransportError {
    /// Client errors (4xx) are not worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Status { status, .. } => *status >= 500 || *status == 429,
            TransportError::CacheMiss { .. } => false,
            _ => true,
        }
    }
}

/// Failure of a model service (chat, embedding, image generation) after
/// retries, or a response that does not have the expected shape.
#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum ServiceError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("malformed response from {service}: {message}")]
    Malformed { service: String, message: String },
    #[error("{0} endpoint is not configured")]
    NotConfigured(String),
}

impl ServiceError {
    pub fn malformed(service: &str, message: impl Into<String>) -> Self {
        ServiceError::Malformed { service: service.to_string(), message: message.into() }
    }
}

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        HttpTransport { client: reqwest::blocking::Client::new() }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let resp = req
            .send()
            .map_err(|e| TransportError::Unreachable { url: url.to_string(), message: e.to_string() })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| TransportError::Unreachable { url: url.to_string(), message: e.to_string() })?;
        if !status.is_success() {
            return Err(TransportError::Status { url: url.to_string(), status: status.as_u16(), body: text });
        }
        serde_json::from_str(&text).map_err(|e| TransportError::Malformed { url: url.to_string(), message: e.to_string() })
    }
}

/// Counting semaphore bounding concurrent requests.
pub struct InFlightLimit {
    available: Mutex<usize>,
    cond: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimit);

impl InFlightLimit {
    pub fn new(cap: usize) -> Self {
        InFlightLimit { available: Mutex::new(cap.max(1)), cond: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cond.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.cond.notify_one();
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, base_delay: Duration::from_millis(200) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { max_retries: 0, base_delay: Duration::ZERO }
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent. Delay doubles after every failed attempt.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, TransportError>) -> Result<T, TransportError> {
        let mut delay = self.base_delay;
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if attempt < self.max_retries && e.is_retryable() => {
                    log::warn!("attempt {} failed: {e}; retrying in {:?}", attempt + 1, delay);
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Transport wrapper that applies the retry policy and the in-flight cap.
pub struct ServiceClient {
    transport: Box<dyn Transport>,
    limit: InFlightLimit,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub headers: Vec<(String, String)>,
}

impl ServiceClient {
    pub fn new(transport: Box<dyn Transport>, max_in_flight: usize, retry: RetryPolicy, timeout: Duration) -> Self {
        ServiceClient { transport, limit: InFlightLimit::new(max_in_flight), retry, timeout, headers: Vec::new() }
    }

    pub fn http(max_in_flight: usize, retry: RetryPolicy, timeout: Duration) -> Self {
        Self::new(Box::new(HttpTransport::new()), max_in_flight, retry, timeout)
    }

    pub fn post(&self, url: &str, body: &Value) -> Result<Value, TransportError> {
        let _permit = self.limit.acquire();
        self.retry.run(|| self.transport.post_json(url, &self.headers, body, self.timeout))
    }
}
