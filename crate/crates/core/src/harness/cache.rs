//! Content-addressed cache of model-service responses with record/replay.
//!
//! Entries live at `<dir>/<kind>/<key>.json` and are never rewritten once
//! present. Replay mode never calls a live client.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::imagegen::{GenerateRequest, GenerateResponse, ImageService, SynthStrategy};
use crate::llm::{ChatClient, ChatRequest};
use crate::sampler::Embedder;
use crate::transport::{ServiceError, Transport, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Always call the live client; responses are only hashed.
    #[default]
    Off,
    /// Serve hits from disk, call and persist on a miss.
    ReadWrite,
    /// Serve hits from disk; a miss is an error.
    Replay,
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(&map[k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            scalar => out.push_str(&scalar.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn cache_key(kind: &str, request: &Value, seed: u64) -> String {
    sha256_hex(format!("{kind}\n{}\n{seed}", canonical_json(request)).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub kind: String,
    pub seed: u64,
    pub request: Value,
    pub response: Value,
    pub created_at: u64,
}

pub struct ResponseCache {
    dir: Option<PathBuf>,
    mode: CacheMode,
    live_calls: AtomicUsize,
    tmp_counter: AtomicUsize,
    /// key -> sha256 of the canonical response, for every response used.
    used: Mutex<BTreeMap<String, String>>,
}

impl ResponseCache {
    /// `dir` is required unless the mode is [`CacheMode::Off`].
    pub fn new(dir: Option<PathBuf>, mode: CacheMode) -> Result<Self, std::io::Error> {
        if mode != CacheMode::Off {
            let d = dir.as_deref().ok_or_else(|| std::io::Error::other("a cache directory is required"))?;
            std::fs::create_dir_all(d)?;
        }
        Ok(ResponseCache {
            dir,
            mode,
            live_calls: AtomicUsize::new(0),
            tmp_counter: AtomicUsize::new(0),
            used: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn disabled() -> Self {
        Self::new(None, CacheMode::Off).expect("no directory to create")
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn live_calls(&self) -> usize {
        self.live_calls.load(Ordering::SeqCst)
    }

    /// `kind:key:response-hash` for every response served, sorted.
    pub fn response_hashes(&self) -> Vec<String> {
        self.used.lock().unwrap().iter().map(|(k, h)| format!("{k}:{h}")).collect()
    }

    fn path(&self, kind: &str, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(sanitize(kind)).join(format!("{key}.json")))
    }

    fn read(&self, path: &Path) -> Option<Value> {
        let text = std::fs::read_to_string(path).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(e) => Some(e.response),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }

    fn write(&self, path: &Path, entry: &CacheEntry) -> std::io::Result<()> {
        let parent = path.parent().expect("entry paths have a parent");
        std::fs::create_dir_all(parent)?;
        let n = self.tmp_counter.fetch_add(1, Ordering::SeqCst);
        let tmp = parent.join(format!(".{}.{}.{n}.tmp", entry.key, std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(entry).expect("entries serialize"))?;
        // hard_link refuses to replace an existing entry
        let linked = std::fs::hard_link(&tmp, path);
        std::fs::remove_file(&tmp)?;
        match linked {
            Err(e) if e.kind() != std::io::ErrorKind::AlreadyExists => Err(e),
            _ => Ok(()),
        }
    }

    fn note(&self, kind: &str, key: &str, response: &Value) {
        let hash = sha256_hex(canonical_json(response).as_bytes());
        self.used.lock().unwrap().insert(format!("{}:{key}", sanitize(kind)), hash);
    }

    pub fn get_or_call(
        &self,
        kind: &str,
        request: &Value,
        seed: u64,
        live: impl FnOnce() -> Result<Value, ServiceError>,
    ) -> Result<Value, ServiceError> {
        let key = cache_key(kind, request, seed);
        let path = self.path(kind, &key);
        if self.mode != CacheMode::Off {
            if let Some(hit) = path.as_deref().and_then(|p| self.read(p)) {
                self.note(kind, &key, &hit);
                return Ok(hit);
            }
            if self.mode == CacheMode::Replay {
                return Err(TransportError::CacheMiss { key: format!("{}/{key}", sanitize(kind)) }.into());
            }
        }
        self.live_calls.fetch_add(1, Ordering::SeqCst);
        let response = live()?;
        if let (CacheMode::ReadWrite, Some(path)) = (self.mode, path) {
            let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            let entry = CacheEntry {
                key: key.clone(),
                kind: kind.to_string(),
                seed,
                request: request.clone(),
                response: response.clone(),
                created_at,
            };
            if let Err(e) = self.write(&path, &entry) {
                log::warn!("cannot persist cache entry {}: {e}", path.display());
            }
        }
        self.note(kind, &key, &response);
        Ok(response)
    }
}

fn sanitize(kind: &str) -> String {
    kind.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn decode<T: serde::de::DeserializeOwned>(service: &str, v: Value) -> Result<T, ServiceError> {
    serde_json::from_value(v).map_err(|e| ServiceError::malformed(service, format!("cached response: {e}")))
}

/// Chat client behind the cache. `inner` may be absent for replay runs.
pub struct CachedChat {
    pub inner: Option<Box<dyn ChatClient>>,
    pub cache: Arc<ResponseCache>,
    pub seed: u64,
}

fn no_live(what: &str) -> ServiceError {
    ServiceError::NotConfigured(what.to_string())
}

impl ChatClient for CachedChat {
    fn complete(&self, request: &ChatRequest) -> Result<Vec<String>, ServiceError> {
        let body = serde_json::to_value(request).expect("chat requests serialize");
        let v = self.cache.get_or_call("chat", &body, self.seed, || {
            let out = self.inner.as_ref().ok_or_else(|| no_live("chat"))?.complete(request)?;
            Ok(json!(out))
        })?;
        decode("chat", v)
    }
}

pub struct CachedEmbedder {
    pub inner: Box<dyn Embedder>,
    pub cache: Arc<ResponseCache>,
}

impl Embedder for CachedEmbedder {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ServiceError> {
        let body = json!({ "texts": texts, "dimension": self.inner.dimension() });
        let v = self.cache.get_or_call("embed", &body, 0, || Ok(json!(self.inner.embed(texts)?)))?;
        decode("embed", v)
    }
}

pub struct CachedImages {
    pub inner: Option<Box<dyn ImageService>>,
    pub cache: Arc<ResponseCache>,
}

impl ImageService for CachedImages {
    fn generate(&self, strategy: SynthStrategy, request: &GenerateRequest) -> Result<GenerateResponse, ServiceError> {
        let body = json!({ "strategy": strategy, "request": request });
        let v = self.cache.get_or_call("generate", &body, request.seed, || {
            let out = self.inner.as_ref().ok_or_else(|| no_live("generate"))?.generate(strategy, request)?;
            Ok(serde_json::to_value(out).expect("responses serialize"))
        })?;
        decode("generate", v)
    }
}

/// Transport wrapper for the remote perception backend. Headers are left
/// out of the key so credentials never reach the cache.
pub struct CachingTransport<T> {
    pub inner: T,
    pub cache: Arc<ResponseCache>,
}

impl<T: Transport> Transport for CachingTransport<T> {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<Value, TransportError> {
        let request = json!({ "url": url, "body": body });
        self.cache
            .get_or_call("perception", &request, 0, || {
                self.inner.post_json(url, headers, body, timeout).map_err(ServiceError::from)
            })
            .map_err(|e| match e {
                ServiceError::Transport(t) => t,
                other => TransportError::Malformed { url: url.to_string(), message: other.to_string() },
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, Sampling, ScriptedChat};

    #[test]
    fn canonical_form_sorts_keys() {
        let a: Value = serde_json::from_str(r#"{"b":1,"a":{"d":[1,{"z":0,"y":"x"}],"c":null}}"#).unwrap();
        assert_eq!(canonical_json(&a), r#"{"a":{"c":null,"d":[1,{"y":"x","z":0}]},"b":1}"#);
        let b: Value = serde_json::from_str(r#"{"a":{"c":null,"d":[1,{"y":"x","z":0}]},"b":1}"#).unwrap();
        assert_eq!(cache_key("chat", &a, 0), cache_key("chat", &b, 0));
    }

    #[test]
    fn seeds_and_kinds_separate_keys() {
        let r = json!({"prompt": "x"});
        assert_ne!(cache_key("chat", &r, 0), cache_key("chat", &r, 1));
        assert_ne!(cache_key("chat", &r, 0), cache_key("embed", &r, 0));
    }

    #[test]
    fn second_identical_request_is_a_hit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(Some(dir.path().into()), CacheMode::ReadWrite).unwrap();
        let r = json!({"q": 1});
        let mut calls = 0;
        for _ in 0..2 {
            let v = cache
                .get_or_call("chat", &r, 3, || {
                    calls += 1;
                    Ok(json!(["a"]))
                })
                .unwrap();
            assert_eq!(v, json!(["a"]));
        }
        assert_eq!(calls, 1);
        assert_eq!(cache.live_calls(), 1);
        assert_eq!(cache.response_hashes().len(), 1);
    }

    #[test]
    fn replay_miss_names_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(Some(dir.path().into()), CacheMode::Replay).unwrap();
        let r = json!({"q": 1});
        let err = cache.get_or_call("chat", &r, 0, || panic!("replay must not call live")).unwrap_err();
        let key = cache_key("chat", &r, 0);
        assert_eq!(err, ServiceError::Transport(TransportError::CacheMiss { key: format!("chat/{key}") }));
        assert!(err.to_string().contains(&key));
    }

    #[test]
    fn entries_are_immutable() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(Some(dir.path().into()), CacheMode::ReadWrite).unwrap();
        let r = json!({"q": 1});
        let key = cache_key("chat", &r, 0);
        let path = dir.path().join("chat").join(format!("{key}.json"));
        cache.write(&path, &CacheEntry { key: key.clone(), kind: "chat".into(), seed: 0, request: r.clone(), response: json!(1), created_at: 0 }).unwrap();
        cache.write(&path, &CacheEntry { key, kind: "chat".into(), seed: 0, request: r.clone(), response: json!(2), created_at: 0 }).unwrap();
        assert_eq!(cache.get_or_call("chat", &r, 0, || Ok(json!(3))).unwrap(), json!(1));
        assert_eq!(std::fs::read_dir(dir.path().join("chat")).unwrap().count(), 1);
    }

    #[test]
    fn cached_chat_record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let live = ScriptedChat::queued(vec![vec!["one".into(), "two".into()]]);
        let req = ChatRequest::new(vec![ChatMessage::user("hi")], 2, &Sampling::default());
        let rec = Arc::new(ResponseCache::new(Some(dir.path().into()), CacheMode::ReadWrite).unwrap());
        let chat = CachedChat { inner: Some(Box::new(live)), cache: rec.clone(), seed: 7 };
        let out = chat.complete(&req).unwrap();
        assert_eq!(chat.complete(&req).unwrap(), out);
        assert_eq!(rec.live_calls(), 1);
        let replay = Arc::new(ResponseCache::new(Some(dir.path().into()), CacheMode::Replay).unwrap());
        assert_eq!(CachedChat { inner: None, cache: replay.clone(), seed: 7 }.complete(&req).unwrap(), out);
        assert_eq!(rec.response_hashes(), replay.response_hashes());
        assert!(CachedChat { inner: None, cache: replay, seed: 8 }.complete(&req).is_err());
    }
}
