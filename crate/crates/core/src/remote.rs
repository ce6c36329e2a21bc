//! JSON-over-HTTP plumbing shared by the external backends, plus an on-disk
//! response cache with one file per key hash.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("request to {endpoint} failed: {message}")]
    Transport { endpoint: String, message: String },
    #[error("unusable response: {0}")]
    BadResponse(String),
    #[error("cache error at {path}: {message}")]
    Cache { path: String, message: String },
}

/// Where an external backend lives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_timeout() -> u64 {
    60
}

pub trait JsonTransport: Send + Sync {
    fn post_json(&self, body: &Value) -> Result<Value, RemoteError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &EndpointConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(config.timeout_secs))).build().into();
        let api_key = config.api_key_env.as_deref().and_then(|k| std::env::var(k).ok());
        Self { agent, url: config.url.clone(), api_key }
    }
}

impl JsonTransport for HttpTransport {
    fn post_json(&self, body: &Value) -> Result<Value, RemoteError> {
        let fail = |e: ureq::Error| RemoteError::Transport { endpoint: self.url.clone(), message: e.to_string() };
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(fail)?;
        resp.body_mut().read_json::<Value>().map_err(fail)
    }
}

/// Hex SHA-256 of the parts, separated by a unit separator so that
/// `("ab", "c")` and `("a", "bc")` differ.
pub fn cache_key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for (k, p) in parts.iter().enumerate() {
        if k > 0 {
            h.update([0x1f]);
        }
        h.update(p.as_bytes());
    }
    format!("{:x}", h.finalize())
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, RemoteError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| RemoteError::Cache { path: dir.display().to_string(), message: e.to_string() })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        match serde_json::from_str(&text) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {key}: {e}");
                None
            }
        }
    }

    /// Writes through a temporary file and a rename, so concurrent writers
    /// of the same key leave one complete entry (the last one wins).
    pub fn put(&self, key: &str, value: &Value) -> Result<(), RemoteError> {
        let target = self.path(key);
        let tmp = self.dir.join(format!(".{key}.{}.{}.tmp", std::process::id(), TMP_COUNTER.fetch_add(1, Ordering::Relaxed)));
        let err = |e: std::io::Error| RemoteError::Cache { path: target.display().to_string(), message: e.to_string() };
        fs::write(&tmp, value.to_string()).map_err(err)?;
        fs::rename(&tmp, &target).map_err(err)
    }
}

/// Looks `key` up in the cache, or calls the transport and stores the reply.
pub fn cached_call(cache: Option<&DiskCache>, key: &str, transport: &dyn JsonTransport, body: &Value) -> Result<Value, RemoteError> {
    if let Some(hit) = cache.and_then(|c| c.get(key)) {
        return Ok(hit);
    }
    let reply = transport.post_json(body)?;
    if let Some(c) = cache {
        c.put(key, &reply)?;
    }
    Ok(reply)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct Echo(AtomicUsize);

    impl JsonTransport for Echo {
        fn post_json(&self, body: &Value) -> Result<Value, RemoteError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(body.clone())
        }
    }

    #[test]
    fn key_separates_parts() {
        assert_ne!(cache_key(&["ab", "c"]), cache_key(&["a", "bc"]));
        assert_eq!(cache_key(&["x"]).len(), 64);
    }

    #[test]
    fn cache_hits_skip_transport() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path()).unwrap();
        let t = Echo(AtomicUsize::new(0));
        let body = serde_json::json!({"q": 1});
        let key = cache_key(&["q"]);
        assert_eq!(cached_call(Some(&cache), &key, &t, &body).unwrap(), body);
        assert_eq!(cached_call(Some(&cache), &key, &t, &body).unwrap(), body);
        assert_eq!(t.0.load(Ordering::SeqCst), 1);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
