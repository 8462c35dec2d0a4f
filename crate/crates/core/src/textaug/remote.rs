//! Chat-completions HTTP client and the on-disk description cache.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable holding the bearer token.
pub const DEFAULT_TOKEN_ENV: &str = "FLEXMATCH_API_TOKEN";

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub token_env: String,
    pub attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token_env: DEFAULT_TOKEN_ENV.to_string(),
            attempts: 3,
            base_delay: Duration::from_secs(1),
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Debug)]
pub struct RemoteClient {
    config: RemoteConfig,
    agent: ureq::Agent,
    requests: AtomicUsize,
}

impl RemoteClient {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self {
            config,
            agent,
            requests: AtomicUsize::new(0),
        }
    }

    pub fn model(&self) -> &str {
        &self.config.model
    }

    /// HTTP requests issued so far, retries included.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Sends one prompt, retrying with exponential backoff.
    pub fn describe(&self, prompt: &str) -> Result<String> {
        let mut delay = self.config.base_delay;
        let mut last = String::new();
        for attempt in 0..self.config.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.request(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("attempt {} of {} failed: {e}", attempt + 1, self.config.attempts);
                    last = e;
                }
            }
        }
        Err(Error::provider(format!(
            "{} failed after {} attempts: {last}",
            self.config.endpoint, self.config.attempts
        )))
    }

    fn request(&self, prompt: &str) -> std::result::Result<String, String> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Ok(token) = std::env::var(&self.config.token_env) {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let value: Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| "response has no message content".to_string())?;
        Ok(text.to_string())
    }
}

/// One cached answer with the metadata it was produced under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedDescription {
    pub class: String,
    pub prompt: String,
    pub model: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub description: String,
}

impl CachedDescription {
    pub fn new(class: &str, prompt: &str, model: &str, description: &str) -> Self {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            class: class.to_string(),
            prompt: prompt.to_string(),
            model: model.to_string(),
            timestamp,
            description: description.to_string(),
        }
    }
}

/// Directory of JSON files keyed by `sha256(prompt, class)`.
#[derive(Debug, Clone)]
pub struct DescriptionCache {
    dir: PathBuf,
}

impl DescriptionCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, prompt: &str, class: &str) -> PathBuf {
        let mut h = Sha256::new();
        h.update(prompt.as_bytes());
        h.update([0u8]);
        h.update(class.as_bytes());
        self.dir.join(format!("{}.json", hex::encode(h.finalize())))
    }

    pub fn get(&self, prompt: &str, class: &str) -> Option<CachedDescription> {
        let path = self.path(prompt, class);
        let text = fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<CachedDescription>(&text) {
            Ok(c) if c.prompt == prompt && c.class == class => Some(c),
            Ok(_) => None,
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    /// Write-then-rename so concurrent writers never leave a torn file.
    pub fn put(&self, entry: &CachedDescription) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(&entry.prompt, &entry.class);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let json = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        tmp.write_all(&json).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}
