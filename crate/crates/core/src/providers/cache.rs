//! Append-only JSONL record/replay cache in front of any provider.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Provider;
use crate::error::{Error, Result};
use crate::selection::PromptSpec;

/// One recorded completion. `response_text` is stored byte-exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub response_text: String,
    /// Seconds since the Unix epoch at record time.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Serve hits from the file; forward misses and record them.
    Record,
    /// Serve hits only; a miss is an error.
    ReplayOnly,
}

pub struct ReplayCache<P> {
    inner: P,
    mode: CacheMode,
    path: PathBuf,
    records: RwLock<HashMap<String, String>>,
    writer: Mutex<Option<File>>,
    hits: AtomicUsize,
    forwarded: AtomicUsize,
}

impl<P: Provider> ReplayCache<P> {
    /// Loads `path` if it exists. The file is created on the first recorded miss.
    pub fn open(inner: P, path: impl AsRef<Path>, mode: CacheMode) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut records = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: n + 1,
                    message: e.to_string(),
                })?;
                match records.get(&rec.key) {
                    Some(existing) if existing != &rec.response_text => {
                        return Err(Error::validation(format!(
                            "cache key {} recorded twice with different text (line {})",
                            rec.key,
                            n + 1
                        )));
                    }
                    Some(_) => {}
                    None => {
                        records.insert(rec.key, rec.response_text);
                    }
                }
            }
        }
        Ok(ReplayCache {
            inner,
            mode,
            path,
            records: RwLock::new(records),
            writer: Mutex::new(None),
            hits: AtomicUsize::new(0),
            forwarded: AtomicUsize::new(0),
        })
    }

    pub fn key(&self, prompt: &PromptSpec, question: &str, temperature: f64, index: usize) -> String {
        cache_key(
            self.inner.id(),
            self.inner.model(),
            &prompt.preamble(),
            question,
            temperature,
            index,
        )
    }

    pub fn len(&self) -> usize {
        self.records.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Requests passed through to the wrapped provider.
    pub fn forwarded(&self) -> usize {
        self.forwarded.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn append(&self, key: &str, text: &str) -> Result<()> {
        let mut writer = self.writer.lock().unwrap();
        {
            let mut records = self.records.write().unwrap();
            if records.contains_key(key) {
                return Ok(());
            }
            records.insert(key.to_string(), text.to_string());
        }
        if writer.is_none() {
            if let Some(dir) = self.path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            *writer = Some(OpenOptions::new().create(true).append(true).open(&self.path)?);
        }
        let rec = CacheRecord {
            key: key.to_string(),
            response_text: text.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let file = writer.as_mut().expect("opened above");
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.flush()?;
        Ok(())
    }
}

/// SHA-256 over the JSON encoding of the key fields.
pub fn cache_key(
    provider_id: &str,
    model: &str,
    prompt_text: &str,
    question: &str,
    temperature: f64,
    sample_index: usize,
) -> String {
    let material = serde_json::to_string(&(
        provider_id,
        model,
        prompt_text,
        question,
        temperature,
        sample_index,
    ))
    .expect("tuple of strings and numbers serializes");
    hex::encode(Sha256::digest(material.as_bytes()))
}

impl<P: Provider> Provider for ReplayCache<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn model(&self) -> &str {
        self.inner.model()
    }

    fn complete(&self, prompt: &PromptSpec, question: &str, temperature: f64, index: usize) -> Result<String> {
        let key = self.key(prompt, question, temperature, index);
        if let Some(text) = self.records.read().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(text.clone());
        }
        if self.mode == CacheMode::ReplayOnly {
            return Err(Error::CacheMiss(key));
        }
        self.forwarded.fetch_add(1, Ordering::SeqCst);
        let text = self.inner.complete(prompt, question, temperature, index)?;
        self.append(&key, &text)?;
        Ok(text)
    }
}
