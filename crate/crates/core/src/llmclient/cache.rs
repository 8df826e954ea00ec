use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompt::RenderedPrompt;
use super::LlmError;

/// Final outcome of one ask: every response received, in attempt order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub prompt_digest: String,
    pub model: String,
    pub system: String,
    pub prompt: String,
    pub responses: Vec<String>,
    pub attempts: u8,
    pub timestamp: u64,
}

impl CacheRecord {
    pub fn new(key: String, model: &str, prompt: &RenderedPrompt, responses: Vec<String>) -> Self {
        CacheRecord {
            key,
            prompt_digest: hex::encode(Sha256::digest(prompt.user.as_bytes())),
            model: model.to_string(),
            system: prompt.system.clone(),
            prompt: prompt.user.clone(),
            attempts: responses.len() as u8,
            responses,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

pub fn cache_key(model: &str, prompt: &RenderedPrompt) -> String {
    let mut h = Sha256::new();
    for part in [model, &prompt.system, &prompt.user] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Append-only JSON-lines cache. Lookups are served from memory; every new
/// record is written to disk before it is returned to the caller.
#[derive(Debug, Default)]
pub struct Cache {
    path: Option<PathBuf>,
    records: Mutex<HashMap<String, CacheRecord>>,
    file: Mutex<Option<File>>,
}

impl Cache {
    pub fn in_memory() -> Self {
        Cache::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        let mut records = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(r) => {
                        records.insert(r.key.clone(), r);
                    }
                    Err(e) => log::warn!("ignoring unreadable cache line {} in {}: {e}", n + 1, path.display()),
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Cache {
            path: Some(path),
            records: Mutex::new(records),
            file: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CacheRecord> {
        self.records.lock().unwrap().get(key).cloned()
    }

    pub fn insert(&self, record: CacheRecord) -> Result<(), LlmError> {
        let mut file = self.file.lock().unwrap();
        if let Some(f) = file.as_mut() {
            let mut line = serde_json::to_string(&record).map_err(|e| LlmError::Config(e.to_string()))?;
            line.push('\n');
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.records.lock().unwrap().insert(record.key.clone(), record);
        Ok(())
    }
}
