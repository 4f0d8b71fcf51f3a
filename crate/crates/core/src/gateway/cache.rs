//! Append-only response cache.
//!
//! Each line is one JSON record holding the key, the full request, the
//! response and a SHA-256 checksum over the canonical `(key, request,
//! response)` encoding. A torn final line left by an interrupted writer is
//! dropped on open; any other bad line is corruption.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::types::{CompletionRequest, CompletionResponse};
use super::GatewayError;
use crate::seed::sha256_hex;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub request: CompletionRequest,
    pub response: CompletionResponse,
    pub checksum: String,
}

fn checksum(key: &str, req: &CompletionRequest, resp: &CompletionResponse) -> String {
    let body = serde_json::to_vec(&(key, req, resp)).expect("cache record serializes");
    sha256_hex(&body)
}

/// Cache key for a request against a backend.
pub fn cache_key(backend_id: &str, req: &CompletionRequest) -> String {
    let body = serde_json::to_vec(&(backend_id, req)).expect("request serializes");
    sha256_hex(&body)
}

pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, CompletionResponse>>,
    writer: Mutex<File>,
}

impl ResponseCache {
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let io = |source| GatewayError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut entries = HashMap::new();
        if path.exists() {
            let raw = std::fs::read(path).map_err(io)?;
            let complete_len = match raw.iter().rposition(|&b| b == b'\n') {
                Some(i) => i + 1,
                None => 0,
            };
            if complete_len < raw.len() {
                tracing::warn!(path = %path.display(), "dropping torn trailing cache line");
                let f = OpenOptions::new().write(true).open(path).map_err(io)?;
                f.set_len(complete_len as u64).map_err(io)?;
            }
            let reader = BufReader::new(&raw[..complete_len]);
            for (idx, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord =
                    serde_json::from_str(&line).map_err(|_| GatewayError::CacheCorruption {
                        path: path.to_path_buf(),
                        line: idx + 1,
                    })?;
                if checksum(&rec.key, &rec.request, &rec.response) != rec.checksum {
                    return Err(GatewayError::CacheCorruption {
                        path: path.to_path_buf(),
                        line: idx + 1,
                    });
                }
                entries.entry(rec.key).or_insert(rec.response);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        Ok(ResponseCache {
            path: path.to_path_buf(),
            entries: RwLock::new(entries),
            writer: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<CompletionResponse> {
        self.entries.read().get(key).cloned()
    }

    /// Store a response. If another caller stored the key first, the stored
    /// response wins and is returned.
    pub fn put(
        &self,
        key: &str,
        req: &CompletionRequest,
        resp: CompletionResponse,
    ) -> Result<CompletionResponse, GatewayError> {
        let mut file = self.writer.lock();
        if let Some(existing) = self.entries.read().get(key) {
            return Ok(existing.clone());
        }
        let rec = CacheRecord {
            key: key.to_string(),
            request: req.clone(),
            checksum: checksum(key, req, &resp),
            response: resp.clone(),
        };
        let mut line = serde_json::to_string(&rec).expect("cache record serializes");
        line.push('\n');
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| GatewayError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.entries.write().insert(key.to_string(), resp.clone());
        Ok(resp)
    }
}

/// Read every record of a cache file, verifying checksums.
pub fn read_records(path: &Path) -> Result<Vec<CacheRecord>, GatewayError> {
    let body = std::fs::read_to_string(path).map_err(|source| GatewayError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CacheRecord =
            serde_json::from_str(line).map_err(|_| GatewayError::CacheCorruption {
                path: path.to_path_buf(),
                line: idx + 1,
            })?;
        if checksum(&rec.key, &rec.request, &rec.response) != rec.checksum {
            return Err(GatewayError::CacheCorruption {
                path: path.to_path_buf(),
                line: idx + 1,
            });
        }
        out.push(rec);
    }
    Ok(out)
}
