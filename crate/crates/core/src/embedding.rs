//! Sentence-embedding providers, vector kernels and the on-disk embedding cache.
//!
//! Provider output is rounded to `f32` (the cache's storage precision) and
//! then normalized in `f64`, so a vector read back from the cache is
//! bit-identical to a freshly computed one.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use crate::kb::canonical_key;

const CACHE_MAGIC: &[u8; 8] = b"MGOEMB01";

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("non-finite vector entry")]
    NonFinite,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("provider failed for indices {indices:?}: {message}")]
    Provider {
        indices: Vec<usize>,
        message: String,
    },
    #[error("embedding cache {path} belongs to {found:?}, not {expected:?}")]
    IdentityMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("embedding cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_text_key: String,
}

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite);
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<(), EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch(u.len(), v.len()));
    }
    Ok(())
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    check_dims(u, v)?;
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    let d = dot(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn euclidean(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    check_dims(u, v)?;
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// A text encoder. The same identity must always map a text to the same vector.
pub trait EmbeddingProvider: Send + Sync {
    fn identity(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError>;
}

/// Feature-hashed bag of words: lowercase alphanumeric tokens are hashed
/// (FNV-1a 64) into signed buckets. Offline and deterministic.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    identity: String,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        HashingEmbedder {
            dimension,
            identity: format!("stub-hashing-bow-d{dimension}-v1"),
        }
    }

    fn vector(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dimension];
        let lower = text.to_lowercase();
        let mut any = false;
        for tok in lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            any = true;
            let h = fnv1a(tok.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dimension as u64) as usize] += sign;
        }
        if !any || v.iter().all(|x| *x == 0.0) {
            let h = fnv1a(lower.as_bytes());
            v[(h % self.dimension as u64) as usize] = 1.0;
        }
        v
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashingEmbedder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// OpenAI-compatible `/embeddings` endpoint.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    identity: String,
    max_attempts: u32,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dimension: usize,
    ) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| EmbeddingError::Provider {
                indices: vec![],
                message: e.to_string(),
            })?;
        let model = model.into();
        Ok(RemoteEmbedder {
            client,
            endpoint: endpoint.into(),
            identity: format!("remote:{model}"),
            model,
            api_key,
            dimension,
            max_attempts: 3,
        })
    }

    fn call(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, String> {
        let mut req = self
            .client
            .post(&self.endpoint)
            .json(&json!({"model": self.model, "input": texts}));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("HTTP {}", resp.status()));
        }
        let body: Value = resp.json().map_err(|e| e.to_string())?;
        let data = body
            .get("data")
            .and_then(Value::as_array)
            .ok_or("response has no data array")?;
        let mut out = vec![Vec::new(); texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let i = item
                .get("index")
                .and_then(Value::as_u64)
                .map_or(pos, |i| i as usize);
            let emb = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or("data item has no embedding")?;
            if i < out.len() {
                out[i] = emb
                    .iter()
                    .filter_map(Value::as_f64)
                    .map(|x| x as f32)
                    .collect();
            }
        }
        Ok(out)
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbeddingError> {
        let mut last = String::new();
        for attempt in 0..self.max_attempts {
            match self.call(texts) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    tracing::warn!(attempt, error = %e, "embedding request failed");
                    last = e;
                    std::thread::sleep(Duration::from_millis(500 << attempt));
                }
            }
        }
        Err(EmbeddingError::Provider {
            indices: (0..texts.len()).collect(),
            message: last,
        })
    }
}

/// Append-only binary cache keyed by canonical text key.
///
/// Layout (little-endian): magic `MGOEMB01`, u32 identity length, identity
/// bytes, u32 dimension; then records of u32 key length, key bytes and
/// `dimension` f32 values.
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    identity: String,
    dimension: usize,
    entries: HashMap<String, Vec<f32>>,
    file: Option<File>,
}

impl EmbeddingCache {
    pub fn in_memory(identity: &str, dimension: usize) -> Self {
        EmbeddingCache {
            path: None,
            identity: identity.to_string(),
            dimension,
            entries: HashMap::new(),
            file: None,
        }
    }

    pub fn open(path: &Path, identity: &str, dimension: usize) -> Result<Self, EmbeddingError> {
        let cache_err = |message: String| EmbeddingError::Cache {
            path: path.to_path_buf(),
            message,
        };
        let mut cache = Self::in_memory(identity, dimension);
        cache.path = Some(path.to_path_buf());
        if path.exists() {
            let mut r = BufReader::new(File::open(path).map_err(|e| cache_err(e.to_string()))?);
            let mut magic = [0u8; 8];
            r.read_exact(&mut magic)
                .map_err(|e| cache_err(e.to_string()))?;
            if &magic != CACHE_MAGIC {
                return Err(cache_err("bad magic".into()));
            }
            let found = read_string(&mut r).map_err(|e| cache_err(e.to_string()))?;
            let dim = read_u32(&mut r).map_err(|e| cache_err(e.to_string()))? as usize;
            if found != identity || dim != dimension {
                return Err(EmbeddingError::IdentityMismatch {
                    path: path.to_path_buf(),
                    expected: format!("{identity}/d{dimension}"),
                    found: format!("{found}/d{dim}"),
                });
            }
            loop {
                let key = match read_string(&mut r) {
                    Ok(k) => k,
                    Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                    Err(e) => return Err(cache_err(e.to_string())),
                };
                let mut buf = vec![0u8; 4 * dim];
                if let Err(e) = r.read_exact(&mut buf) {
                    // a torn trailing record from an interrupted append
                    tracing::warn!(error = %e, "ignoring truncated embedding cache record");
                    break;
                }
                let v = buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                cache.entries.insert(key, v);
            }
            let file = OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| cache_err(e.to_string()))?;
            cache.file = Some(file);
        } else {
            let mut file = File::create(path).map_err(|e| cache_err(e.to_string()))?;
            let mut header = CACHE_MAGIC.to_vec();
            header.extend((identity.len() as u32).to_le_bytes());
            header.extend(identity.as_bytes());
            header.extend((dimension as u32).to_le_bytes());
            file.write_all(&header)
                .map_err(|e| cache_err(e.to_string()))?;
            cache.file = Some(file);
        }
        Ok(cache)
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Vec<f32>> {
        self.entries.get(key)
    }

    pub fn insert(&mut self, key: String, values: Vec<f32>) -> Result<(), EmbeddingError> {
        if values.len() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch(
                values.len(),
                self.dimension,
            ));
        }
        if let Some(file) = &mut self.file {
            let mut rec = Vec::with_capacity(8 + key.len() + 4 * values.len());
            rec.extend((key.len() as u32).to_le_bytes());
            rec.extend(key.as_bytes());
            for x in &values {
                rec.extend(x.to_le_bytes());
            }
            file.write_all(&rec).map_err(|e| EmbeddingError::Cache {
                path: self.path.clone().unwrap_or_default(),
                message: e.to_string(),
            })?;
        }
        self.entries.insert(key, values);
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> std::io::Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// A provider paired with its cache. Safe to share across threads.
pub struct Embedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Mutex<EmbeddingCache>,
    provider_calls: Mutex<u64>,
}

impl Embedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>) -> Self {
        let cache = EmbeddingCache::in_memory(provider.identity(), provider.dimension());
        Embedder {
            provider,
            cache: Mutex::new(cache),
            provider_calls: Mutex::new(0),
        }
    }

    pub fn with_cache(
        provider: Arc<dyn EmbeddingProvider>,
        path: &Path,
    ) -> Result<Self, EmbeddingError> {
        let cache = EmbeddingCache::open(path, provider.identity(), provider.dimension())?;
        Ok(Embedder {
            provider,
            cache: Mutex::new(cache),
            provider_calls: Mutex::new(0),
        })
    }

    pub fn stub() -> Self {
        Self::new(Arc::new(HashingEmbedder::default()))
    }

    pub fn identity(&self) -> &str {
        self.provider.identity()
    }

    pub fn dimension(&self) -> usize {
        self.provider.dimension()
    }

    /// Number of provider invocations so far (one per batch of cache misses).
    pub fn provider_calls(&self) -> u64 {
        *self.provider_calls.lock().unwrap()
    }

    /// One normalized vector per text, in order. Cache misses are deduplicated
    /// and sent to the provider in a single batch.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let keys: Vec<String> = texts.iter().map(|t| canonical_key(&[t])).collect();
        let mut missing: Vec<(String, String)> = Vec::new();
        {
            let cache = self.cache.lock().unwrap();
            let mut queued = std::collections::HashSet::new();
            for (t, k) in texts.iter().zip(&keys) {
                if cache.get(k).is_none() && queued.insert(k.clone()) {
                    missing.push((k.clone(), t.trim().to_string()));
                }
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|(_, t)| t.clone()).collect();
            *self.provider_calls.lock().unwrap() += 1;
            let vectors = self.provider.embed(&batch)?;
            let mut cache = self.cache.lock().unwrap();
            let mut failed = Vec::new();
            for ((k, _), v) in missing
                .iter()
                .zip(vectors.iter().chain(std::iter::repeat(&Vec::new())))
            {
                if v.len() != self.provider.dimension() || v.iter().any(|x| !x.is_finite()) {
                    failed.push(k.clone());
                    continue;
                }
                if cache.get(k).is_none() {
                    cache.insert(k.clone(), v.clone())?;
                }
            }
            if !failed.is_empty() {
                let indices = keys
                    .iter()
                    .enumerate()
                    .filter(|(_, k)| failed.contains(k))
                    .map(|(i, _)| i)
                    .collect();
                return Err(EmbeddingError::Provider {
                    indices,
                    message: "provider returned malformed vectors".into(),
                });
            }
        }
        let cache = self.cache.lock().unwrap();
        keys.into_iter()
            .map(|k| {
                let raw: Vec<f64> = cache
                    .get(&k)
                    .expect("cached above")
                    .iter()
                    .map(|x| *x as f64)
                    .collect();
                Ok(EmbeddingVector {
                    values: normalize(&raw)?,
                    source_text_key: k,
                })
            })
            .collect()
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(self.embed_batch(&[text.to_string()])?.remove(0))
    }
}
