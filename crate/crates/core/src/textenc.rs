//! Prompt embeddings.
//!
//! The built-in encoder is a frozen, deterministic stand-in for a language
//! model: every token is hashed to a fixed `±1/√D` vector, the token vectors
//! are contextualized causally with a bias-corrected exponential moving
//! average (decay 0.5) and the final state is returned. Embeddings are
//! precomputed into an [`EmbeddingCache`], which can also be imported from a
//! file produced by an external model.
//!
//! Cache file layout:
//!
//! ```text
//! SMET-EMB v1 dim=<D>
//! {"key":"<16 hex>","prompt_sha256":"<64 hex>","values":[...]}
//! ...
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CACHE_MAGIC: &str = "SMET-EMB v1";
const EMA_DECAY: f64 = 0.5;

/// Anything that maps a prompt to a fixed `dim`-sized vector.
pub trait TextEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, prompt: &str) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub key: u64,
    pub values: Vec<f64>,
}

pub fn prompt_sha256(prompt: &str) -> [u8; 32] {
    Sha256::digest(prompt.as_bytes()).into()
}

/// 64-bit content key: the leading eight bytes of the prompt's SHA-256.
pub fn prompt_key(prompt: &str) -> u64 {
    key_of(&prompt_sha256(prompt))
}

fn key_of(sha: &[u8; 32]) -> u64 {
    u64::from_be_bytes(sha[..8].try_into().expect("8 bytes"))
}

/// Alphanumeric runs become tokens; each punctuation character is its own
/// token; whitespace separates.
pub fn tokenize(prompt: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in prompt.char_indices() {
        if c.is_alphanumeric() {
            word_start.get_or_insert(i);
            continue;
        }
        if let Some(s) = word_start.take() {
            tokens.push(&prompt[s..i]);
        }
        if !c.is_whitespace() {
            tokens.push(&prompt[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = word_start {
        tokens.push(&prompt[s..]);
    }
    tokens
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Deterministic hash-and-average encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, token.as_bytes()));
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut out = Vec::with_capacity(self.dim);
        let mut bits = 0u64;
        for i in 0..self.dim {
            if i % 64 == 0 {
                bits = rng.next_u64();
            }
            out.push(if bits >> (i % 64) & 1 == 1 { scale } else { -scale });
        }
        out
    }

    pub fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        // zero-initialized EMA with bias correction, so the token weights
        // always sum to one and a lone token maps to its own vector
        let mut state = vec![0.0; self.dim];
        let mut remaining = 1.0;
        for token in &tokens {
            let v = self.token_vector(token);
            for (s, x) in state.iter_mut().zip(&v) {
                *s = EMA_DECAY * *s + (1.0 - EMA_DECAY) * x;
            }
            remaining *= EMA_DECAY;
        }
        let correction = 1.0 - remaining;
        state.iter_mut().for_each(|s| *s /= correction);
        Ok(TextEmbedding {
            key: prompt_key(prompt),
            values: state,
        })
    }
}

impl TextEmbedder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        Ok(self.encode(prompt)?.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheSource {
    Builtin,
    External,
}

#[derive(Debug, Clone, PartialEq)]
struct CacheEntry {
    sha256: [u8; 32],
    values: Vec<f64>,
}

/// Write-once, read-only prompt embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    source: CacheSource,
    entries: BTreeMap<u64, CacheEntry>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    prompt_sha256: String,
    values: Vec<f64>,
}

impl EmbeddingCache {
    pub fn empty(dim: usize, source: CacheSource) -> Self {
        Self {
            dim,
            source,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source(&self) -> CacheSource {
        self.source
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, prompt: &str) -> bool {
        let sha = prompt_sha256(prompt);
        self.entries
            .get(&key_of(&sha))
            .is_some_and(|e| e.sha256 == sha)
    }

    fn insert(&mut self, sha256: [u8; 32], values: Vec<f64>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding has {} values, cache dim is {}",
                values.len(),
                self.dim
            )));
        }
        let key = key_of(&sha256);
        match self.entries.get(&key) {
            Some(existing) if existing.sha256 != sha256 || existing.values != values => {
                Err(Error::CorruptCache(format!(
                    "key {key:016x} appears twice with different contents"
                )))
            }
            Some(_) => Ok(()),
            None => {
                self.entries.insert(key, CacheEntry { sha256, values });
                Ok(())
            }
        }
    }

    pub fn lookup(&self, prompt: &str) -> Result<TextEmbedding> {
        let sha = prompt_sha256(prompt);
        let key = key_of(&sha);
        match self.entries.get(&key) {
            Some(entry) if entry.sha256 == sha => Ok(TextEmbedding {
                key,
                values: entry.values.clone(),
            }),
            _ => Err(Error::CacheMiss {
                prompt: prompt.to_string(),
            }),
        }
    }

    /// Adds every prompt not already present, encoding it with `encoder`.
    pub fn extend<'a>(
        &mut self,
        encoder: &HashEncoder,
        prompts: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        for prompt in prompts {
            let sha = prompt_sha256(prompt);
            if self.entries.contains_key(&key_of(&sha)) {
                continue;
            }
            let emb = encoder.encode(prompt)?;
            self.insert(sha, emb.values)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_to(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("<cache>", e);
        writeln!(out, "{CACHE_MAGIC} dim={}", self.dim).map_err(io)?;
        for (key, entry) in &self.entries {
            let line = CacheLine {
                key: format!("{key:016x}"),
                prompt_sha256: hex::encode(entry.sha256),
                values: entry.values.clone(),
            };
            serde_json::to_writer(&mut *out, &line)?;
            writeln!(out).map_err(io)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, source: CacheSource) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), source)
    }

    pub fn read_from(reader: impl BufRead, source: CacheSource) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::CorruptCache("missing header".into()))?
            .map_err(|e| Error::io("<cache>", e))?;
        let dim = header
            .trim()
            .strip_prefix(CACHE_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("dim="))
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::CorruptCache(format!("bad header {header:?}")))?;
        let mut cache = Self::empty(dim, source);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("<cache>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CacheLine = serde_json::from_str(&line)
                .map_err(|e| Error::CorruptCache(format!("line {}: {e}", i + 2)))?;
            let mut sha = [0u8; 32];
            hex::decode_to_slice(&parsed.prompt_sha256, &mut sha)
                .map_err(|e| Error::CorruptCache(format!("line {}: {e}", i + 2)))?;
            let key = u64::from_str_radix(&parsed.key, 16)
                .map_err(|e| Error::CorruptCache(format!("line {}: {e}", i + 2)))?;
            if key != key_of(&sha) {
                return Err(Error::CorruptCache(format!(
                    "line {}: key does not match prompt hash",
                    i + 2
                )));
            }
            if parsed.values.iter().any(|x| !x.is_finite()) {
                return Err(Error::CorruptCache(format!("line {}: non-finite value", i + 2)));
            }
            cache.insert(sha, parsed.values)?;
        }
        Ok(cache)
    }
}

impl TextEmbedder for EmbeddingCache {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        Ok(self.lookup(prompt)?.values)
    }
}

/// Encodes every distinct prompt once.
pub fn precompute_cache<'a>(
    prompts: impl IntoIterator<Item = &'a str>,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingCache> {
    let mut cache = EmbeddingCache::empty(dim, CacheSource::Builtin);
    cache.extend(&HashEncoder::new(dim, seed), prompts)?;
    Ok(cache)
}

/// Loads externally computed embeddings and checks them against the model width.
pub fn import_external(path: impl AsRef<Path>, model_dim: usize) -> Result<EmbeddingCache> {
    let cache = EmbeddingCache::load(path, CacheSource::External)?;
    if cache.dim != model_dim {
        return Err(Error::Shape(format!(
            "external embeddings have dim {}, model expects {model_dim}",
            cache.dim
        )));
    }
    Ok(cache)
}

/// Cache lookups that fall back to the built-in encoder for prompts never
/// precomputed (rolled-out forecast segments). External caches do not fall back.
pub struct CachedEncoder<'a> {
    pub cache: &'a EmbeddingCache,
    pub fallback: Option<HashEncoder>,
}

impl TextEmbedder for CachedEncoder<'_> {
    fn dim(&self) -> usize {
        self.cache.dim
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        match (self.cache.lookup(prompt), &self.fallback) {
            (Ok(e), _) => Ok(e.values),
            (Err(Error::CacheMiss { .. }), Some(enc)) => enc.embed(prompt),
            (Err(e), _) => Err(e),
        }
    }
}
