//! Response embeddings: pass-through of precomputed vectors, an external
//! embedding service, or a deterministic n-gram hash embedder.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::QuestionRecord;
use crate::error::{Error, Result};
use crate::labeling::tokenize;
use crate::linalg::norm;

pub const EMBEDDING_API_KEY_ENV: &str = "EMBEDDING_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    Precomputed,
    Service,
    Hash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingProviderConfig {
    pub mode: EmbeddingMode,
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub dimension: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Seed mixed into the hash embedder.
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    32
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig {
            mode: EmbeddingMode::Precomputed,
            endpoint_url: None,
            dimension: None,
            batch_size: default_batch_size(),
            seed: 0,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("embedding batch_size must be at least 1".into()));
        }
        match self.mode {
            EmbeddingMode::Service if self.endpoint_url.is_none() => Err(Error::Config(
                "embedding mode `service` requires endpoint_url".into(),
            )),
            EmbeddingMode::Hash => match self.dimension {
                Some(d) if d >= 2 => Ok(()),
                _ => Err(Error::Config(
                    "embedding mode `hash` requires dimension >= 2".into(),
                )),
            },
            _ => Ok(()),
        }
    }
}

/// Anything that turns a batch of texts into one vector per text, in order.
pub trait EmbeddingBackend {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// Deterministic embedder used for tests and synthetic runs.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl EmbeddingBackend for HashEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| hash_embed(t, self.dimension, self.seed))
            .collect()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, parts: &[&str]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            // separator byte outside valid UTF-8 so ("ab","c") != ("a","bc")
            h ^= 0xff;
            h = h.wrapping_mul(FNV_PRIME);
        }
        for &b in part.as_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    // final avalanche (splitmix64 finalizer)
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Signed feature hashing of unigrams and bigrams, L2-normalized.
///
/// Texts with no tokens map to the first basis vector.
pub fn hash_embed(text: &str, dimension: usize, seed: u64) -> Result<Vec<f64>> {
    if dimension < 2 {
        return Err(Error::Config(format!(
            "hash embedding dimension must be >= 2, got {dimension}"
        )));
    }
    let tokens = tokenize(text);
    let mut v = vec![0.0; dimension];
    let mut add = |h: u64| {
        let bucket = (h % dimension as u64) as usize;
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        v[bucket] += sign;
    };
    for t in &tokens {
        add(fnv1a(seed, &[t]));
    }
    for pair in tokens.windows(2) {
        add(fnv1a(seed, &[&pair[0], &pair[1]]));
    }
    let n = norm(&v);
    if n == 0.0 {
        let mut e1 = vec![0.0; dimension];
        e1[0] = 1.0;
        return Ok(e1);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedReply {
    embeddings: Vec<Vec<f64>>,
}

/// Retry schedule for HTTP calls: `attempts` tries, delay doubling from `initial_backoff`.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub(crate) fn run<T>(&self, mut call: impl FnMut() -> std::result::Result<T, String>) -> Result<T> {
        let mut delay = self.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts.max(1) {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
            if attempt < self.attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(Error::Transport {
            attempts: self.attempts.max(1),
            message: last,
        })
    }
}

/// Posts JSON to `url`, optionally with a bearer token, and decodes the reply.
pub(crate) fn post_json<Req: Serialize, Rep: serde::de::DeserializeOwned>(
    url: &str,
    token: Option<&str>,
    body: &Req,
    retry: &RetryPolicy,
) -> Result<Rep> {
    retry.run(|| {
        let mut request = ureq::post(url);
        if let Some(token) = token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(|e| e.to_string())?;
        response
            .body_mut()
            .read_json::<Rep>()
            .map_err(|e| format!("malformed reply: {e}"))
    })
}

/// HTTP client for the embedding service wire protocol.
#[derive(Debug, Clone)]
pub struct HttpEmbeddingService {
    pub endpoint_url: String,
    pub token: Option<String>,
    pub retry: RetryPolicy,
}

impl HttpEmbeddingService {
    pub fn from_env(endpoint_url: impl Into<String>) -> Self {
        HttpEmbeddingService {
            endpoint_url: endpoint_url.into(),
            token: std::env::var(EMBEDDING_API_KEY_ENV).ok(),
            retry: RetryPolicy::default(),
        }
    }
}

impl EmbeddingBackend for HttpEmbeddingService {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let reply: EmbedReply = post_json(
            &self.endpoint_url,
            self.token.as_deref(),
            &EmbedRequest { texts },
            &self.retry,
        )?;
        Ok(reply.embeddings)
    }
}

/// Fills in every missing embedding according to `config`.
pub fn embed_dataset(
    records: Vec<QuestionRecord>,
    config: &EmbeddingProviderConfig,
) -> Result<Vec<QuestionRecord>> {
    config.validate()?;
    match config.mode {
        EmbeddingMode::Precomputed => {
            embed_dataset_with(records, config, &MissingEmbeddings)
        }
        EmbeddingMode::Hash => {
            let backend = HashEmbedder {
                dimension: config.dimension.unwrap_or_default(),
                seed: config.seed,
            };
            embed_dataset_with(records, config, &backend)
        }
        EmbeddingMode::Service => {
            let url = config.endpoint_url.clone().unwrap_or_default();
            embed_dataset_with(records, config, &HttpEmbeddingService::from_env(url))
        }
    }
}

struct MissingEmbeddings;

impl EmbeddingBackend for MissingEmbeddings {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Err(Error::Data(format!(
            "precomputed embedding mode, but {} response(s) lack embeddings (first: {:?})",
            texts.len(),
            texts.first().map(String::as_str).unwrap_or("")
        )))
    }
}

/// [`embed_dataset`] with an explicit backend. Existing embeddings are kept;
/// texts are deduplicated and sent in `config.batch_size` chunks.
pub fn embed_dataset_with(
    mut records: Vec<QuestionRecord>,
    config: &EmbeddingProviderConfig,
    backend: &dyn EmbeddingBackend,
) -> Result<Vec<QuestionRecord>> {
    let mut dim = config.dimension;
    let existing_dim = records
        .iter()
        .flat_map(|q| &q.responses)
        .find_map(|r| r.embedding.as_ref().map(Vec::len));
    if let (Some(want), Some(have)) = (dim, existing_dim) {
        if want != have {
            return Err(Error::Config(format!(
                "configured dimension {want} differs from existing embeddings of dimension {have}"
            )));
        }
    }
    dim = dim.or(existing_dim);

    let mut pending: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for r in records.iter().flat_map(|q| &q.responses) {
        if r.embedding.is_none() && !index.contains_key(&r.text) {
            index.insert(r.text.clone(), pending.len());
            pending.push(r.text.clone());
        }
    }
    if pending.is_empty() {
        return Ok(records);
    }

    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(pending.len());
    for batch in pending.chunks(config.batch_size.max(1)) {
        let reply = backend.embed_batch(batch)?;
        if reply.len() != batch.len() {
            return Err(Error::Data(format!(
                "embedding backend returned {} vectors for {} texts",
                reply.len(),
                batch.len()
            )));
        }
        for v in reply {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Config(format!(
                        "embedding dimension mismatch: backend returned {} but dataset uses {d}",
                        v.len()
                    )))
                }
                Some(_) => {}
            }
            vectors.push(v);
        }
    }

    for r in records.iter_mut().flat_map(|q| q.responses.iter_mut()) {
        if r.embedding.is_none() {
            r.embedding = Some(vectors[index[&r.text]].clone());
        }
    }
    Ok(records)
}
