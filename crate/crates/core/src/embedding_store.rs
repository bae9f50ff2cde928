//! Fixed-dimension embedding index with exact cosine kNN.
//!
//! Vectors come from an external encoder; this module only loads, validates
//! and searches them. Search is a brute-force scan, parallel under the
//! `parallel` feature, with a deterministic (score desc, id asc) ordering.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::llm_gateway::RetryPolicy;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch for {id:?}: expected {expected}, got {actual}")]
    DimensionMismatch { id: String, expected: usize, actual: usize },
    #[error("non-finite component in vector {0:?}")]
    NonFinite(String),
    #[error("zero-norm vector {0:?}")]
    ZeroNorm(String),
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("no embedding for id {0:?}")]
    Missing(String),
    #[error("empty embedding set in {0}")]
    Empty(PathBuf),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("unknown source tag {0:?}")]
    UnknownTag(String),
    #[error("embedding service error: {0}")]
    Service(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    SimcseStyle,
    FinetunedStyle,
    #[default]
    Other,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SimcseStyle => "simcse-style",
            Self::FinetunedStyle => "finetuned-style",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceTag {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simcse-style" => Ok(Self::SimcseStyle),
            "finetuned-style" => Ok(Self::FinetunedStyle),
            "other" => Ok(Self::Other),
            _ => Err(EmbeddingError::UnknownTag(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    #[serde(rename = "id")]
    pub example_id: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub example_id: String,
    pub score: f64,
}

/// Validated, immutable embedding index.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dimension: usize,
    source_tag: SourceTag,
    records: Vec<EmbeddingRecord>,
    norms: Vec<f64>,
    by_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    dimension: usize,
    source_tag: SourceTag,
    records: Vec<EmbeddingRecord>,
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_vector(id: &str, v: &[f64]) -> Result<f64, EmbeddingError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::NonFinite(id.to_string()));
    }
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbeddingError::ZeroNorm(id.to_string()));
    }
    Ok(norm)
}

impl VectorIndex {
    pub fn new(records: Vec<EmbeddingRecord>, source_tag: SourceTag) -> Result<Self, EmbeddingError> {
        let dimension = match records.first() {
            Some(r) => r.vector.len(),
            None => return Err(EmbeddingError::Empty(PathBuf::new())),
        };
        if dimension == 0 {
            return Err(EmbeddingError::DimensionMismatch {
                id: records[0].example_id.clone(),
                expected: 1,
                actual: 0,
            });
        }
        let mut norms = Vec::with_capacity(records.len());
        let mut by_id = HashMap::with_capacity(records.len());
        for (pos, r) in records.iter().enumerate() {
            if r.vector.len() != dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    id: r.example_id.clone(),
                    expected: dimension,
                    actual: r.vector.len(),
                });
            }
            norms.push(check_vector(&r.example_id, &r.vector)?);
            if by_id.insert(r.example_id.clone(), pos).is_some() {
                return Err(EmbeddingError::DuplicateId(r.example_id.clone()));
            }
        }
        Ok(Self {
            dimension,
            source_tag,
            records,
            norms,
            by_id,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn source_tag(&self) -> SourceTag {
        self.source_tag
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn get(&self, example_id: &str) -> Option<&[f64]> {
        self.by_id
            .get(example_id)
            .map(|&pos| self.records[pos].vector.as_slice())
    }

    /// Saves the index (dimension, source tag and records) as one JSON document.
    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let file = IndexFile {
            dimension: self.dimension,
            source_tag: self.source_tag,
            records: self.records.clone(),
        };
        let body = serde_json::to_string(&file).expect("index serializes");
        fs::write(path, body).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let body = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: IndexFile = serde_json::from_str(&body).map_err(|e| EmbeddingError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let index = Self::new(file.records, file.source_tag).map_err(|e| match e {
            EmbeddingError::Empty(_) => EmbeddingError::Empty(path.to_path_buf()),
            other => other,
        })?;
        if index.dimension != file.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                id: "<header>".into(),
                expected: file.dimension,
                actual: index.dimension,
            });
        }
        Ok(index)
    }
}

/// Reads embedding JSONL (`{"id": .., "vector": [..]}` per line).
pub fn read_embedding_jsonl(path: &Path) -> Result<Vec<EmbeddingRecord>, EmbeddingError> {
    let content = fs::read_to_string(path).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(line).map_err(|e| EmbeddingError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    if out.is_empty() {
        return Err(EmbeddingError::Empty(path.to_path_buf()));
    }
    Ok(out)
}

pub fn ingest_embeddings(path: &Path, source_tag: SourceTag) -> Result<VectorIndex, EmbeddingError> {
    VectorIndex::new(read_embedding_jsonl(path)?, source_tag)
}

// Both `cosine_similarity` and the kNN scan go through this so their scores
// are bit-identical.
fn cosine_with_norms(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    // `+ 0.0` folds -0.0 into 0.0 so score ordering agrees with `==`.
    (dot / (nu * nv)).clamp(-1.0, 1.0) + 0.0
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch {
            id: "<query>".into(),
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = check_vector("<u>", u)?;
    let nv = check_vector("<v>", v)?;
    Ok(cosine_with_norms(u, v, nu, nv))
}

/// Ranking order: score descending, then example id ascending.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.example_id.cmp(&b.example_id))
}

fn check_query(index: &VectorIndex, query: &[f64]) -> Result<f64, EmbeddingError> {
    if query.len() != index.dimension {
        return Err(EmbeddingError::DimensionMismatch {
            id: "<query>".into(),
            expected: index.dimension,
            actual: query.len(),
        });
    }
    check_vector("<query>", query)
}

fn score_at(index: &VectorIndex, query: &[f64], qnorm: f64, pos: usize) -> Neighbor {
    let r = &index.records[pos];
    Neighbor {
        example_id: r.example_id.clone(),
        score: cosine_with_norms(query, &r.vector, qnorm, index.norms[pos]),
    }
}

/// Scores every record passing `keep`, one thread.
pub fn score_all_sequential<F>(index: &VectorIndex, query: &[f64], qnorm: f64, keep: F) -> Vec<Neighbor>
where
    F: Fn(&str) -> bool,
{
    (0..index.records.len())
        .filter(|&pos| keep(&index.records[pos].example_id))
        .map(|pos| score_at(index, query, qnorm, pos))
        .collect()
}

/// Scores every record passing `keep` on the rayon pool.
#[cfg(feature = "parallel")]
pub fn score_all_parallel<F>(index: &VectorIndex, query: &[f64], qnorm: f64, keep: F) -> Vec<Neighbor>
where
    F: Fn(&str) -> bool + Sync,
{
    use rayon::prelude::*;
    (0..index.records.len())
        .into_par_iter()
        .filter(|&pos| keep(&index.records[pos].example_id))
        .map(|pos| score_at(index, query, qnorm, pos))
        .collect()
}

fn top_k(mut scored: Vec<Neighbor>, k: usize) -> Vec<Neighbor> {
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, neighbor_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(neighbor_order);
    scored
}

pub fn knn(index: &VectorIndex, query: &[f64], k: usize) -> Result<Vec<Neighbor>, EmbeddingError> {
    knn_filtered(index, query, k, |_| true)
}

/// kNN restricted to records whose id passes `keep`.
pub fn knn_filtered<F>(index: &VectorIndex, query: &[f64], k: usize, keep: F) -> Result<Vec<Neighbor>, EmbeddingError>
where
    F: Fn(&str) -> bool + Sync,
{
    let qnorm = check_query(index, query)?;
    if k == 0 {
        return Ok(Vec::new());
    }
    #[cfg(feature = "parallel")]
    let scored = score_all_parallel(index, query, qnorm, keep);
    #[cfg(not(feature = "parallel"))]
    let scored = score_all_sequential(index, query, qnorm, keep);
    Ok(top_k(scored, k))
}

/// Single-threaded kNN, available regardless of features.
pub fn knn_sequential(index: &VectorIndex, query: &[f64], k: usize) -> Result<Vec<Neighbor>, EmbeddingError> {
    let qnorm = check_query(index, query)?;
    Ok(top_k(score_all_sequential(index, query, qnorm, |_| true), k))
}

/// Where query vectors for test inputs come from.
pub trait QuerySource: Send + Sync {
    fn embed(&self, example_id: &str, text: &str) -> Result<Vec<f64>, EmbeddingError>;
}

/// Precomputed vectors keyed by example id.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbeddings {
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn from_records(records: Vec<EmbeddingRecord>) -> Result<Self, EmbeddingError> {
        let mut vectors = HashMap::with_capacity(records.len());
        let mut seen = HashSet::new();
        for r in records {
            check_vector(&r.example_id, &r.vector)?;
            if !seen.insert(r.example_id.clone()) {
                return Err(EmbeddingError::DuplicateId(r.example_id));
            }
            vectors.insert(r.example_id, r.vector);
        }
        Ok(Self { vectors })
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        Self::from_records(read_embedding_jsonl(path)?)
    }
}

impl QuerySource for PrecomputedEmbeddings {
    fn embed(&self, example_id: &str, _text: &str) -> Result<Vec<f64>, EmbeddingError> {
        self.vectors
            .get(example_id)
            .cloned()
            .ok_or_else(|| EmbeddingError::Missing(example_id.to_string()))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// HTTP embedding service: POST `{texts: [..]}` → `{vectors: [[..]]}`.
#[derive(Debug, Clone)]
pub struct EmbeddingService {
    url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl EmbeddingService {
    pub fn new(url: impl Into<String>, api_key: Option<String>, retry: RetryPolicy) -> Self {
        Self {
            url: url.into(),
            api_key,
            retry,
        }
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let body = EmbedRequest { texts };
        let resp: EmbedResponse = self
            .retry
            .run(|| {
                let mut req = ureq::post(&self.url);
                if let Some(key) = &self.api_key {
                    req = req.header("Authorization", &format!("Bearer {key}"));
                }
                match req.send_json(&body) {
                    Ok(mut r) => r
                        .body_mut()
                        .read_json::<EmbedResponse>()
                        .map_err(|e| crate::llm_gateway::ProviderError::Permanent(e.to_string())),
                    Err(e) => Err(crate::llm_gateway::classify_http_error(e)),
                }
            })
            .map_err(|e| EmbeddingError::Service(e.to_string()))?;
        if resp.vectors.len() != texts.len() {
            return Err(EmbeddingError::Service(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                resp.vectors.len()
            )));
        }
        Ok(resp.vectors)
    }
}

impl QuerySource for EmbeddingService {
    fn embed(&self, _example_id: &str, text: &str) -> Result<Vec<f64>, EmbeddingError> {
        let mut v = self.embed_batch(&[text])?;
        Ok(v.remove(0))
    }
}

/// Fetches a query vector and checks it against the index dimension.
pub fn query_embedding(
    source: &dyn QuerySource,
    example_id: &str,
    text: &str,
    dimension: usize,
) -> Result<Vec<f64>, EmbeddingError> {
    let v = source.embed(example_id, text)?;
    if v.len() != dimension {
        return Err(EmbeddingError::DimensionMismatch {
            id: example_id.to_string(),
            expected: dimension,
            actual: v.len(),
        });
    }
    check_vector(example_id, &v)?;
    Ok(v)
}
