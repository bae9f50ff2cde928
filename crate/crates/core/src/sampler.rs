//! Demonstration selection and ordering.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Example;
use crate::embedding_store::{knn_filtered, EmbeddingError, VectorIndex};

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("knn strategy needs a vector index")]
    MissingIndex,
    #[error("knn strategy needs a query vector")]
    MissingQuery,
    #[error("candidate {0:?} has no similarity score")]
    MissingScore(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Knn,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoOrder {
    Random,
    #[default]
    LowToHigh,
    HighToLow,
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "knn" => Ok(Self::Knn),
            other => Err(format!("unknown sampler strategy {other:?}")),
        }
    }
}

impl FromStr for DemoOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "low-to-high" => Ok(Self::LowToHigh),
            "high-to-low" => Ok(Self::HighToLow),
            other => Err(format!("unknown demo order {other:?}")),
        }
    }
}

impl fmt::Display for DemoOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::LowToHigh => "low-to-high",
            Self::HighToLow => "high-to-low",
        })
    }
}

fn default_k() -> usize {
    16
}

fn default_tag() -> String {
    "default".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub order: DemoOrder,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tag")]
    pub demo_corpus_tag: String,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Knn,
            k: default_k(),
            order: DemoOrder::LowToHigh,
            seed: 0,
            demo_corpus_tag: default_tag(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoCandidate {
    pub example_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub candidates: Vec<DemoCandidate>,
    /// Fewer than `k` eligible demonstrations were available.
    pub truncated: bool,
}

/// Per-example seed: the run seed mixed with the example id.
pub fn derive_seed(seed: u64, example_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(example_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Picks up to `k` demonstrations for `test` out of `train_ids`, never
/// returning the test example's own id.
pub fn select(
    config: &SamplerConfig,
    test: &Example,
    train_ids: &[String],
    index: Option<&VectorIndex>,
    query: Option<&[f64]>,
) -> Result<Selection, SamplerError> {
    let k = config.k;
    match config.strategy {
        Strategy::Random => {
            let mut pool: Vec<&String> = train_ids.iter().filter(|id| **id != test.id).collect();
            let truncated = k > pool.len();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &test.id));
            let take = k.min(pool.len());
            let (chosen, _) = pool.partial_shuffle(&mut rng, take);
            Ok(Selection {
                candidates: chosen
                    .iter()
                    .map(|id| DemoCandidate {
                        example_id: (*id).clone(),
                        score: None,
                    })
                    .collect(),
                truncated,
            })
        }
        Strategy::Knn => {
            let index = index.ok_or(SamplerError::MissingIndex)?;
            let query = query.ok_or(SamplerError::MissingQuery)?;
            let eligible: HashSet<&str> = train_ids
                .iter()
                .map(String::as_str)
                .filter(|id| *id != test.id)
                .collect();
            let neighbors = knn_filtered(index, query, k, |id| eligible.contains(id))?;
            let available = index
                .records()
                .iter()
                .filter(|r| eligible.contains(r.example_id.as_str()))
                .count();
            if k > available {
                tracing::warn!(test = %test.id, k, available, "fewer eligible demonstrations than k");
            }
            Ok(Selection {
                candidates: neighbors
                    .into_iter()
                    .map(|n| DemoCandidate {
                        example_id: n.example_id,
                        score: Some(n.score),
                    })
                    .collect(),
                truncated: k > available,
            })
        }
    }
}

/// Orders candidates for rendering. Low-to-high puts the most similar
/// demonstration last, right before the test input; ties sort by id
/// descending so the order is the exact reverse of kNN rank.
pub fn order(candidates: &[DemoCandidate], order: DemoOrder, seed: u64) -> Result<Vec<DemoCandidate>, SamplerError> {
    let mut out = candidates.to_vec();
    match order {
        DemoOrder::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.shuffle(&mut rng);
        }
        DemoOrder::LowToHigh | DemoOrder::HighToLow => {
            if let Some(c) = out.iter().find(|c| c.score.is_none()) {
                return Err(SamplerError::MissingScore(c.example_id.clone()));
            }
            out.sort_by(|a, b| {
                let (sa, sb) = (a.score.unwrap_or_default(), b.score.unwrap_or_default());
                sa.total_cmp(&sb).then_with(|| b.example_id.cmp(&a.example_id))
            });
            if order == DemoOrder::HighToLow {
                out.reverse();
            }
        }
    }
    Ok(out)
}
