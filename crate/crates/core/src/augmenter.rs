//! Offline clue and reasoning generation for the demonstration store.
//!
//! The store is append-only JSONL, one [`AugmentedDemonstration`] per line.
//! When an id appears more than once the last line wins; [`compact_store`]
//! rewrites the file with one line per id.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Verbalizer};
use crate::llm_gateway::{Gateway, GatewayError, SamplingParams};
use crate::prompting::{render_clue_gen, render_reason_gen, PromptError, PromptMode, PromptTemplate, TokenBudget};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("{stage} generation for {id:?} was empty after retry")]
    EmptyGeneration { stage: &'static str, id: String },
    #[error("example {id:?} has label id {label_id} outside the verbalizer")]
    UnknownLabel { id: String, label_id: usize },
    #[error("augmentation in {0:?} mode needs a clue template")]
    MissingClueTemplate(AugmentMode),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AugmentError + '_ {
    move |source| AugmentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A training example with its generated clues and reasoning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedDemonstration {
    #[serde(rename = "id")]
    pub example_id: String,
    pub text: String,
    /// Empty for reasoning-only records.
    pub clues: String,
    pub reasoning: String,
    pub label_word: String,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    /// Clues, then reasoning conditioned on them.
    Carp,
    /// Reasoning only.
    Cot,
}

/// Templates and request settings for one augmentation run. Templates are
/// expected to have their `{labels}` bound already.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    pub clue_template: Option<PromptTemplate>,
    pub reason_template: PromptTemplate,
    pub budget: TokenBudget,
    pub params: SamplingParams,
    /// Examples handled per parallel batch before appending to the store.
    pub chunk_size: usize,
    /// Regenerate ids whose latest stored record is invalid.
    pub retry_invalid: bool,
}

impl AugmentConfig {
    pub fn new(mode: AugmentMode, clue_template: Option<PromptTemplate>, reason_template: PromptTemplate) -> Self {
        Self {
            mode,
            clue_template,
            reason_template,
            budget: TokenBudget::default(),
            params: SamplingParams::default(),
            chunk_size: 32,
            retry_invalid: false,
        }
    }
}

fn label_word<'a>(example: &Example, verbalizer: &'a Verbalizer) -> Result<&'a str, AugmentError> {
    verbalizer
        .word(example.label_id)
        .ok_or_else(|| AugmentError::UnknownLabel {
            id: example.id.clone(),
            label_id: example.label_id,
        })
}

/// Asks for a completion, retrying once with the next run index when the
/// trimmed answer is empty.
fn generate(
    gateway: &Gateway,
    params: &SamplingParams,
    prompt: &str,
    stage: &'static str,
    id: &str,
) -> Result<String, AugmentError> {
    for run_index in 0..2 {
        let mut req = params.request(prompt);
        req.run_index = run_index;
        let (resp, _) = gateway.complete(&req)?;
        let text = resp.text.trim();
        if !text.is_empty() {
            return Ok(text.to_string());
        }
        tracing::debug!(id, stage, run_index, "empty generation");
    }
    Err(AugmentError::EmptyGeneration {
        stage,
        id: id.to_string(),
    })
}

pub fn generate_clues(
    example: &Example,
    verbalizer: &Verbalizer,
    gateway: &Gateway,
    config: &AugmentConfig,
) -> Result<String, AugmentError> {
    let template = config
        .clue_template
        .as_ref()
        .ok_or(AugmentError::MissingClueTemplate(config.mode))?;
    let word = label_word(example, verbalizer)?;
    let prompt = render_clue_gen(template, &example.text, word, &config.budget)?;
    generate(gateway, &config.params, &prompt.text, "clue", &example.id)
}

/// Reasoning for `example`. `clues` must be non-empty for clue-based
/// templates and is ignored by reasoning-only ones.
pub fn generate_reasoning(
    example: &Example,
    clues: Option<&str>,
    verbalizer: &Verbalizer,
    gateway: &Gateway,
    config: &AugmentConfig,
) -> Result<String, AugmentError> {
    let word = label_word(example, verbalizer)?;
    let prompt = render_reason_gen(&config.reason_template, &example.text, word, clues, &config.budget)?;
    generate(gateway, &config.params, &prompt.text, "reasoning", &example.id)
}

/// Generates one store record. Generation failures yield an invalid record
/// carrying the reason rather than an error.
pub fn augment_example(
    example: &Example,
    verbalizer: &Verbalizer,
    gateway: &Gateway,
    config: &AugmentConfig,
) -> Result<AugmentedDemonstration, AugmentError> {
    let word = label_word(example, verbalizer)?.to_string();
    let mut record = AugmentedDemonstration {
        example_id: example.id.clone(),
        text: example.text.clone(),
        clues: String::new(),
        reasoning: String::new(),
        label_word: word,
        valid: false,
        invalid_reason: None,
    };
    let outcome = (|| {
        if config.mode == AugmentMode::Carp {
            record.clues = generate_clues(example, verbalizer, gateway, config)?;
        }
        let clues = (config.reason_template.mode == PromptMode::Carp).then_some(record.clues.as_str());
        generate_reasoning(example, clues, verbalizer, gateway, config)
    })();
    match outcome {
        Ok(reasoning) => {
            record.reasoning = reasoning;
            record.valid = true;
        }
        Err(
            e @ (AugmentError::Io { .. } | AugmentError::UnknownLabel { .. } | AugmentError::MissingClueTemplate(_)),
        ) => return Err(e),
        Err(e) => {
            tracing::warn!(id = %example.id, error = %e, "marking demonstration invalid");
            record.invalid_reason = Some(e.to_string());
        }
    }
    Ok(record)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AugmentSummary {
    /// New valid records.
    pub generated: usize,
    /// Ids already present in the store.
    pub skipped: usize,
    /// New records flagged invalid.
    pub invalid: usize,
}

fn append_records(path: &Path, records: &[AugmentedDemonstration]) -> Result<(), AugmentError> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("demonstration serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    w.get_ref().sync_data().map_err(io_err(path))
}

/// Generates clues and reasoning for every example not yet in the store.
///
/// Work proceeds in chunks; each finished chunk is appended in input order,
/// so an interrupted run leaves a usable partial store.
pub fn augment_corpus(
    train: &[Example],
    verbalizer: &Verbalizer,
    gateway: &Gateway,
    config: &AugmentConfig,
    store_path: &Path,
) -> Result<AugmentSummary, AugmentError> {
    if config.mode == AugmentMode::Carp && config.clue_template.is_none() {
        return Err(AugmentError::MissingClueTemplate(config.mode));
    }
    let existing = if store_path.exists() {
        DemoStore::load(store_path)?
    } else {
        if let Some(parent) = store_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        DemoStore::default()
    };
    let todo: Vec<&Example> = train
        .iter()
        .filter(|e| match existing.get(&e.id) {
            None => true,
            Some(r) => config.retry_invalid && !r.valid,
        })
        .collect();
    let mut summary = AugmentSummary {
        skipped: train.len() - todo.len(),
        ..Default::default()
    };
    for chunk in todo.chunks(config.chunk_size.max(1)) {
        #[cfg(feature = "parallel")]
        let iter = chunk.par_iter();
        #[cfg(not(feature = "parallel"))]
        let iter = chunk.iter();
        let records = iter
            .map(|e| augment_example(e, verbalizer, gateway, config))
            .collect::<Result<Vec<_>, _>>()?;
        append_records(store_path, &records)?;
        for r in &records {
            if r.valid {
                summary.generated += 1;
            } else {
                summary.invalid += 1;
            }
        }
        tracing::info!(
            done = summary.generated + summary.invalid,
            total = todo.len(),
            "augmentation progress"
        );
    }
    Ok(summary)
}

/// Demonstration store contents, one record per id (latest line wins).
#[derive(Debug, Clone, Default)]
pub struct DemoStore {
    records: Vec<AugmentedDemonstration>,
    by_id: HashMap<String, usize>,
}

impl DemoStore {
    pub fn from_records(records: impl IntoIterator<Item = AugmentedDemonstration>) -> Self {
        let mut store = Self::default();
        for r in records {
            match store.by_id.get(&r.example_id) {
                Some(&i) => store.records[i] = r,
                None => {
                    store.by_id.insert(r.example_id.clone(), store.records.len());
                    store.records.push(r);
                }
            }
        }
        store
    }

    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AugmentedDemonstration = serde_json::from_str(&line).map_err(|e| AugmentError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }

    pub fn records(&self) -> &[AugmentedDemonstration] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&AugmentedDemonstration> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ids usable as demonstrations, in store order.
    pub fn valid_ids(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.valid)
            .map(|r| r.example_id.clone())
            .collect()
    }
}

pub fn load_demo_store(path: &Path) -> Result<DemoStore, AugmentError> {
    DemoStore::load(path)
}

/// Rewrites the store with one line per id. Returns the record count.
pub fn compact_store(path: &Path) -> Result<usize, AugmentError> {
    let store = DemoStore::load(path)?;
    let tmp = path.with_extension("jsonl.compact");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        for r in store.records() {
            let line = serde_json::to_string(r).expect("demonstration serializes");
            writeln!(w, "{line}").map_err(io_err(&tmp))?;
        }
        w.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(store.len())
}
