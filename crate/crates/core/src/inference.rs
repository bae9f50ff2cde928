//! Response parsing, voting and per-example classification.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmenter::{AugmentedDemonstration, DemoStore};
use crate::corpus::{normalize_label_word, Example, Verbalizer};
use crate::embedding_store::{query_embedding, EmbeddingError, QuerySource, VectorIndex};
use crate::llm_gateway::{prompt_digest, sha256_hex, CompletionResponse, Gateway, GatewayError, SamplingParams};
use crate::prompting::{
    render_few_shot, render_zero_shot, PromptError, PromptMode, PromptTemplate, RenderedPrompt, Shot, TemplateKind,
    TokenBudget,
};
use crate::sampler::{self, derive_seed, DemoOrder, SamplerConfig, SamplerError, Strategy};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("no run produced a parsable label")]
    Abstain,
    #[error("pipeline configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
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

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub clues: Option<String>,
    pub reasoning: Option<String>,
    pub label_word: String,
    pub label_id: usize,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("parse failure: {reason}")]
pub struct ParseFailure {
    pub reason: String,
}

impl ParseFailure {
    fn new(reason: impl Into<String>) -> Self {
        Self { reason: reason.into() }
    }
}

/// Matches `HEADER:` at the start of a line, ignoring case, leading
/// whitespace and markdown emphasis. Returns the header index and the rest
/// of the line.
fn match_header<'a>(line: &'a str, headers: &[String]) -> Option<(usize, &'a str)> {
    let t = line.trim_start().trim_start_matches(['*', '#', ' ', '\t']);
    let mut best: Option<(usize, &str, usize)> = None;
    for (i, h) in headers.iter().enumerate() {
        let Some(head) = t.get(..h.len()) else { continue };
        if !head.eq_ignore_ascii_case(h) {
            continue;
        }
        let after = t[h.len()..].trim_start_matches(['*', ' ', '\t']);
        if let Some(rest) = after.strip_prefix(':') {
            if best.is_none_or(|(_, _, len)| h.len() > len) {
                best = Some((i, rest.trim_start_matches('*'), h.len()));
            }
        }
    }
    best.map(|(i, rest, _)| (i, rest))
}

/// Occurrences of verbalizer words in `text`: (start, end, label_id).
/// Case-insensitive, on word boundaries.
fn word_hits(text: &str, verbalizer: &Verbalizer) -> Vec<(usize, usize, usize)> {
    let hay = text.to_ascii_lowercase();
    let mut hits = Vec::new();
    for (label_id, word) in verbalizer.words().iter().enumerate() {
        let needle = word.trim().to_ascii_lowercase();
        if needle.is_empty() {
            continue;
        }
        for (start, _) in hay.match_indices(&needle) {
            let end = start + needle.len();
            let before_ok = hay[..start].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
            let after_ok = hay[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            if before_ok && after_ok {
                hits.push((start, end, label_id));
            }
        }
    }
    hits
}

/// Label of the verbalizer word ending last in `text`; the longer word wins
/// when two end at the same position.
pub fn last_label_word(text: &str, verbalizer: &Verbalizer) -> Option<(usize, String)> {
    word_hits(text, verbalizer)
        .into_iter()
        .max_by_key(|&(s, e, _)| (e, e - s))
        .map(|(s, e, id)| (id, text[s..e].to_string()))
}

fn first_label_word(text: &str, verbalizer: &Verbalizer) -> Option<(usize, String)> {
    word_hits(text, verbalizer)
        .into_iter()
        .min_by_key(|&(s, e, _)| (s, Reverse(e - s)))
        .map(|(s, e, id)| (id, text[s..e].to_string()))
}

/// Splits a completion into its fields and extracts the label.
///
/// Header roles follow their position in `field_headers`: the last is the
/// label, the one before it the reasoning (cot and carp) and the one before
/// that the clues (carp). Text before the first header belongs to the first
/// field the model is expected to produce. Parsing stops when the model
/// starts a new example with the input header after giving a label.
pub fn parse_response(
    text: &str,
    mode: PromptMode,
    field_headers: &[String],
    verbalizer: &Verbalizer,
) -> Result<ParsedResponse, ParseFailure> {
    let n = field_headers.len();
    if n == 0 {
        return Err(ParseFailure::new("no field headers configured"));
    }
    let label_idx = n - 1;
    let reasoning_idx = (mode != PromptMode::Vanilla && n >= 2).then(|| n - 2);
    let clues_idx = (mode == PromptMode::Carp && n >= 3).then(|| n - 3);
    let first_output = clues_idx.or(reasoning_idx).unwrap_or(label_idx);
    let input_idx = (first_output > 0).then_some(0);

    let mut preamble: Vec<&str> = Vec::new();
    let mut sections: Vec<(usize, Vec<&str>)> = Vec::new();
    let mut seen_label = false;
    let mut consumed = 0;
    for line in text.split('\n') {
        if let Some((idx, rest)) = match_header(line, field_headers) {
            if Some(idx) == input_idx && seen_label {
                break;
            }
            seen_label |= idx == label_idx;
            sections.push((idx, vec![rest]));
        } else if let Some((_, body)) = sections.last_mut() {
            body.push(line);
        } else {
            preamble.push(line);
        }
        consumed += line.len() + 1;
    }
    let scanned = &text[..consumed.min(text.len())];

    let content = |idx: usize| -> Option<String> {
        let explicit = sections
            .iter()
            .rev()
            .find(|(i, _)| *i == idx)
            .map(|(_, b)| b.join("\n"));
        let v = match explicit {
            Some(v) => v,
            None if idx == first_output => preamble.join("\n"),
            None => return None,
        };
        let v = v.trim();
        (!v.is_empty()).then(|| v.to_string())
    };

    let first_line = |value: &str| {
        value
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .unwrap_or_default()
            .to_string()
    };
    let explicit_label = sections.iter().any(|(i, _)| *i == label_idx);
    let (label_id, label_word) = match content(label_idx) {
        Some(value) if explicit_label => {
            let line = first_line(&value);
            match normalize_label_word(&line, verbalizer) {
                Ok(id) => (id, line),
                Err(_) => first_label_word(&value, verbalizer)
                    .ok_or_else(|| ParseFailure::new(format!("label field {line:?} names no label word")))?,
            }
        }
        // Unlabelled text counts as the label only when it is exactly a
        // label word; otherwise scan for the last one.
        preamble_label => {
            let bare = preamble_label
                .map(|v| first_line(&v))
                .and_then(|line| normalize_label_word(&line, verbalizer).ok().map(|id| (id, line)));
            match bare {
                Some(hit) => hit,
                None => last_label_word(scanned, verbalizer)
                    .ok_or_else(|| ParseFailure::new("no label word in response"))?,
            }
        }
    };
    let label_word = label_word.trim_matches(|c: char| !c.is_alphanumeric()).to_string();
    Ok(ParsedResponse {
        clues: clues_idx.and_then(content),
        reasoning: reasoning_idx.and_then(content),
        label_word,
        label_id,
        raw: text.to_string(),
    })
}

/// exp(mean logprob) over the tokens covering the last occurrence of
/// `label_word`; 1.0 when logprobs are absent or do not cover the word.
pub fn extract_confidence(response: &CompletionResponse, label_word: &str) -> f64 {
    let Some(tokens) = &response.token_logprobs else {
        return 1.0;
    };
    let joined: String = tokens.iter().map(|t| t.token.as_str()).collect();
    let hay = joined.to_ascii_lowercase();
    let needle = label_word.trim().to_ascii_lowercase();
    if needle.is_empty() {
        return 1.0;
    }
    let Some(start) = hay.rfind(&needle) else {
        return 1.0;
    };
    let end = start + needle.len();
    let mut pos = 0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in tokens {
        let (s, e) = (pos, pos + t.token.len());
        pos = e;
        if s < end && e > start && t.logprob.is_finite() {
            sum += t.logprob;
            count += 1;
        }
    }
    if count == 0 {
        return 1.0;
    }
    (sum / count as f64).exp().clamp(f64::MIN_POSITIVE, 1.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMethod {
    #[default]
    Majority,
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_index: usize,
    pub parsed: Result<ParsedResponse, ParseFailure>,
    pub weight: f64,
}

impl RunResult {
    pub fn label(label_id: usize, weight: f64) -> Self {
        Self {
            run_index: 0,
            parsed: Ok(ParsedResponse {
                clues: None,
                reasoning: None,
                label_word: String::new(),
                label_id,
                raw: String::new(),
            }),
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub count: usize,
    pub weight_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub label_id: usize,
    pub tallies: BTreeMap<usize, Tally>,
    pub method: VoteMethod,
}

/// Per-label counts and weight sums. Weights are summed in sorted order so
/// the result does not depend on run order.
pub fn tally(runs: &[RunResult]) -> BTreeMap<usize, Tally> {
    let mut weights: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in runs {
        if let Ok(p) = &r.parsed {
            weights.entry(p.label_id).or_default().push(r.weight);
        }
    }
    weights
        .into_iter()
        .map(|(label, mut ws)| {
            ws.sort_by(f64::total_cmp);
            (
                label,
                Tally {
                    count: ws.len(),
                    weight_sum: ws.iter().sum(),
                },
            )
        })
        .collect()
}

fn decide(runs: &[RunResult], method: VoteMethod) -> Result<VoteOutcome, InferenceError> {
    let tallies = tally(runs);
    let label_id = tallies
        .iter()
        .max_by(|(la, a), (lb, b)| {
            let primary = match method {
                VoteMethod::Majority => a.count.cmp(&b.count).then(a.weight_sum.total_cmp(&b.weight_sum)),
                VoteMethod::Weighted => a.weight_sum.total_cmp(&b.weight_sum).then(a.count.cmp(&b.count)),
            };
            primary.then(lb.cmp(la))
        })
        .map(|(l, _)| *l)
        .ok_or(InferenceError::Abstain)?;
    Ok(VoteOutcome {
        label_id,
        tallies,
        method,
    })
}

/// Most frequent label; ties go to the higher weight sum, then the lower id.
pub fn majority_vote(runs: &[RunResult]) -> Result<VoteOutcome, InferenceError> {
    decide(runs, VoteMethod::Majority)
}

/// Highest weight sum; ties go to the higher count, then the lower id.
pub fn weighted_probability_vote(runs: &[RunResult]) -> Result<VoteOutcome, InferenceError> {
    decide(runs, VoteMethod::Weighted)
}

pub fn vote(runs: &[RunResult], method: VoteMethod) -> Result<VoteOutcome, InferenceError> {
    decide(runs, method)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub label_word: Option<String>,
    pub weight: f64,
    pub raw_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: usize,
    pub predicted: Option<usize>,
    pub failed: bool,
    pub method: VoteMethod,
    pub runs: Vec<RunRecord>,
    pub demo_ids: Vec<String>,
    pub prompt_digest: String,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        !self.failed && self.predicted == Some(self.gold)
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), InferenceError> {
    let io = |source| InferenceError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("prediction serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, InferenceError> {
    let io = |source| InferenceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| InferenceError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn default_votes() -> usize {
    5
}

/// Knobs for one classification pass.
#[derive(Debug, Clone)]
pub struct InferenceConfig {
    /// Completions per example.
    pub votes: usize,
    pub method: VoteMethod,
    pub sampler: SamplerConfig,
    pub params: SamplingParams,
    /// Total context budget; the completion's `max_tokens` is reserved from it.
    pub budget: TokenBudget,
    /// Independent trial number; shifts run indices and the sampler seed.
    pub trial: usize,
    pub retry_on_parse_failure: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            votes: default_votes(),
            method: VoteMethod::Majority,
            sampler: SamplerConfig::default(),
            params: SamplingParams::default(),
            budget: TokenBudget::default(),
            trial: 0,
            retry_on_parse_failure: false,
        }
    }
}

/// Run-index offset for the single re-query after a parse failure.
const PARSE_RETRY_OFFSET: usize = 1 << 20;

/// Everything produced while classifying one example.
#[derive(Debug, Clone)]
pub struct Classification {
    pub record: PredictionRecord,
    pub prompt: RenderedPrompt,
    pub runs: Vec<RunResult>,
    pub vote: Option<VoteOutcome>,
    /// Fewer than k demonstrations were available.
    pub truncated: bool,
}

pub struct Pipeline<'a> {
    template: &'a PromptTemplate,
    verbalizer: &'a Verbalizer,
    gateway: &'a Gateway,
    demos: Option<&'a DemoStore>,
    eligible: Vec<String>,
    index: Option<&'a VectorIndex>,
    queries: Option<&'a dyn QuerySource>,
    config: InferenceConfig,
    prompt_budget: TokenBudget,
}

impl<'a> Pipeline<'a> {
    /// `template` must have its `{labels}` bound.
    pub fn new(
        template: &'a PromptTemplate,
        verbalizer: &'a Verbalizer,
        gateway: &'a Gateway,
        config: InferenceConfig,
    ) -> Self {
        let prompt_budget = TokenBudget::with_counter(
            config.budget.max_tokens.saturating_sub(config.params.max_tokens),
            Arc::clone(&config.budget.counter),
        );
        Self {
            template,
            verbalizer,
            gateway,
            demos: None,
            eligible: Vec::new(),
            index: None,
            queries: None,
            config,
            prompt_budget,
        }
    }

    /// Demonstration store; only valid records are eligible.
    pub fn with_demos(mut self, demos: &'a DemoStore) -> Self {
        self.eligible = demos.valid_ids();
        self.demos = Some(demos);
        self
    }

    pub fn with_index(mut self, index: &'a VectorIndex, queries: &'a dyn QuerySource) -> Self {
        self.index = Some(index);
        self.queries = Some(queries);
        self
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.config
    }

    /// Checks that the template and attached stores fit the configuration.
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.template.kind != TemplateKind::Classify {
            return Err(InferenceError::Config(format!(
                "classification needs a classify template, got {}",
                self.template.kind
            )));
        }
        if self.config.votes == 0 {
            return Err(InferenceError::Config("votes must be at least 1".into()));
        }
        if self.template.shot == Shot::Few {
            if self.demos.is_none() {
                return Err(InferenceError::Config(
                    "few-shot template needs a demonstration store".into(),
                ));
            }
            if self.config.sampler.strategy == Strategy::Random && self.config.sampler.order != DemoOrder::Random {
                return Err(InferenceError::Config(
                    "random sampler has no similarity scores; use order = random".into(),
                ));
            }
            if self.config.sampler.strategy == Strategy::Knn && (self.index.is_none() || self.queries.is_none()) {
                return Err(InferenceError::Config(
                    "knn sampler needs a vector index and query embeddings".into(),
                ));
            }
        }
        Ok(())
    }

    fn demonstrations(&self, example: &Example) -> Result<(Vec<AugmentedDemonstration>, bool), InferenceError> {
        let store = self
            .demos
            .ok_or_else(|| InferenceError::Config("no demonstration store".into()))?;
        let mut sc = self.config.sampler.clone();
        sc.seed = sc.seed.wrapping_add(self.config.trial as u64);
        let query = match (sc.strategy, self.index, self.queries) {
            (Strategy::Knn, Some(index), Some(source)) => {
                Some(query_embedding(source, &example.id, &example.text, index.dimension())?)
            }
            _ => None,
        };
        let selection = sampler::select(&sc, example, &self.eligible, self.index, query.as_deref())?;
        let ordered = sampler::order(&selection.candidates, sc.order, derive_seed(sc.seed, &example.id))?;
        let demos = ordered
            .iter()
            .map(|c| {
                store
                    .get(&c.example_id)
                    .cloned()
                    .ok_or_else(|| InferenceError::Config(format!("demonstration {:?} not in store", c.example_id)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok((demos, selection.truncated))
    }

    fn run_once(&self, prompt: &str, run_index: usize) -> Result<(RunResult, String), InferenceError> {
        let mut req = self.config.params.request(prompt);
        req.run_index = run_index;
        req.want_logprobs = self.config.method == VoteMethod::Weighted;
        let (resp, _) = self.gateway.complete(&req)?;
        let parsed = parse_response(
            &resp.text,
            self.template.mode,
            &self.template.field_headers,
            self.verbalizer,
        );
        let weight = match &parsed {
            Ok(p) => extract_confidence(&resp, &p.label_word),
            Err(_) => 1.0,
        };
        Ok((
            RunResult {
                run_index,
                parsed,
                weight,
            },
            sha256_hex(resp.text.as_bytes()),
        ))
    }

    pub fn classify(&self, example: &Example) -> Result<Classification, InferenceError> {
        let (demos, truncated) = match self.template.shot {
            Shot::Few => self.demonstrations(example)?,
            Shot::Zero => (Vec::new(), false),
        };
        let prompt = match self.template.shot {
            Shot::Few => render_few_shot(self.template, &demos, &example.text, &self.prompt_budget)?,
            Shot::Zero => render_zero_shot(self.template, &example.text, &self.prompt_budget)?,
        };
        let m = self.config.votes;
        let mut runs = Vec::with_capacity(m);
        let mut run_records = Vec::with_capacity(m);
        for r in 0..m {
            let run_index = self.config.trial * m + r;
            let (mut run, mut digest) = self.run_once(&prompt.text, run_index)?;
            if run.parsed.is_err() && self.config.retry_on_parse_failure {
                let (retry, retry_digest) = self.run_once(&prompt.text, run_index + PARSE_RETRY_OFFSET)?;
                if retry.parsed.is_ok() {
                    run = RunResult { run_index, ..retry };
                    digest = retry_digest;
                }
            }
            run_records.push(RunRecord {
                run_index,
                label_word: run.parsed.as_ref().ok().map(|p| p.label_word.clone()),
                weight: run.weight,
                raw_digest: digest,
            });
            runs.push(run);
        }
        let vote = match vote(&runs, self.config.method) {
            Ok(v) => Some(v),
            Err(InferenceError::Abstain) => {
                tracing::debug!(id = %example.id, "all runs failed to parse");
                None
            }
            Err(e) => return Err(e),
        };
        let record = PredictionRecord {
            id: example.id.clone(),
            gold: example.label_id,
            predicted: vote.as_ref().map(|v| v.label_id),
            failed: vote.is_none(),
            method: self.config.method,
            runs: run_records,
            demo_ids: prompt.included_demo_ids.clone(),
            prompt_digest: prompt_digest(&prompt.text),
        };
        Ok(Classification {
            record,
            prompt,
            runs,
            vote,
            truncated,
        })
    }

    pub fn classify_all_sequential(&self, examples: &[Example]) -> Result<Vec<Classification>, InferenceError> {
        self.validate()?;
        examples.iter().map(|e| self.classify(e)).collect()
    }

    #[cfg(feature = "parallel")]
    pub fn classify_all_parallel(&self, examples: &[Example]) -> Result<Vec<Classification>, InferenceError> {
        self.validate()?;
        examples.par_iter().map(|e| self.classify(e)).collect()
    }

    /// Classifies every example, in parallel when the `parallel` feature is
    /// on. Output order matches input order.
    pub fn classify_all(&self, examples: &[Example]) -> Result<Vec<Classification>, InferenceError> {
        #[cfg(feature = "parallel")]
        return self.classify_all_parallel(examples);
        #[cfg(not(feature = "parallel"))]
        return self.classify_all_sequential(examples);
    }
}
