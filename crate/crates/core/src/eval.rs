//! Accuracy reports and quality checks on generated reasoning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmenter::DemoStore;
use crate::corpus::LabelSpace;
use crate::inference::PredictionRecord;
use crate::llm_gateway::{Gateway, GatewayError, SamplingParams};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no prediction records")]
    Empty,
    #[error("no trials to aggregate")]
    NoTrials,
    #[error("quality sample is empty")]
    EmptySample,
    #[error("provider returned no token logprobs")]
    NoTokens,
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

/// Fraction of records predicted correctly; failed predictions count as wrong.
pub fn accuracy(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = records.iter().filter(|r| r.correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Mean and sample standard deviation (n − 1 denominator, 0 for one trial).
pub fn aggregate_trials(accuracies: &[f64]) -> Result<(f64, f64), EvalError> {
    if accuracies.is_empty() {
        return Err(EvalError::NoTrials);
    }
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    if sorted.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = sorted.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub support: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Pooled over all trials.
    pub accuracy: f64,
    pub per_class: BTreeMap<usize, ClassStats>,
    pub parse_failures: usize,
    pub records: usize,
    pub trials: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Report over one or more trials, each a full set of predictions.
pub fn build_report(trials: &[Vec<PredictionRecord>]) -> Result<Report, EvalError> {
    if trials.is_empty() {
        return Err(EvalError::NoTrials);
    }
    let accs = trials.iter().map(|t| accuracy(t)).collect::<Result<Vec<_>, _>>()?;
    let (mean, std) = aggregate_trials(&accs)?;
    let mut per_class: BTreeMap<usize, ClassStats> = BTreeMap::new();
    let mut parse_failures = 0;
    let mut records = 0;
    for r in trials.iter().flatten() {
        records += 1;
        let s = per_class.entry(r.gold).or_default();
        s.support += 1;
        if r.correct() {
            s.correct += 1;
        }
        if r.failed {
            parse_failures += 1;
        }
    }
    let correct: usize = per_class.values().map(|s| s.correct).sum();
    Ok(Report {
        accuracy: correct as f64 / records as f64,
        per_class,
        parse_failures,
        records,
        trials: accs,
        mean,
        std,
    })
}

fn class_name(labels: Option<&LabelSpace>, id: usize) -> String {
    labels
        .and_then(|l| l.name(id))
        .map(str::to_string)
        .unwrap_or_else(|| id.to_string())
}

impl Report {
    /// Human-readable summary.
    pub fn to_table(&self, labels: Option<&LabelSpace>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "records         {}", self.records);
        let _ = writeln!(out, "accuracy        {:.4}", self.accuracy);
        let _ = writeln!(out, "trials          {}", self.trials.len());
        let _ = writeln!(out, "mean            {:.4}", self.mean);
        let _ = writeln!(out, "std             {:.4}", self.std);
        let _ = writeln!(out, "parse failures  {}", self.parse_failures);
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>9}",
            "class", "support", "correct", "accuracy"
        );
        for (id, s) in &self.per_class {
            let acc = if s.support == 0 {
                0.0
            } else {
                s.correct as f64 / s.support as f64
            };
            let _ = writeln!(
                out,
                "{:<24} {:>8} {:>8} {:>9.4}",
                class_name(labels, *id),
                s.support,
                s.correct,
                acc
            );
        }
        out
    }

    pub fn per_class_csv(&self, labels: Option<&LabelSpace>) -> String {
        let mut out = String::from("label_id,label,support,correct\n");
        for (id, s) in &self.per_class {
            let name = class_name(labels, *id).replace('"', "\"\"");
            let _ = writeln!(out, "{id},\"{name}\",{},{}", s.support, s.correct);
        }
        out
    }
}

/// A (text, reasoning) pair drawn from the demonstration store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QualityPair {
    pub id: String,
    pub text: String,
    pub reasoning: String,
}

/// Seeded sample of up to `n` valid demonstrations.
pub fn sample_pairs(store: &DemoStore, n: usize, seed: u64) -> Vec<QualityPair> {
    let mut pool: Vec<_> = store.records().iter().filter(|r| r.valid).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = n.min(pool.len());
    let (chosen, _) = pool.partial_shuffle(&mut rng, take);
    chosen
        .iter()
        .map(|r| QualityPair {
            id: r.example_id.clone(),
            text: r.text.clone(),
            reasoning: r.reasoning.clone(),
        })
        .collect()
}

/// Yes/no answer from the first word of a response. `None` when it is neither.
pub fn yes_no(response: &str) -> Option<bool> {
    let first = response.split_whitespace().next()?;
    let word = first.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase();
    match word.as_str() {
        "yes" | "entailment" | "entailed" => Some(true),
        "no" | "contradiction" | "neutral" => Some(false),
        _ => None,
    }
}

pub fn reliability_prompt(task_noun: &str, pair: &QualityPair) -> String {
    format!(
        "Is the following REASONING process supporting determinate {task_noun} label to INPUT? Please answer Yes or No.\nINPUT: {}\nREASONING: {}",
        pair.text, pair.reasoning
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliDemo {
    pub premise: String,
    pub hypothesis: String,
    pub answer: String,
}

/// Sixteen hand-written premise/hypothesis pairs shipped with the crate.
pub fn default_nli_demos() -> Vec<NliDemo> {
    parse_nli_demos(
        include_str!("../fixtures/nli_demos.jsonl"),
        Path::new("nli_demos.jsonl"),
    )
    .expect("bundled demos parse")
}

fn parse_nli_demos(body: &str, path: &Path) -> Result<Vec<NliDemo>, EvalError> {
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_nli_demos(path: &Path) -> Result<Vec<NliDemo>, EvalError> {
    let body = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_nli_demos(&body, path)
}

pub fn faithfulness_prompt(demos: &[NliDemo], pair: &QualityPair) -> String {
    let mut out = String::from(
        "Given the premise and hypothesis, please justify whether the HYPOTHESIS can be entailed from the PREMISE. Please return yes or no.\n\n",
    );
    for d in demos {
        let _ = writeln!(
            out,
            "PREMISE: {}\nHYPOTHESIS: {}\nANSWER: {}",
            d.premise, d.hypothesis, d.answer
        );
    }
    let _ = write!(out, "PREMISE: {}\nHYPOTHESIS: {}\nANSWER:", pair.text, pair.reasoning);
    out
}

fn yes_fraction<F>(
    sample: &[QualityPair],
    gateway: &Gateway,
    params: &SamplingParams,
    prompt: F,
) -> Result<f64, EvalError>
where
    F: Fn(&QualityPair) -> String + Sync,
{
    if sample.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let ask = |pair: &QualityPair| -> Result<bool, EvalError> {
        let (resp, _) = gateway.complete(&params.request(prompt(pair)))?;
        Ok(match yes_no(&resp.text) {
            Some(v) => v,
            None => {
                tracing::warn!(id = %pair.id, response = %resp.text, "unparseable yes/no answer, counted as no");
                false
            }
        })
    };
    #[cfg(feature = "parallel")]
    let answers = sample.par_iter().map(ask).collect::<Result<Vec<_>, _>>()?;
    #[cfg(not(feature = "parallel"))]
    let answers = sample.iter().map(ask).collect::<Result<Vec<_>, _>>()?;
    Ok(answers.iter().filter(|&&y| y).count() as f64 / answers.len() as f64)
}

/// Share of pairs whose reasoning the model judges as supporting the label.
pub fn reliability_check(
    sample: &[QualityPair],
    gateway: &Gateway,
    params: &SamplingParams,
    task_noun: &str,
) -> Result<f64, EvalError> {
    yes_fraction(sample, gateway, params, |p| reliability_prompt(task_noun, p))
}

/// Share of pairs whose reasoning the model judges entailed by the text.
pub fn faithfulness_check(
    sample: &[QualityPair],
    gateway: &Gateway,
    params: &SamplingParams,
    nli_demos: &[NliDemo],
) -> Result<f64, EvalError> {
    yes_fraction(sample, gateway, params, |p| faithfulness_prompt(nli_demos, p))
}

/// exp(−mean token logprob) over all tokens of all texts.
pub fn fluency_perplexity(texts: &[&str], gateway: &Gateway) -> Result<f64, EvalError> {
    if texts.is_empty() {
        return Err(EvalError::EmptySample);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in texts {
        for tok in gateway.score(t)? {
            sum += tok.logprob;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoTokens);
    }
    Ok((-sum / n as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityAudit {
    pub sampled_ids: Vec<String>,
    pub reliability: Option<f64>,
    pub faithfulness: Option<f64>,
    pub fluency_ppl: Option<f64>,
}
