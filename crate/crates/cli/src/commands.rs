//! Command implementations. Each returns an outcome struct so callers (the
//! binary, integration tests) decide how to report it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use clueprompt::augmenter::{augment_corpus, compact_store, AugmentConfig, AugmentMode, AugmentSummary, DemoStore};
use clueprompt::corpus::{
    build_verbalizer, load_dataset, subsample_per_class, write_examples_jsonl, DatasetSplit, Example, LabelSpace,
    Verbalizer,
};
use clueprompt::embedding_store::{
    ingest_embeddings, EmbeddingService, PrecomputedEmbeddings, QuerySource, SourceTag, VectorIndex,
};
use clueprompt::eval::{
    build_report, default_nli_demos, faithfulness_check, fluency_perplexity, load_nli_demos, reliability_check,
    sample_pairs, EvalError, QualityAudit, Report,
};
use clueprompt::inference::{read_predictions, write_predictions, InferenceConfig, Pipeline};
use clueprompt::llm_gateway::{
    DiskCache, Gateway, GatewayError, GatewayStats, HttpProvider, MockProvider, Provider, RetryPolicy,
};
use clueprompt::prompting::{PromptMode, PromptTemplate, Shot, TokenBudget};
use clueprompt::sampler::Strategy;
use serde::Serialize;

use crate::config::{PipelineConfig, ProviderKind, SplitName};

/// Shared pieces every dataset-driven command needs.
struct Loaded {
    cfg: PipelineConfig,
    space: LabelSpace,
    verbalizer: Verbalizer,
    data: DatasetSplit,
}

fn load(config: &Path) -> Result<Loaded> {
    let cfg = PipelineConfig::load(config)?;
    let space = cfg.label_space()?;
    let word_map = cfg.word_map()?;
    let verbalizer = build_verbalizer(&space, cfg.verbalizer.strategy, word_map.as_ref())?;
    let data = load_dataset(&cfg.dataset.path, cfg.dataset.format, &space)
        .with_context(|| format!("loading dataset {}", cfg.dataset.path.display()))?;
    Ok(Loaded {
        cfg,
        space,
        verbalizer,
        data,
    })
}

fn limited(mut examples: Vec<Example>, limit: Option<usize>) -> Vec<Example> {
    if let Some(n) = limit {
        examples.truncate(n);
    }
    examples
}

fn read_key(env: Option<&str>) -> Result<Option<String>> {
    match env {
        None => Ok(None),
        Some(var) => std::env::var(var)
            .map(Some)
            .with_context(|| format!("environment variable {var} is not set")),
    }
}

/// Builds the gateway for the selected provider, with cache and retries.
pub fn build_gateway(cfg: &PipelineConfig, provider_flag: Option<&str>) -> Result<Gateway> {
    let (name, section) = cfg.provider_section(provider_flag)?;
    let provider: Arc<dyn Provider> = match section.kind {
        ProviderKind::Mock => {
            let spec = section.spec.as_ref().context("mock provider needs `spec`")?;
            Arc::new(MockProvider::load(spec)?)
        }
        ProviderKind::Http => {
            let url = section.base_url.as_ref().context("http provider needs `base_url`")?;
            let key = read_key(section.api_key_env.as_deref())?;
            let id = section.id.clone().unwrap_or(name);
            let mut p = HttpProvider::new(id, url.clone(), key);
            if let Some(limit) = section.context_limit {
                p = p.with_context_limit(limit);
            }
            Arc::new(p)
        }
    };
    let retry = RetryPolicy {
        max_attempts: section.max_attempts,
        base_delay: Duration::from_millis(section.base_delay_ms),
        ..RetryPolicy::default()
    };
    let mut gateway = Gateway::new(provider)
        .with_retry(retry)
        .with_max_in_flight(section.max_in_flight);
    if let Some(dir) = &cfg.cache.dir {
        let cache = DiskCache::open(dir).with_context(|| format!("opening cache {}", dir.display()))?;
        gateway = gateway.with_cache(cache);
    }
    Ok(gateway)
}

/// Context budget, capped by the provider's window when it declares one.
fn budget(cfg: &PipelineConfig, gateway: &Gateway) -> TokenBudget {
    let mut max = cfg.prompting.max_tokens;
    if let Some(limit) = gateway.provider().context_limit() {
        if limit < max {
            tracing::info!(
                limit,
                configured = max,
                "capping token budget at provider context limit"
            );
            max = limit;
        }
    }
    TokenBudget::new(max)
}

fn load_template(path: &Path, verbalizer: &Verbalizer) -> Result<PromptTemplate> {
    let t = PromptTemplate::load(path).with_context(|| format!("template {}", path.display()))?;
    Ok(t.bind_labels(verbalizer)?)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Embedding JSONL, one `{"id", "vector"}` object per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "other")]
    pub source_tag: SourceTag,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestOutcome {
    pub records: usize,
    pub dimension: usize,
    pub source_tag: SourceTag,
    pub output: PathBuf,
}

pub fn cmd_ingest_embeddings(args: &IngestArgs) -> Result<IngestOutcome> {
    let index = ingest_embeddings(&args.input, args.source_tag)?;
    ensure_parent(&args.output)?;
    index.save(&args.output)?;
    Ok(IngestOutcome {
        records: index.len(),
        dimension: index.dimension(),
        source_tag: index.source_tag(),
        output: args.output.clone(),
    })
}

#[derive(Debug, Clone, Args)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Examples kept per class.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsampleOutcome {
    pub written: usize,
    pub per_class: usize,
    pub seed: u64,
    pub output: PathBuf,
}

pub fn cmd_subsample(args: &SubsampleArgs) -> Result<SubsampleOutcome> {
    let l = load(&args.config)?;
    let seed = l.cfg.effective_seed(args.seed);
    let picked = subsample_per_class(&l.data.train, &l.space, args.n, seed)?;
    ensure_parent(&args.output)?;
    write_examples_jsonl(&args.output, &picked, &l.space)?;
    Ok(SubsampleOutcome {
        written: picked.len(),
        per_class: args.n,
        seed,
        output: args.output.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Carp,
    Cot,
}

impl From<ModeArg> for AugmentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Carp => AugmentMode::Carp,
            ModeArg::Cot => AugmentMode::Cot,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `augment.mode`.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Only the first N training examples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub provider: Option<String>,
    /// Overrides the configured store path.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Regenerate records previously marked invalid.
    #[arg(long)]
    pub retry_invalid: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentOutcome {
    #[serde(flatten)]
    pub summary: AugmentSummary,
    pub store: PathBuf,
    pub stats: GatewayStats,
}

pub fn cmd_augment(args: &AugmentArgs) -> Result<AugmentOutcome> {
    let l = load(&args.config)?;
    let cfg = &l.cfg;
    let mode = args.mode.map(AugmentMode::from).unwrap_or(cfg.augment.mode);
    let p = &cfg.prompting;
    let (clue, reason) = match mode {
        AugmentMode::Carp => {
            let clue = p
                .clue_template
                .as_ref()
                .context("carp augmentation needs prompting.clue_template")?;
            let reason = p
                .reason_template
                .as_ref()
                .context("carp augmentation needs prompting.reason_template")?;
            (
                Some(load_template(clue, &l.verbalizer)?),
                load_template(reason, &l.verbalizer)?,
            )
        }
        AugmentMode::Cot => {
            let path = p
                .cot_reason_template
                .as_ref()
                .context("cot augmentation needs prompting.cot_reason_template")?;
            (None, load_template(path, &l.verbalizer)?)
        }
    };
    let want = match mode {
        AugmentMode::Carp => PromptMode::Carp,
        AugmentMode::Cot => PromptMode::Cot,
    };
    if reason.mode != want {
        bail!("reasoning template is {} but augmentation mode is {want}", reason.mode);
    }
    let provider = args.provider.as_deref().or(cfg.augment.provider.as_deref());
    let gateway = build_gateway(cfg, provider)?;
    let mut ac = AugmentConfig::new(mode, clue, reason);
    ac.budget = budget(cfg, &gateway);
    ac.params = cfg.augment.sampling.unwrap_or(cfg.sampling);
    ac.chunk_size = cfg.augment.chunk_size;
    ac.retry_invalid = args.retry_invalid;
    let store = args.store.clone().unwrap_or_else(|| cfg.store_path());
    let train = limited(l.data.train, args.limit);
    let summary = augment_corpus(&train, &l.verbalizer, &gateway, &ac, &store)?;
    Ok(AugmentOutcome {
        summary,
        store,
        stats: gateway.stats(),
    })
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only the first N examples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub provider: Option<String>,
    /// Run a single trial instead of all configured ones.
    #[arg(long)]
    pub trial: Option<usize>,
    /// Overrides `output.predictions`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub output: PathBuf,
    pub accuracy: f64,
    pub failed: usize,
    /// Examples that got fewer than k demonstrations.
    pub truncated: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifyOutcome {
    pub examples: usize,
    pub trials: Vec<TrialOutcome>,
    pub stats: GatewayStats,
}

/// Prediction file for one trial; multi-trial runs get `.trial<t>` inserted
/// before the extension.
pub fn trial_path(base: &Path, trial: usize, trials: usize) -> PathBuf {
    if trials <= 1 {
        return base.to_path_buf();
    }
    let stem = base
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.trial{trial}.{}", ext.to_string_lossy()),
        None => format!("{stem}.trial{trial}"),
    };
    base.with_file_name(name)
}

fn query_source(cfg: &PipelineConfig) -> Result<Box<dyn QuerySource>> {
    let e = &cfg.embeddings;
    if let Some(path) = &e.queries {
        return Ok(Box::new(PrecomputedEmbeddings::load(path)?));
    }
    if let Some(url) = &e.service_url {
        let key = read_key(e.service_key_env.as_deref())?;
        return Ok(Box::new(EmbeddingService::new(
            url.clone(),
            key,
            RetryPolicy::default(),
        )));
    }
    bail!("knn sampler needs embeddings.queries or embeddings.service_url")
}

pub fn cmd_classify(args: &ClassifyArgs) -> Result<ClassifyOutcome> {
    let l = load(&args.config)?;
    let cfg = &l.cfg;
    let examples = match cfg.dataset.split {
        SplitName::Train => l.data.train.clone(),
        SplitName::Dev => l.data.dev.clone(),
        SplitName::Test => l.data.test.clone(),
    };
    if examples.is_empty() {
        bail!(
            "the {:?} split of {} is empty",
            cfg.dataset.split,
            cfg.dataset.path.display()
        );
    }
    let examples = limited(examples, args.limit);
    let template = load_template(&cfg.prompting.classify_template, &l.verbalizer)?;

    let few = template.shot == Shot::Few;
    let knn = few && cfg.sampler.strategy == Strategy::Knn;
    let demos = if few {
        let path = cfg.store_path();
        Some(DemoStore::load(&path).with_context(|| format!("loading demonstration store {}", path.display()))?)
    } else {
        None
    };
    let index = if knn {
        let path = cfg
            .embeddings
            .index
            .as_ref()
            .context("knn sampler needs embeddings.index")?;
        Some(VectorIndex::load(path).with_context(|| format!("loading index {}", path.display()))?)
    } else {
        None
    };
    let queries = if knn { Some(query_source(cfg)?) } else { None };

    let base = args
        .output
        .clone()
        .or_else(|| cfg.output.predictions.clone())
        .context("no output path; set output.predictions or pass --output")?;
    let gateway = build_gateway(cfg, args.provider.as_deref())?;
    let mut sampler = cfg.sampler.clone();
    sampler.seed = cfg.effective_seed(args.seed);
    let trials: Vec<usize> = match args.trial {
        Some(t) => vec![t],
        None => (0..cfg.inference.trials).collect(),
    };

    let mut outcomes = Vec::with_capacity(trials.len());
    for trial in trials {
        let ic = InferenceConfig {
            votes: cfg.inference.votes,
            method: cfg.inference.method,
            sampler: sampler.clone(),
            params: cfg.sampling,
            budget: budget(cfg, &gateway),
            trial,
            retry_on_parse_failure: cfg.inference.retry_on_parse_failure,
        };
        let mut pipeline = Pipeline::new(&template, &l.verbalizer, &gateway, ic);
        if let Some(d) = &demos {
            pipeline = pipeline.with_demos(d);
        }
        if let (Some(i), Some(q)) = (&index, &queries) {
            pipeline = pipeline.with_index(i, q.as_ref());
        }
        let results = pipeline.classify_all(&examples)?;
        let records: Vec<_> = results.iter().map(|c| c.record.clone()).collect();
        let output = trial_path(&base, trial, cfg.inference.trials.max(args.trial.map_or(0, |t| t + 1)));
        ensure_parent(&output)?;
        write_predictions(&output, &records)?;
        let correct = records.iter().filter(|r| r.correct()).count();
        outcomes.push(TrialOutcome {
            trial,
            output,
            accuracy: correct as f64 / records.len() as f64,
            failed: records.iter().filter(|r| r.failed).count(),
            truncated: results.iter().filter(|c| c.truncated).count(),
        });
    }
    Ok(ClassifyOutcome {
        examples: examples.len(),
        trials: outcomes,
        stats: gateway.stats(),
    })
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Prediction files, one per trial.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Config whose label names are used in the table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Also write per-class rows as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: Report,
    pub labels: Option<LabelSpace>,
}

impl EvalOutcome {
    pub fn table(&self) -> String {
        self.report.to_table(self.labels.as_ref())
    }
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let mut trials = Vec::with_capacity(args.files.len());
    for f in &args.files {
        let records = read_predictions(f)?;
        if records.is_empty() {
            bail!("{} holds no predictions", f.display());
        }
        trials.push(records);
    }
    let report = build_report(&trials)?;
    let labels = match &args.config {
        Some(c) => Some(PipelineConfig::load(c)?.label_space()?),
        None => None,
    };
    if let Some(csv) = &args.csv {
        ensure_parent(csv)?;
        fs::write(csv, report.per_class_csv(labels.as_ref())).with_context(|| format!("writing {}", csv.display()))?;
    }
    Ok(EvalOutcome { report, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Check {
    Reliability,
    Faithfulness,
    Fluency,
}

#[derive(Debug, Clone, Args)]
pub struct AuditArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Overrides `audit.sample`.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub provider: Option<String>,
    /// Checks to run; all by default.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub checks: Vec<Check>,
}

pub fn cmd_audit(args: &AuditArgs) -> Result<QualityAudit> {
    let cfg = PipelineConfig::load(&args.config)?;
    let path = args.store.clone().unwrap_or_else(|| cfg.store_path());
    let store = DemoStore::load(&path).with_context(|| format!("loading demonstration store {}", path.display()))?;
    let n = args.sample.unwrap_or(cfg.audit.sample);
    let sample = sample_pairs(&store, n, cfg.effective_seed(args.seed));
    if sample.is_empty() {
        bail!("{} has no valid demonstrations to audit", path.display());
    }
    let checks: Vec<Check> = if args.checks.is_empty() {
        vec![Check::Reliability, Check::Faithfulness, Check::Fluency]
    } else {
        args.checks.clone()
    };
    let provider = args.provider.as_deref().or(cfg.audit.provider.as_deref());
    let gateway = build_gateway(&cfg, provider)?;
    let mut audit = QualityAudit {
        sampled_ids: sample.iter().map(|p| p.id.clone()).collect(),
        reliability: None,
        faithfulness: None,
        fluency_ppl: None,
    };
    if checks.contains(&Check::Reliability) {
        audit.reliability = Some(reliability_check(
            &sample,
            &gateway,
            &cfg.sampling,
            &cfg.audit.task_noun,
        )?);
    }
    if checks.contains(&Check::Faithfulness) {
        let demos = match &cfg.audit.nli_demos {
            Some(p) => load_nli_demos(p)?,
            None => default_nli_demos(),
        };
        audit.faithfulness = Some(faithfulness_check(&sample, &gateway, &cfg.sampling, &demos)?);
    }
    if checks.contains(&Check::Fluency) {
        let texts: Vec<&str> = sample.iter().map(|p| p.reasoning.as_str()).collect();
        match fluency_perplexity(&texts, &gateway) {
            Ok(ppl) => audit.fluency_ppl = Some(ppl),
            // Only fatal when fluency was asked for explicitly.
            Err(EvalError::Gateway(e @ GatewayError::Unsupported(_))) if args.checks.is_empty() => {
                tracing::warn!(error = %e, "skipping fluency check");
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(audit)
}

#[derive(Debug, Clone, Args)]
pub struct CompactArgs {
    #[arg(long)]
    pub store: PathBuf,
}

pub fn cmd_compact(args: &CompactArgs) -> Result<usize> {
    Ok(compact_store(&args.store)?)
}
