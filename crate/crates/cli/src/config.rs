//! Experiment configuration file.
//!
//! One TOML file per experiment, one section per pipeline stage. Unknown
//! keys are rejected. Relative paths resolve against the config file's
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clueprompt::augmenter::AugmentMode;
use clueprompt::corpus::{DatasetFormat, LabelSpace, VerbalizerStrategy};
use clueprompt::inference::VoteMethod;
use clueprompt::llm_gateway::SamplingParams;
use clueprompt::sampler::{DemoOrder, SamplerConfig, Strategy};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    #[default]
    Test,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Directory with train/dev/test files, or a single train file.
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: DatasetFormat,
    pub labels: Option<Vec<String>>,
    /// One label name per line, in label id order.
    pub labels_file: Option<PathBuf>,
    /// Split classified by `classify`.
    #[serde(default)]
    pub split: SplitName,
}

fn default_format() -> DatasetFormat {
    DatasetFormat::Jsonl
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerbalizerSection {
    #[serde(default = "default_strategy")]
    pub strategy: VerbalizerStrategy,
    /// Label id (as a string key) to label word.
    pub word_map: Option<BTreeMap<String, String>>,
}

fn default_strategy() -> VerbalizerStrategy {
    VerbalizerStrategy::Annotation
}

impl Default for VerbalizerSection {
    fn default() -> Self {
        Self {
            strategy: default_strategy(),
            word_map: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsSection {
    /// Index written by `ingest-embeddings`.
    pub index: Option<PathBuf>,
    /// Precomputed query vectors (JSONL `{id, vector}`).
    pub queries: Option<PathBuf>,
    /// Embedding service used when `queries` is not set.
    pub service_url: Option<String>,
    pub service_key_env: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptingSection {
    pub classify_template: PathBuf,
    pub clue_template: Option<PathBuf>,
    pub reason_template: Option<PathBuf>,
    pub cot_reason_template: Option<PathBuf>,
    #[serde(default = "default_budget")]
    pub max_tokens: usize,
}

fn default_budget() -> usize {
    4096
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    #[serde(default = "default_votes")]
    pub votes: usize,
    #[serde(default)]
    pub method: VoteMethod,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub retry_on_parse_failure: bool,
}

fn default_votes() -> usize {
    5
}

fn default_trials() -> usize {
    1
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            votes: default_votes(),
            method: VoteMethod::Majority,
            trials: default_trials(),
            retry_on_parse_failure: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    #[serde(default = "default_mode")]
    pub mode: AugmentMode,
    pub store: Option<PathBuf>,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    /// Overrides `[sampling]` for generation requests.
    pub sampling: Option<SamplingParams>,
    /// Provider used for generation; defaults to the top-level `provider`.
    pub provider: Option<String>,
}

fn default_mode() -> AugmentMode {
    AugmentMode::Carp
}

fn default_chunk() -> usize {
    32
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            store: None,
            chunk_size: default_chunk(),
            sampling: None,
            provider: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    /// Provider id used in cache keys; defaults to the section name.
    pub id: Option<String>,
    /// Mock fixture file (JSON).
    pub spec: Option<PathBuf>,
    pub base_url: Option<String>,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub context_limit: Option<usize>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default = "default_base_delay")]
    pub base_delay_ms: u64,
}

fn default_in_flight() -> usize {
    8
}

fn default_attempts() -> usize {
    5
}

fn default_base_delay() -> u64 {
    500
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    #[serde(default = "default_sample")]
    pub sample: usize,
    /// Word used in the reliability question, e.g. "sentiment" or "topic".
    #[serde(default = "default_noun")]
    pub task_noun: String,
    /// Premise/hypothesis demonstrations; the bundled set is used when unset.
    pub nli_demos: Option<PathBuf>,
    /// Provider acting as judge; defaults to the top-level `provider`.
    pub provider: Option<String>,
}

fn default_sample() -> usize {
    500
}

fn default_noun() -> String {
    "sentiment".into()
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            sample: default_sample(),
            task_noun: default_noun(),
            nli_demos: None,
            provider: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Run seed; overrides `sampler.seed` when set.
    pub seed: Option<u64>,
    /// Name of the `[providers.<name>]` entry to use.
    pub provider: Option<String>,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub verbalizer: VerbalizerSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub embeddings: EmbeddingsSection,
    pub prompting: PromptingSection,
    #[serde(default)]
    pub sampling: SamplingParams,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderSection>,
    #[serde(default)]
    pub cache: CacheSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub audit: AuditSection,
    /// Directory of the config file; relative paths were resolved against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

fn must_exist(what: &str, p: &Path) -> Result<()> {
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&body, base).with_context(|| format!("config {}", path.display()))
    }

    /// Parses `body`, resolving relative paths against `base`.
    pub fn parse(body: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(body)?;
        cfg.base_dir = base.to_path_buf();
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.dataset.path);
        resolve_opt(base, &mut self.dataset.labels_file);
        resolve_opt(base, &mut self.embeddings.index);
        resolve_opt(base, &mut self.embeddings.queries);
        resolve(base, &mut self.prompting.classify_template);
        resolve_opt(base, &mut self.prompting.clue_template);
        resolve_opt(base, &mut self.prompting.reason_template);
        resolve_opt(base, &mut self.prompting.cot_reason_template);
        resolve_opt(base, &mut self.augment.store);
        resolve_opt(base, &mut self.cache.dir);
        resolve_opt(base, &mut self.output.predictions);
        resolve_opt(base, &mut self.audit.nli_demos);
        for p in self.providers.values_mut() {
            resolve_opt(base, &mut p.spec);
        }
    }

    fn validate(&self) -> Result<()> {
        must_exist("dataset", &self.dataset.path)?;
        match (&self.dataset.labels, &self.dataset.labels_file) {
            (Some(_), Some(_)) => bail!("set only one of dataset.labels and dataset.labels_file"),
            (None, None) => bail!("dataset.labels or dataset.labels_file is required"),
            (None, Some(f)) => must_exist("labels file", f)?,
            _ => {}
        }
        must_exist("classify template", &self.prompting.classify_template)?;
        for (what, p) in [
            ("clue template", &self.prompting.clue_template),
            ("reason template", &self.prompting.reason_template),
            ("cot reason template", &self.prompting.cot_reason_template),
            ("nli demos", &self.audit.nli_demos),
        ] {
            if let Some(p) = p {
                must_exist(what, p)?;
            }
        }
        for (name, p) in &self.providers {
            match p.kind {
                ProviderKind::Mock => match &p.spec {
                    Some(spec) => must_exist(&format!("providers.{name}.spec"), spec)?,
                    None => bail!("providers.{name}: mock provider needs `spec`"),
                },
                ProviderKind::Http => {
                    if p.base_url.is_none() {
                        bail!("providers.{name}: http provider needs `base_url`");
                    }
                }
            }
            if p.max_in_flight == 0 || p.max_attempts == 0 {
                bail!("providers.{name}: max_in_flight and max_attempts must be positive");
            }
        }
        for name in self
            .provider
            .iter()
            .chain(&self.augment.provider)
            .chain(&self.audit.provider)
        {
            if !self.providers.contains_key(name) {
                bail!("provider {name:?} is not defined under [providers]");
            }
        }
        if self.sampler.strategy == Strategy::Random && self.sampler.order != DemoOrder::Random {
            bail!("sampler.strategy = \"random\" needs sampler.order = \"random\"");
        }
        if self.inference.votes == 0 || self.inference.trials == 0 {
            bail!("inference.votes and inference.trials must be positive");
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        let names = match (&self.dataset.labels, &self.dataset.labels_file) {
            (Some(l), _) => l.clone(),
            (None, Some(f)) => fs::read_to_string(f)
                .with_context(|| format!("reading {}", f.display()))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
            (None, None) => bail!("no labels configured"),
        };
        Ok(LabelSpace::new(names)?)
    }

    pub fn word_map(&self) -> Result<Option<BTreeMap<usize, String>>> {
        let Some(map) = &self.verbalizer.word_map else {
            return Ok(None);
        };
        let mut out = BTreeMap::new();
        for (k, v) in map {
            let id: usize = k
                .parse()
                .with_context(|| format!("verbalizer.word_map key {k:?} is not a label id"))?;
            out.insert(id, v.clone());
        }
        Ok(Some(out))
    }

    /// Demonstration store: `augment.store`, or `demos/<demo_corpus_tag>.jsonl`
    /// next to the config file.
    pub fn store_path(&self) -> PathBuf {
        self.augment.store.clone().unwrap_or_else(|| {
            self.base_dir
                .join("demos")
                .join(format!("{}.jsonl", self.sampler.demo_corpus_tag))
        })
    }

    /// Seed after applying an optional command-line override.
    pub fn effective_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(self.sampler.seed)
    }

    pub fn provider_section(&self, flag: Option<&str>) -> Result<(String, &ProviderSection)> {
        let name = match (flag, &self.provider) {
            (Some(n), _) => n.to_string(),
            (None, Some(n)) => n.clone(),
            (None, None) if self.providers.len() == 1 => self.providers.keys().next().cloned().expect("one provider"),
            (None, None) => bail!("no provider selected; set `provider` or pass --provider"),
        };
        let section = self
            .providers
            .get(&name)
            .with_context(|| format!("provider {name:?} is not defined under [providers]"))?;
        Ok((name, section))
    }
}
