//! Datasets, label spaces, verbalizers and low-resource subsampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown label name {label:?}")]
    UnknownLabel { path: PathBuf, line: usize, label: String },
    #[error("{0}: split is empty")]
    EmptySplit(PathBuf),
    #[error("{path}: duplicate example id {id:?}")]
    DuplicateId { path: PathBuf, id: String },
    #[error("dataset not found at {0}")]
    Missing(PathBuf),
    #[error("class {name:?} (id {label_id}) has {available} examples, {requested} requested")]
    ShortClass {
        label_id: usize,
        name: String,
        available: usize,
        requested: usize,
    },
    #[error("invalid label space: {0}")]
    LabelSpace(String),
    #[error("invalid verbalizer: {0}")]
    Verbalizer(String),
    #[error("label word {0:?} does not match any verbalizer word")]
    UnmatchedWord(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One labeled text instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub label_id: usize,
}

/// Ordered class names; a label's id is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn new<I, S>(names: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = names.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(CorpusError::LabelSpace("no labels".into()));
        }
        let mut seen = HashSet::new();
        for name in &labels {
            if name.trim().is_empty() {
                return Err(CorpusError::LabelSpace("empty label name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(CorpusError::LabelSpace(format!("duplicate label {name:?}")));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn name(&self, label_id: usize) -> Option<&str> {
        self.labels.get(label_id).map(String::as_str)
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerbalizerStrategy {
    Annotation,
    PositionIndex,
    Synonym,
    Flipped,
    RandomWord,
    SpecialToken,
}

impl VerbalizerStrategy {
    pub const ALL: [VerbalizerStrategy; 6] = [
        Self::Annotation,
        Self::PositionIndex,
        Self::Synonym,
        Self::Flipped,
        Self::RandomWord,
        Self::SpecialToken,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Annotation => "annotation",
            Self::PositionIndex => "position-index",
            Self::Synonym => "synonym",
            Self::Flipped => "flipped",
            Self::RandomWord => "random-word",
            Self::SpecialToken => "special-token",
        }
    }
}

impl fmt::Display for VerbalizerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerbalizerStrategy {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CorpusError::Verbalizer(format!("unknown strategy {s:?}")))
    }
}

/// Maps label ids to the words the model is expected to emit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    strategy: VerbalizerStrategy,
    words: Vec<String>,
}

impl Verbalizer {
    fn from_words(strategy: VerbalizerStrategy, words: Vec<String>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for w in &words {
            let key = normalize_word(w);
            if key.is_empty() {
                return Err(CorpusError::Verbalizer(format!(
                    "label word {w:?} is empty after normalization"
                )));
            }
            if !seen.insert(key) {
                return Err(CorpusError::Verbalizer(format!("label word {w:?} is not unique")));
            }
        }
        Ok(Self { strategy, words })
    }

    pub fn strategy(&self) -> VerbalizerStrategy {
        self.strategy
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, label_id: usize) -> Option<&str> {
        self.words.get(label_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Swaps the two words of a binary verbalizer.
    pub fn flipped(&self) -> Result<Self, CorpusError> {
        if self.words.len() != 2 {
            return Err(CorpusError::Verbalizer(format!(
                "flipped requires a binary label space, got {} labels",
                self.words.len()
            )));
        }
        let strategy = match self.strategy {
            VerbalizerStrategy::Flipped => VerbalizerStrategy::Annotation,
            _ => VerbalizerStrategy::Flipped,
        };
        Ok(Self {
            strategy,
            words: vec![self.words[1].clone(), self.words[0].clone()],
        })
    }

    /// Human-readable enumeration used in task descriptions: "A or B", "A, B, or C".
    pub fn choice_list(&self) -> String {
        match self.words.as_slice() {
            [] => String::new(),
            [one] => one.clone(),
            [a, b] => format!("{a} or {b}"),
            [init @ .., last] => format!("{}, or {last}", init.join(", ")),
        }
    }
}

pub fn build_verbalizer(
    space: &LabelSpace,
    strategy: VerbalizerStrategy,
    word_map: Option<&BTreeMap<usize, String>>,
) -> Result<Verbalizer, CorpusError> {
    let from_map = |map: &BTreeMap<usize, String>| -> Result<Vec<String>, CorpusError> {
        if let Some(extra) = map.keys().find(|&&id| id >= space.len()) {
            return Err(CorpusError::Verbalizer(format!(
                "word map references label id {extra} outside the label space"
            )));
        }
        (0..space.len())
            .map(|id| {
                map.get(&id).cloned().ok_or_else(|| {
                    CorpusError::Verbalizer(format!(
                        "word map is missing label {id} ({})",
                        space.name(id).unwrap_or("?")
                    ))
                })
            })
            .collect()
    };
    match strategy {
        VerbalizerStrategy::Annotation => Verbalizer::from_words(strategy, space.names().to_vec()),
        VerbalizerStrategy::PositionIndex => {
            Verbalizer::from_words(strategy, (1..=space.len()).map(cardinal_word).collect())
        }
        VerbalizerStrategy::Flipped => {
            if space.len() != 2 {
                return Err(CorpusError::Verbalizer(format!(
                    "flipped requires a binary label space, got {} labels",
                    space.len()
                )));
            }
            let base = match word_map {
                Some(map) => from_map(map)?,
                None => space.names().to_vec(),
            };
            Verbalizer::from_words(strategy, vec![base[1].clone(), base[0].clone()])
        }
        VerbalizerStrategy::Synonym | VerbalizerStrategy::RandomWord | VerbalizerStrategy::SpecialToken => {
            let map =
                word_map.ok_or_else(|| CorpusError::Verbalizer(format!("strategy {strategy} requires a word map")))?;
            Verbalizer::from_words(strategy, from_map(map)?)
        }
    }
}

fn cardinal_word(n: usize) -> String {
    const ONES: [&str; 20] = [
        "Zero",
        "One",
        "Two",
        "Three",
        "Four",
        "Five",
        "Six",
        "Seven",
        "Eight",
        "Nine",
        "Ten",
        "Eleven",
        "Twelve",
        "Thirteen",
        "Fourteen",
        "Fifteen",
        "Sixteen",
        "Seventeen",
        "Eighteen",
        "Nineteen",
    ];
    const TENS: [&str; 10] = [
        "", "", "Twenty", "Thirty", "Forty", "Fifty", "Sixty", "Seventy", "Eighty", "Ninety",
    ];
    match n {
        0..=19 => ONES[n].to_string(),
        20..=99 if n.is_multiple_of(10) => TENS[n / 10].to_string(),
        20..=99 => format!("{}-{}", TENS[n / 10], ONES[n % 10]),
        100..=999 => {
            let head = format!("{} Hundred", ONES[n / 100]);
            match n % 100 {
                0 => head,
                rest => format!("{head} {}", cardinal_word(rest).to_lowercase()),
            }
        }
        _ => n.to_string(),
    }
}

/// Lowercases and strips leading/trailing punctuation and whitespace.
pub fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

pub fn normalize_label_word(word: &str, verbalizer: &Verbalizer) -> Result<usize, CorpusError> {
    let key = normalize_word(word);
    if !key.is_empty() {
        if let Some(id) = verbalizer.words.iter().position(|w| normalize_word(w) == key) {
            return Ok(id);
        }
    }
    Err(CorpusError::UnmatchedWord(word.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Tsv,
}

impl DatasetFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Jsonl => "jsonl",
            Self::Tsv => "tsv",
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "tsv" => Ok(Self::Tsv),
            other => Err(CorpusError::Parse {
                path: PathBuf::new(),
                line: 0,
                message: format!("unknown dataset format {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: Option<String>,
    text: Option<String>,
    label: Option<String>,
}

/// Wire form of an [`Example`] in dataset JSONL files.
#[derive(Serialize)]
struct JsonlOut<'a> {
    id: &'a str,
    text: &'a str,
    label: &'a str,
}

/// Loads a dataset.
///
/// `path` is either a single file (loaded as the train split) or a directory
/// holding `train.<ext>` and optionally `dev.<ext>` / `test.<ext>`. TSV rows
/// get ids `row-<k>` numbered continuously across train, dev and test so ids
/// never collide between splits.
pub fn load_dataset(path: &Path, format: DatasetFormat, space: &LabelSpace) -> Result<DatasetSplit, CorpusError> {
    if path.is_file() {
        let mut next_row = 0;
        let train = load_examples(path, format, space, &mut next_row)?;
        return Ok(DatasetSplit {
            train,
            ..Default::default()
        });
    }
    if !path.is_dir() {
        return Err(CorpusError::Missing(path.to_path_buf()));
    }
    let file = |name: &str| path.join(format!("{name}.{}", format.extension()));
    let train_path = file("train");
    if !train_path.is_file() {
        return Err(CorpusError::Missing(train_path));
    }
    let mut next_row = 0;
    let train = load_examples(&train_path, format, space, &mut next_row)?;
    let mut optional = |name: &str| -> Result<Vec<Example>, CorpusError> {
        let p = file(name);
        if p.is_file() {
            load_examples(&p, format, space, &mut next_row)
        } else {
            Ok(Vec::new())
        }
    };
    let dev = optional("dev")?;
    let test = optional("test")?;
    Ok(DatasetSplit { train, dev, test })
}

/// Loads one split file. `next_row` numbers TSV rows and is advanced past them.
pub fn load_examples(
    path: &Path,
    format: DatasetFormat,
    space: &LabelSpace,
    next_row: &mut usize,
) -> Result<Vec<Example>, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: usize, message: String| CorpusError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut examples = Vec::new();
    let mut ids = HashSet::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (id, text, label) = match format {
            DatasetFormat::Jsonl => {
                let rec: JsonlRecord = serde_json::from_str(raw).map_err(|e| parse_err(line, e.to_string()))?;
                let text = rec
                    .text
                    .ok_or_else(|| parse_err(line, "missing field \"text\"".into()))?;
                let label = rec
                    .label
                    .ok_or_else(|| parse_err(line, "missing field \"label\"".into()))?;
                let id = rec.id.ok_or_else(|| parse_err(line, "missing field \"id\"".into()))?;
                (id, text, label)
            }
            DatasetFormat::Tsv => {
                let (label, text) = raw
                    .split_once('\t')
                    .ok_or_else(|| parse_err(line, "expected label<TAB>text".into()))?;
                let id = format!("row-{}", *next_row);
                *next_row += 1;
                (id, text.to_string(), label.to_string())
            }
        };
        if text.trim().is_empty() {
            return Err(parse_err(line, "text is empty".into()));
        }
        let label_id = space.id_of(&label).ok_or_else(|| CorpusError::UnknownLabel {
            path: path.to_path_buf(),
            line,
            label: label.clone(),
        })?;
        if !ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId {
                path: path.to_path_buf(),
                id,
            });
        }
        examples.push(Example { id, text, label_id });
    }
    if examples.is_empty() {
        return Err(CorpusError::EmptySplit(path.to_path_buf()));
    }
    Ok(examples)
}

/// Writes examples as dataset JSONL (`id`, `text`, `label` name).
pub fn write_examples_jsonl(path: &Path, examples: &[Example], space: &LabelSpace) -> Result<(), CorpusError> {
    let mut out = String::new();
    for ex in examples {
        let label = space
            .name(ex.label_id)
            .ok_or_else(|| CorpusError::LabelSpace(format!("label id {} out of range", ex.label_id)))?;
        let line = serde_json::to_string(&JsonlOut {
            id: &ex.id,
            text: &ex.text,
            label,
        })
        .expect("string fields always serialize");
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Draws exactly `n` examples per class.
///
/// Each class is shuffled with a seeded RNG and its first `n` members kept;
/// the result is ordered by class id, then by position in `train`.
pub fn subsample_per_class(
    train: &[Example],
    space: &LabelSpace,
    n: usize,
    seed: u64,
) -> Result<Vec<Example>, CorpusError> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); space.len()];
    for (pos, ex) in train.iter().enumerate() {
        let bucket = by_class.get_mut(ex.label_id).ok_or_else(|| {
            CorpusError::LabelSpace(format!(
                "example {} has label id {} outside the label space",
                ex.id, ex.label_id
            ))
        })?;
        bucket.push(pos);
    }
    for (label_id, members) in by_class.iter().enumerate() {
        if members.len() < n {
            return Err(CorpusError::ShortClass {
                label_id,
                name: space.name(label_id).unwrap_or_default().to_string(),
                available: members.len(),
                requested: n,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * space.len());
    for mut members in by_class {
        members.shuffle(&mut rng);
        members.truncate(n);
        members.sort_unstable();
        out.extend(members.into_iter().map(|pos| train[pos].clone()));
    }
    Ok(out)
}
