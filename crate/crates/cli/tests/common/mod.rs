//! Synthetic experiments on disk for CLI-level tests.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const LABELS: [&str; 2] = ["Negative", "Positive"];

pub fn templates_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../templates")
}

#[derive(Debug, Clone)]
pub struct Row {
    pub id: String,
    pub text: String,
    pub label: usize,
    pub vector: Vec<f64>,
}

/// Two linearly separable classes: the sign of the first coordinate is the
/// label, the remaining coordinates are noise.
pub fn separable_rows(prefix: &str, n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Row> {
    let words = [
        ["dull", "tedious", "clumsy", "lifeless", "weak"],
        ["warm", "clever", "moving", "superb", "joyous"],
    ];
    (0..n)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let mut vector = vec![sign * rng.random_range(0.05..1.0)];
            vector.extend((1..dim).map(|_| rng.random_range(-1.0..1.0)));
            let w = words[label][rng.random_range(0..5)];
            Row {
                id: format!("{prefix}{i:04}"),
                text: format!("a {w} film, number {i}"),
                label,
                vector,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Options {
    /// Template file under `templates/sst2`, without extension.
    pub template: String,
    pub strategy: String,
    pub order: String,
    pub k: usize,
    pub votes: usize,
    pub method: String,
    pub trials: usize,
    pub cache: bool,
    pub index: bool,
    pub split: String,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            template: "carp-few".into(),
            strategy: "knn".into(),
            order: "low-to-high".into(),
            k: 8,
            votes: 3,
            method: "weighted".into(),
            trials: 1,
            cache: true,
            index: true,
            split: "test".into(),
        }
    }
}

pub struct Experiment {
    pub dir: tempfile::TempDir,
    pub train: Vec<Row>,
    pub test: Vec<Row>,
}

fn jsonl(path: &Path, values: impl IntoIterator<Item = serde_json::Value>) {
    let body: String = values.into_iter().map(|v| format!("{v}\n")).collect();
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, body).unwrap();
}

impl Experiment {
    pub fn new(n_train: usize, n_test: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = separable_rows("tr", n_train, dim, &mut rng);
        let test = separable_rows("te", n_test, dim, &mut rng);
        let exp = Self {
            dir: tempfile::tempdir().unwrap(),
            train,
            test,
        };
        let data = |rows: &[Row]| -> Vec<serde_json::Value> {
            rows.iter()
                .map(|r| json!({"id": r.id, "text": r.text, "label": LABELS[r.label]}))
                .collect()
        };
        let vecs = |rows: &[Row]| -> Vec<serde_json::Value> {
            rows.iter().map(|r| json!({"id": r.id, "vector": r.vector})).collect()
        };
        jsonl(&exp.path("data/train.jsonl"), data(&exp.train));
        jsonl(&exp.path("data/test.jsonl"), data(&exp.test));
        jsonl(&exp.path("emb/train.jsonl"), vecs(&exp.train));
        jsonl(&exp.path("emb/test.jsonl"), vecs(&exp.test));
        exp.write(
            "mock-classifier.json",
            &json!({
                "provider_id": "mock-classifier",
                "fallback": {"rule": "nearest-demo-label", "label_header": "SENTIMENT"},
                "fallback_token_logprob": -0.1
            })
            .to_string(),
        );
        exp.write(
            "mock-writer.json",
            &json!({
                "provider_id": "mock-writer",
                "fallback": {"rule": "constant", "text": "Word choice and tone support the given label."}
            })
            .to_string(),
        );
        exp.write(
            "mock-judge.json",
            &json!({
                "provider_id": "mock-judge",
                "fallback": {"rule": "constant", "text": "Yes"},
                "score_token_logprob": -std::f64::consts::LN_2
            })
            .to_string(),
        );
        exp
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn write(&self, rel: &str, body: &str) -> PathBuf {
        let p = self.path(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(&p, body).unwrap();
        p
    }

    /// Writes `<name>.toml` and returns its path.
    pub fn config(&self, name: &str, o: &Options) -> PathBuf {
        let t = templates_dir().join("sst2");
        let tpl = |f: &str| t.join(format!("{f}.tpl")).display().to_string();
        let mut s = format!(
            r#"seed = 11
provider = "classifier"

[dataset]
path = "data"
labels = ["Negative", "Positive"]
split = "{split}"

[sampler]
strategy = "{strategy}"
order = "{order}"
k = {k}

[embeddings]
queries = "emb/test.jsonl"
{index}
[prompting]
classify_template = "{classify}"
clue_template = "{clue}"
reason_template = "{reason}"
cot_reason_template = "{cot}"

[inference]
votes = {votes}
method = "{method}"
trials = {trials}

[augment]
store = "demos.jsonl"
provider = "writer"

[audit]
provider = "judge"
sample = 10

[providers.classifier]
kind = "mock"
spec = "mock-classifier.json"

[providers.writer]
kind = "mock"
spec = "mock-writer.json"

[providers.judge]
kind = "mock"
spec = "mock-judge.json"

[output]
predictions = "out/{name}.jsonl"
"#,
            split = o.split,
            strategy = o.strategy,
            order = o.order,
            k = o.k,
            index = if o.index { "index = \"index.json\"\n" } else { "" },
            classify = tpl(&o.template),
            clue = tpl("clue-gen"),
            reason = tpl("reason-gen"),
            cot = tpl("cot-reason-gen"),
            votes = o.votes,
            method = o.method,
            trials = o.trials,
        );
        if o.cache {
            s.push_str(&format!("\n[cache]\ndir = \"cache-{name}\"\n"));
        }
        self.write(&format!("{name}.toml"), &s)
    }
}
