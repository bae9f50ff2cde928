mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use clueprompt::augmenter::DemoStore;
use clueprompt::embedding_store::{SourceTag, VectorIndex};
use clueprompt::inference::read_predictions;
use clueprompt_cli::commands::*;
use clueprompt_cli::config::PipelineConfig;
use common::{Experiment, Options};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clueprompt"))
}

fn ingest(exp: &Experiment) {
    cmd_ingest_embeddings(&IngestArgs {
        input: exp.path("emb/train.jsonl"),
        source_tag: SourceTag::SimcseStyle,
        output: exp.path("index.json"),
    })
    .unwrap();
}

fn augment_args(config: &Path) -> AugmentArgs {
    AugmentArgs {
        config: config.to_path_buf(),
        mode: None,
        limit: None,
        provider: None,
        store: None,
        retry_invalid: false,
    }
}

fn classify_args(config: &Path) -> ClassifyArgs {
    ClassifyArgs {
        config: config.to_path_buf(),
        seed: None,
        limit: None,
        provider: None,
        trial: None,
        output: None,
    }
}

/// Experiment with an index and an augmented store, ready to classify.
fn prepared(n_train: usize, n_test: usize, o: &Options) -> (Experiment, std::path::PathBuf) {
    let exp = Experiment::new(n_train, n_test, 6, 5);
    ingest(&exp);
    let cfg = exp.config("run", o);
    cmd_augment(&augment_args(&cfg)).unwrap();
    (exp, cfg)
}

#[test]
fn ingest_records_source_tag() {
    let exp = Experiment::new(10, 2, 4, 1);
    let out = cmd_ingest_embeddings(&IngestArgs {
        input: exp.path("emb/train.jsonl"),
        source_tag: SourceTag::FinetunedStyle,
        output: exp.path("idx/index.json"),
    })
    .unwrap();
    assert_eq!((out.records, out.dimension), (10, 4));
    let index = VectorIndex::load(&exp.path("idx/index.json")).unwrap();
    assert_eq!(index.source_tag(), SourceTag::FinetunedStyle);
}

#[test]
fn ingest_exit_codes() {
    let exp = Experiment::new(4, 1, 3, 1);
    let ok = bin()
        .args(["ingest-embeddings", "--input"])
        .arg(exp.path("emb/train.jsonl"))
        .args(["--source-tag", "finetuned-style", "--output"])
        .arg(exp.path("index.json"))
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let bad = exp.write(
        "bad.jsonl",
        "{\"id\":\"a\",\"vector\":[1,0,0]}\n{\"id\":\"b\",\"vector\":[1,0]}\n",
    );
    let out = bin()
        .args(["ingest-embeddings", "--input"])
        .arg(&bad)
        .arg("--output")
        .arg(exp.path("bad-index.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
}

#[test]
fn augment_then_rerun_skips_everything() {
    let exp = Experiment::new(12, 2, 4, 2);
    let cfg = exp.config("aug", &Options::default());
    let first = cmd_augment(&augment_args(&cfg)).unwrap();
    assert_eq!(first.summary.generated, 12);
    assert_eq!(first.stats.provider_calls, 24);
    let second = cmd_augment(&augment_args(&cfg)).unwrap();
    assert_eq!(second.summary.skipped, 12);
    assert_eq!(second.summary.generated, 0);
    assert_eq!(second.stats.provider_calls, 0);
    let store = DemoStore::load(&exp.path("demos.jsonl")).unwrap();
    assert!(store.records().iter().all(|r| r.valid && !r.clues.is_empty()));
}

#[test]
fn augment_cot_mode_has_reasoning_only() {
    let exp = Experiment::new(6, 2, 4, 3);
    let cfg = exp.config("aug", &Options::default());
    let mut args = augment_args(&cfg);
    args.mode = Some(ModeArg::Cot);
    args.store = Some(exp.path("cot.jsonl"));
    args.limit = Some(4);
    let out = cmd_augment(&args).unwrap();
    assert_eq!(out.summary.generated, 4);
    let store = DemoStore::load(&exp.path("cot.jsonl")).unwrap();
    assert_eq!(store.len(), 4);
    assert!(store
        .records()
        .iter()
        .all(|r| r.clues.is_empty() && !r.reasoning.is_empty()));
}

#[test]
fn classify_limit_and_determinism() {
    let (exp, cfg) = prepared(40, 60, &Options::default());
    let mut args = classify_args(&cfg);
    args.limit = Some(50);
    args.output = Some(exp.path("a.jsonl"));
    let out = cmd_classify(&args).unwrap();
    assert_eq!(out.examples, 50);
    assert_eq!(read_predictions(&exp.path("a.jsonl")).unwrap().len(), 50);
    args.output = Some(exp.path("b.jsonl"));
    cmd_classify(&args).unwrap();
    assert_eq!(
        fs::read(exp.path("a.jsonl")).unwrap(),
        fs::read(exp.path("b.jsonl")).unwrap()
    );
}

#[test]
fn classify_warm_cache_makes_no_calls() {
    let (_exp, cfg) = prepared(20, 10, &Options::default());
    let cold = cmd_classify(&classify_args(&cfg)).unwrap();
    assert_eq!(cold.stats.provider_calls, 30);
    let warm = cmd_classify(&classify_args(&cfg)).unwrap();
    assert_eq!(warm.stats.provider_calls, 0);
    assert_eq!(warm.stats.cache_hits, 30);
}

#[test]
fn classify_without_index_exits_1() {
    let exp = Experiment::new(10, 4, 4, 4);
    let o = Options {
        index: false,
        ..Options::default()
    };
    let cfg = exp.config("noindex", &o);
    cmd_augment(&augment_args(&cfg)).unwrap();
    let err = cmd_classify(&classify_args(&cfg)).unwrap_err();
    assert!(format!("{err:#}").contains("embeddings.index"));
    let out = bin().args(["classify", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn classify_zero_shot_and_random_sampler() {
    let exp = Experiment::new(10, 4, 4, 6);
    let zero = exp.config(
        "zero",
        &Options {
            template: "vanilla-zero".into(),
            index: false,
            ..Options::default()
        },
    );
    // The nearest-demo-label mock finds no demonstrations in a zero-shot
    // prompt, so a constant answer is used instead.
    exp.write(
        "mock-classifier.json",
        r#"{"fallback": {"rule": "constant", "text": "Positive"}}"#,
    );
    let out = cmd_classify(&classify_args(&zero)).unwrap();
    assert_eq!(out.trials[0].accuracy, 0.5);

    let random = exp.config(
        "random",
        &Options {
            strategy: "random".into(),
            order: "random".into(),
            index: false,
            trials: 3,
            ..Options::default()
        },
    );
    cmd_augment(&augment_args(&random)).unwrap();
    let out = cmd_classify(&classify_args(&random)).unwrap();
    assert_eq!(out.trials.len(), 3);
    for t in 0..3 {
        assert!(exp.path(&format!("out/random.trial{t}.jsonl")).exists());
    }
}

#[test]
fn eval_single_and_multiple_trials() {
    let (exp, cfg) = prepared(
        20,
        10,
        &Options {
            trials: 5,
            ..Options::default()
        },
    );
    cmd_classify(&classify_args(&cfg)).unwrap();
    let one = cmd_eval(&EvalArgs {
        files: vec![exp.path("out/run.trial0.jsonl")],
        config: Some(cfg.clone()),
        json: false,
        csv: Some(exp.path("out/per_class.csv")),
    })
    .unwrap();
    assert_eq!(one.report.std, 0.0);
    assert_eq!(one.report.mean, one.report.accuracy);
    assert!(one.table().contains("Positive"));
    assert!(
        fs::read_to_string(exp.path("out/per_class.csv"))
            .unwrap()
            .lines()
            .count()
            >= 3
    );

    let files = (0..5).map(|t| exp.path(&format!("out/run.trial{t}.jsonl"))).collect();
    let five = cmd_eval(&EvalArgs {
        files,
        config: None,
        json: true,
        csv: None,
    })
    .unwrap();
    assert_eq!(five.report.trials.len(), 5);
    assert_eq!(five.report.records, 50);
}

#[test]
fn eval_empty_file_exits_1() {
    let exp = Experiment::new(2, 1, 2, 1);
    let empty = exp.write("empty.jsonl", "");
    assert!(cmd_eval(&EvalArgs {
        files: vec![empty.clone()],
        config: None,
        json: false,
        csv: None,
    })
    .is_err());
    let out = bin().arg("eval").arg(&empty).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn subsample_contract() {
    let exp = Experiment::new(60, 2, 2, 9);
    let cfg = exp.config("sub", &Options::default());
    let args = SubsampleArgs {
        config: cfg.clone(),
        n: 16,
        seed: Some(3),
        output: exp.path("sub/a.jsonl"),
    };
    let out = cmd_subsample(&args).unwrap();
    assert_eq!(out.written, 32);
    cmd_subsample(&SubsampleArgs {
        output: exp.path("sub/b.jsonl"),
        ..args.clone()
    })
    .unwrap();
    assert_eq!(
        fs::read(exp.path("sub/a.jsonl")).unwrap(),
        fs::read(exp.path("sub/b.jsonl")).unwrap()
    );
    let out = bin()
        .args(["subsample", "--n", "31", "--config"])
        .arg(&cfg)
        .arg("--output")
        .arg(exp.path("sub/c.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn audit_and_compact() {
    let (exp, cfg) = prepared(12, 2, &Options::default());
    let audit = cmd_audit(&AuditArgs {
        config: cfg.clone(),
        store: None,
        sample: None,
        seed: None,
        provider: None,
        checks: Vec::new(),
    })
    .unwrap();
    assert_eq!(audit.sampled_ids.len(), 10);
    assert_eq!(audit.reliability, Some(1.0));
    assert_eq!(audit.faithfulness, Some(1.0));
    assert!((audit.fluency_ppl.unwrap() - 2.0).abs() < 1e-9);
    assert_eq!(
        cmd_compact(&CompactArgs {
            store: exp.path("demos.jsonl")
        })
        .unwrap(),
        12
    );
}

#[test]
fn config_rejects_typos_via_binary() {
    let exp = Experiment::new(4, 2, 2, 1);
    let cfg = exp.config("typo", &Options::default());
    let body = fs::read_to_string(&cfg).unwrap().replace("votes =", "vote =");
    let bad = exp.write("typo2.toml", &body);
    let out = bin().args(["classify", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
}

#[test]
fn shipped_configs_deserialize() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let demo = root.join("demo/carp-knn.toml");
    // The demo ships its data, so it passes full validation.
    PipelineConfig::load(&demo).unwrap();
    let mut n = 0;
    for entry in fs::read_dir(root.join("configs/sst2")).unwrap() {
        let path = entry.unwrap().path();
        let body = fs::read_to_string(&path).unwrap();
        // Datasets are not shipped, so only the schema is checked here.
        toml::from_str::<PipelineConfig>(&body).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert_eq!(n, 9);
}
