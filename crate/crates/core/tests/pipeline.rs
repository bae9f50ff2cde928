use std::collections::HashSet;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clueprompt::augmenter::{augment_corpus, AugmentConfig, AugmentMode, AugmentedDemonstration, DemoStore};
use clueprompt::corpus::{build_verbalizer, Example, LabelSpace, Verbalizer, VerbalizerStrategy};
use clueprompt::embedding_store::{EmbeddingRecord, PrecomputedEmbeddings, SourceTag, VectorIndex};
use clueprompt::inference::{InferenceConfig, Pipeline, VoteMethod};
use clueprompt::llm_gateway::{
    CompletionRequest, CompletionResponse, DiskCache, FallbackRule, Gateway, MockProvider, Provider, ProviderError,
    RetryPolicy,
};
use clueprompt::prompting::PromptTemplate;
use clueprompt::sampler::SamplerConfig;

const CARP_FEW: &str = "kind: classify\nmode: carp\nshot: few\nfield_headers: INPUT, CLUES, REASONING, SENTIMENT\n[description]\nClassify the SENTIMENT as {labels}.\n[demo]\nINPUT: {text}\nCLUES: {clues}\nREASONING: {reasoning}\nSENTIMENT: {label_word}\n[request]\nINPUT: {text}\n";
const CLUE: &str = "kind: clue-gen\nmode: carp\nfield_headers: INPUT, SENTIMENT\n[description]\nList CLUES.\n[request]\nINPUT: {text}\nSENTIMENT: {label_word}\n";
const REASON: &str = "kind: reason-gen\nmode: carp\nfield_headers: INPUT, LABEL, CLUES, REASONING\n[description]\nReason.\n[request]\nINPUT: {text}\nLABEL: {label_word}\nCLUES: {clues}\nREASONING:\n";

fn verbalizer() -> Verbalizer {
    build_verbalizer(
        &LabelSpace::new(["Negative", "Positive"]).unwrap(),
        VerbalizerStrategy::Annotation,
        None,
    )
    .unwrap()
}

/// Echoes the prompt back after a short sleep so requests overlap.
struct Echo;

impl Provider for Echo {
    fn id(&self) -> &str {
        "echo"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        thread::sleep(Duration::from_millis(3));
        Ok(CompletionResponse {
            text: format!("reply to {}", request.prompt),
            token_logprobs: None,
            finish_reason: "stop".into(),
            provider_id: "echo".into(),
        })
    }
}

#[test]
fn concurrent_requests_stay_bounded_and_attributed() {
    let gateway = Gateway::new(Arc::new(Echo)).with_max_in_flight(3);
    thread::scope(|s| {
        let handles: Vec<_> = (0..24)
            .map(|i| {
                let gw = &gateway;
                s.spawn(move || {
                    let prompt = format!("tag-{i}");
                    let (resp, _) = gw.complete(&CompletionRequest::new(prompt.clone())).unwrap();
                    (prompt, resp.text)
                })
            })
            .collect();
        for h in handles {
            let (prompt, text) = h.join().unwrap();
            assert_eq!(text, format!("reply to {prompt}"));
        }
    });
    assert!(gateway.limiter().peak() <= 3);
    assert!(gateway.limiter().peak() >= 2, "requests never overlapped");
    assert_eq!(gateway.stats().provider_calls, 24);
}

fn demo(id: &str, label: &str, valid: bool) -> AugmentedDemonstration {
    AugmentedDemonstration {
        example_id: id.into(),
        text: format!("text of {id}"),
        clues: "some clues".into(),
        reasoning: "some reasoning".into(),
        label_word: label.into(),
        valid,
        invalid_reason: (!valid).then(|| "empty generation".into()),
    }
}

#[test]
fn invalid_demonstrations_are_never_used() {
    // The two invalid records are the closest to the query.
    let store = DemoStore::from_records([
        demo("bad1", "Positive", false),
        demo("bad2", "Positive", false),
        demo("good1", "Negative", true),
        demo("good2", "Negative", true),
        demo("good3", "Positive", true),
    ]);
    let vectors = [
        ("bad1", vec![1.0, 0.0]),
        ("bad2", vec![0.99, 0.1]),
        ("good1", vec![0.7, 0.7]),
        ("good2", vec![0.0, 1.0]),
        ("good3", vec![-1.0, 0.2]),
    ];
    let index = VectorIndex::new(
        vectors
            .iter()
            .map(|(id, v)| EmbeddingRecord {
                example_id: id.to_string(),
                vector: v.clone(),
            })
            .collect(),
        SourceTag::Other,
    )
    .unwrap();
    let queries = PrecomputedEmbeddings::from_records(vec![EmbeddingRecord {
        example_id: "q".into(),
        vector: vec![1.0, 0.05],
    }])
    .unwrap();
    let v = verbalizer();
    let template = PromptTemplate::parse(CARP_FEW).unwrap().bind_labels(&v).unwrap();
    let gateway = Gateway::new(Arc::new(MockProvider::new(
        Default::default(),
        Some(FallbackRule::NearestDemoLabel {
            label_header: "SENTIMENT".into(),
        }),
    )));
    let config = InferenceConfig {
        votes: 1,
        sampler: SamplerConfig {
            k: 5,
            ..SamplerConfig::default()
        },
        ..InferenceConfig::default()
    };
    let pipeline = Pipeline::new(&template, &v, &gateway, config)
        .with_demos(&store)
        .with_index(&index, &queries);
    let q = Example {
        id: "q".into(),
        text: "query".into(),
        label_id: 0,
    };
    let c = pipeline.classify(&q).unwrap();
    assert_eq!(c.record.demo_ids, ["good3", "good2", "good1"]);
    assert!(c.truncated);
    assert!(!c.prompt.text.contains("bad1") && !c.prompt.text.contains("bad2"));
    assert_eq!(c.record.predicted, Some(0));
}

fn examples(n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example {
            id: format!("e{i:03}"),
            text: format!("example {i}"),
            label_id: i % 2,
        })
        .collect()
}

#[test]
fn store_ids_match_train_ids() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.jsonl");
    let gateway = Gateway::new(Arc::new(MockProvider::new(
        Default::default(),
        Some(FallbackRule::Constant { text: "ok".into() }),
    )));
    let mut config = AugmentConfig::new(
        AugmentMode::Carp,
        Some(PromptTemplate::parse(CLUE).unwrap()),
        PromptTemplate::parse(REASON).unwrap(),
    );
    config.chunk_size = 7;
    let train = examples(50);
    augment_corpus(&train, &verbalizer(), &gateway, &config, &path).unwrap();
    let store = DemoStore::load(&path).unwrap();
    assert_eq!(store.len(), train.len());
    let got: HashSet<_> = store.records().iter().map(|r| r.example_id.clone()).collect();
    let want: HashSet<_> = train.iter().map(|e| e.id.clone()).collect();
    assert_eq!(got, want);
    // Appends keep input order even though chunks run in parallel.
    let order: Vec<_> = store.records().iter().map(|r| r.example_id.clone()).collect();
    assert_eq!(order, train.iter().map(|e| e.id.clone()).collect::<Vec<_>>());
}

#[test]
fn replay_with_cache_issues_no_calls() {
    let dir = tempfile::tempdir().unwrap();
    let v = verbalizer();
    let template = PromptTemplate::parse(CARP_FEW).unwrap().bind_labels(&v).unwrap();
    let store = DemoStore::from_records((0..10).map(|i| demo(&format!("d{i}"), ["Negative", "Positive"][i % 2], true)));
    let run = || {
        let mock = Arc::new(MockProvider::from_spec(clueprompt::llm_gateway::MockSpec {
            fallback: Some(FallbackRule::MajorityDemoLabel {
                label_header: "SENTIMENT".into(),
            }),
            fallback_token_logprob: Some(-0.2),
            ..Default::default()
        }));
        let gateway = Gateway::new(mock.clone())
            .with_cache(DiskCache::open(dir.path()).unwrap())
            .with_retry(RetryPolicy::immediate());
        let config = InferenceConfig {
            votes: 3,
            method: VoteMethod::Weighted,
            sampler: SamplerConfig {
                strategy: clueprompt::sampler::Strategy::Random,
                order: clueprompt::sampler::DemoOrder::Random,
                k: 4,
                seed: 9,
                ..SamplerConfig::default()
            },
            ..InferenceConfig::default()
        };
        let pipeline = Pipeline::new(&template, &v, &gateway, config).with_demos(&store);
        let out: Vec<_> = pipeline
            .classify_all(&examples(12))
            .unwrap()
            .into_iter()
            .map(|c| c.record)
            .collect();
        (out, mock.call_count())
    };
    let (first, cold_calls) = run();
    let (second, warm_calls) = run();
    assert_eq!(cold_calls, 36);
    assert_eq!(warm_calls, 0);
    assert_eq!(first, second);
}
