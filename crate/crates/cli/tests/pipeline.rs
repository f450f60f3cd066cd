use webguard_cli::{exit_code, train_pipeline, PipelineArtifact, RunConfig};
use webguard_core::ingest::{split_corpus, synthesize_corpus};
use webguard_core::SplitSpec;

fn small() -> RunConfig {
    RunConfig {
        seq_len: 16,
        epochs: 2,
        encoder_widths: vec![8, 4],
        seed: 11,
        ..RunConfig::default()
    }
}

#[test]
fn train_scores_match_rescoring_the_training_split() {
    let corpus = synthesize_corpus(30, 5, 1);
    let cfg = small();
    let run = train_pipeline(&cfg, &corpus, |_| {}).unwrap();
    let (train, _) = split_corpus(
        &corpus,
        &SplitSpec {
            train_fraction: cfg.train_fraction,
            seed: cfg.seed,
        },
    )
    .unwrap();
    let reqs: Vec<_> = train.requests().collect();
    let again = run.artifact.score_all(&reqs, 2).unwrap();
    assert_eq!(again.len(), run.train_scores.len());
    for (a, b) in again.iter().zip(&run.train_scores) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn saved_artifact_scores_identically() {
    let corpus = synthesize_corpus(25, 10, 2);
    let run = train_pipeline(&small(), &corpus, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.artifact.save(dir.path()).unwrap();
    let loaded = PipelineArtifact::load(dir.path()).unwrap();
    assert_eq!(loaded.config, run.artifact.config);
    assert_eq!(loaded.threshold, run.artifact.threshold);
    let reqs: Vec<_> = corpus.requests().collect();
    assert_eq!(
        run.artifact.score_all(&reqs, 1).unwrap(),
        loaded.score_all(&reqs, 4).unwrap()
    );
}

#[test]
fn manifest_edits_are_detected() {
    let corpus = synthesize_corpus(20, 0, 3);
    let run = train_pipeline(&small(), &corpus, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.artifact.save(dir.path()).unwrap();
    let path = dir.path().join("threshold");
    std::fs::write(&path, "123.0\n").unwrap();
    let err = PipelineArtifact::load(dir.path()).unwrap_err();
    assert_eq!(exit_code(&err), 4);
}

#[test]
fn config_text_parsing() {
    let mut cfg = RunConfig::default();
    cfg.apply_text("# comment\n\nseq_len=30\nthreshold = valley\ntrain_mode=staged\ninclude_headers = yes\n")
        .unwrap();
    assert_eq!(cfg.seq_len, 30);
    assert_eq!(cfg.threshold.to_string(), "valley");
    assert!(cfg.include_headers);
    assert!(cfg.apply_text("no_such_key=1").is_err());
    assert!(cfg.apply_text("seq_len").is_err());
    assert!(cfg.apply_text("epochs=many").is_err());
}

#[test]
fn too_few_normals_is_a_data_error() {
    let corpus = synthesize_corpus(1, 3, 4);
    let err = train_pipeline(&small(), &corpus, |_| {}).unwrap_err();
    assert_eq!(exit_code(&err), 3);
}

#[test]
fn thresholds_survive_the_manifest_roundtrip() {
    // values whose shortest decimal form needs all 17 digits
    for v in [0.1 + 0.2, 1.0 / 3.0, 0.34721352589613735, f64::MIN_POSITIVE * 3.7] {
        let json = serde_json::to_string(&v).unwrap();
        let back: f64 = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_bits(), v.to_bits(), "{json}");
    }
}
