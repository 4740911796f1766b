use vcc_core::experiment::ExperimentConfig;
use vcc_core::Error;

#[test]
fn partial_sections_keep_the_other_defaults() {
    let cfg = ExperimentConfig::from_json(r#"{"corpus": {"seed": 3}, "average": {"steps": 7}}"#).unwrap();
    let d = ExperimentConfig::default();
    assert_eq!(cfg.corpus.seed, 3);
    assert_eq!(cfg.corpus.n_targets, d.corpus.n_targets);
    assert_eq!(cfg.average.steps, 7);
    assert_eq!(cfg.average.learning_rate, d.average.learning_rate);
    assert_eq!(cfg.embedder, d.embedder);
    assert_eq!(ExperimentConfig::from_json("{}").unwrap(), d);
}

#[test]
fn unknown_keys_are_rejected() {
    for doc in [r#"{"sed": 1}"#, r#"{"corpus": {"speakers": 4}}"#, "[1]", "{"] {
        assert!(matches!(ExperimentConfig::from_json(doc), Err(Error::Parse(_))), "{doc}");
    }
}
