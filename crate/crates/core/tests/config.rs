use dexprint_core::cluster::KneeRule;
use dexprint_core::config::RunConfig;
use dexprint_core::Error;

#[test]
fn defaults_round_trip_through_json() {
    let cfg = RunConfig::default();
    let back = RunConfig::from_json(&cfg.to_json()).unwrap();
    assert_eq!(cfg, back);
}

#[test]
fn partial_json_fills_defaults() {
    let cfg = RunConfig::from_json(r#"{"seed": 9, "detect": {"epochs": 4}}"#).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.detect.epochs, 4);
    assert_eq!(cfg.detect.phi, 3);
    assert_eq!(cfg.detect.fragment_len, 256);
    assert_eq!(cfg.cluster.knee, KneeRule::Chord);
}

#[test]
fn desk_defaults() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.corpus.malware + cfg.corpus.benign, 2000);
    assert_eq!(cfg.corpus.families, 10);
    assert_eq!(cfg.build_ratio, 0.5);
    assert_eq!(cfg.detect.phi, 3);
    assert_eq!(cfg.detect.epochs, 20);
    assert_eq!(cfg.detect.learning_rate, 3e-4);
    assert_eq!(cfg.detect.hidden, [512, 256]);
    assert_eq!(cfg.featurize.n, 4);
    assert_eq!(cfg.cluster.min_pts, 5);
}

#[test]
fn unknown_fields_are_rejected() {
    assert!(matches!(
        RunConfig::from_json(r#"{"sede": 1}"#),
        Err(Error::Json(_))
    ));
    assert!(RunConfig::from_json(r#"{"detect": {"phy": 3}}"#).is_err());
}

#[test]
fn validation_catches_bad_values() {
    for text in [
        r#"{"build_ratio": 1.0}"#,
        r#"{"build_ratio": 0.0}"#,
        r#"{"detect": {"phi": 0}}"#,
        r#"{"detect": {"phi": 5, "epochs": 2, "runs": 2}}"#,
        r#"{"detect": {"target_error": 0.0}}"#,
        r#"{"featurize": {"n": 0}}"#,
        r#"{"featurize": {"dim": 0}}"#,
        r#"{"cluster": {"min_pts": 0}}"#,
        r#"{"cluster": {"eps": -1.0}}"#,
    ] {
        assert!(
            matches!(RunConfig::from_json(text), Err(Error::InvalidArgument(_))),
            "{text}"
        );
    }
    assert!(RunConfig::from_json(r#"{"detect": {"phi": 4, "epochs": 2, "runs": 2}}"#).is_ok());
}

#[test]
fn stage_seeds_are_distinct_and_follow_the_root() {
    let a = RunConfig::default();
    let b = RunConfig {
        seed: 2,
        ..RunConfig::default()
    };
    assert_ne!(a.stage_seed("corpus"), a.stage_seed("split"));
    assert_ne!(a.stage_seed("corpus"), b.stage_seed("corpus"));
    assert_eq!(a.inst2vec().seed, a.stage_seed("inst2vec"));
    assert_eq!(a.train("detect").seed, a.stage_seed("detect"));
    assert_eq!(a.hash(100).dim, 100);
    let fixed = RunConfig::from_json(r#"{"featurize": {"dim": 4096}}"#).unwrap();
    assert_eq!(fixed.hash(100).dim, 4096);
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    let cfg = RunConfig {
        seed: 42,
        ..RunConfig::default()
    };
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    assert!(matches!(
        RunConfig::load(&dir.path().join("missing.json")),
        Err(Error::MissingInput(_))
    ));
}
