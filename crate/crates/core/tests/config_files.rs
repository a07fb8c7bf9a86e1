use std::fs;

use gem_core::config::ConfigError;
use gem_core::engine::EngineEvent;
use gem_core::{Beta, Engine, EngineConfig, Fact, FactBundle, Outcome};

#[test]
fn loads_params_policies_and_rules_relative_to_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("gem.toml"),
        "topic_threshold = 0.4\nbeta = { base = 10, slope = 0.5 }\npolicy_files = [\"strict.gem\"]\nrule_file = \"deps.rules\"\n\n[salience]\ndecay = 0.8\n",
    )
    .unwrap();
    fs::write(
        dir.join("strict.gem"),
        "POLICY small-store\n  ON pre_commit\n  WHEN active_footprint > 1\n  DO reject_transition(\"store full\")\n",
    )
    .unwrap();
    fs::write(dir.join("deps.rules"), "*.Deadline -> *.Launch : shift-annotation\n").unwrap();

    let cfg = EngineConfig::load(&dir.join("gem.toml")).unwrap();
    assert_eq!(cfg.params.topic_threshold, 0.4);
    assert_eq!(cfg.params.salience.decay, 0.8);
    assert_eq!(cfg.params.beta, Beta::Affine { base: 10, slope: 0.5 });
    assert_eq!(cfg.params.beta.at(4), 12);
    let settings = cfg.settings().unwrap();
    assert_eq!(settings.policies().unwrap().len(), 1);
    assert_eq!(settings.rules().unwrap().rules.len(), 1);

    let mut e = Engine::new(settings).unwrap();
    let ok = e.submit(EngineEvent::Ingest(FactBundle::new("Vault | Owner: Bo", vec![Fact::new("Owner", "Bo")])));
    assert_eq!(ok.outcome, Outcome::Committed);
    let bad = e.submit(EngineEvent::Ingest(FactBundle::new("Vault | Secret: hunter2", vec![Fact::new("Secret", "x")])));
    assert!(matches!(bad.outcome, Outcome::Aborted { ref reason } if reason == "store full"), "{:?}", bad.outcome);
    assert!(e.state().field(&gem_core::UnitKey::new("Vault", "Secret")).is_none());
    // the aborted attempt is journaled but leaves the state alone
    let last = e.journal().entries.last().unwrap();
    assert!(!last.record.outcome.is_committed());
    assert_eq!(last.digest_after, e.state().digest());
}

#[test]
fn rejects_invalid_salience_and_bad_policy_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("a.toml"), "[salience]\ndecay = 1.5\n").unwrap();
    assert!(matches!(EngineConfig::load(&dir.join("a.toml")), Err(ConfigError::Invalid(_))));

    fs::write(dir.join("b.toml"), "policy_files = [\"bad.gem\"]\n").unwrap();
    fs::write(dir.join("bad.gem"), "POLICY p\n  ON tock\n  WHEN EXISTS updated_field\n  DO noop\n").unwrap();
    let err = EngineConfig::load(&dir.join("b.toml")).unwrap().settings().unwrap_err();
    match err {
        ConfigError::Policy { source, .. } => assert_eq!(source.position(), Some((2, 6))),
        other => panic!("unexpected {other}"),
    }

    fs::write(dir.join("c.toml"), "beta = 0\n").unwrap();
    assert!(EngineConfig::load(&dir.join("c.toml")).is_err());
    assert!(matches!(EngineConfig::load(&dir.join("missing.toml")), Err(ConfigError::Io { .. })));
}
