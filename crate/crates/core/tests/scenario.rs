use branchsim::cost::Verdict;
use branchsim::scenario::{predict, report};
use branchsim::{Engine, Error, NodeStatus, ScenarioConfig};

const DEMO: &str = include_str!("../../../demo/four_branches.json");

#[test]
fn demo_prediction_saves_forty_five_percent() {
    let cfg = ScenarioConfig::from_json(DEMO).unwrap();
    let engine = Engine::in_memory(cfg.checkpoint_interval);
    let out = predict(&engine, &cfg).unwrap();
    assert_eq!(out.branches.len(), 4);
    assert!(out.run.failed.is_empty());
    for &b in &out.branches {
        assert_eq!(engine.node(b).unwrap().status, NodeStatus::Complete);
        assert_eq!(engine.node(b).unwrap().annotations.len(), 1);
    }

    let r = report(&engine, &cfg.observation).unwrap();
    assert_eq!((r.savings.steps_linear, r.savings.steps_branching, r.savings.ratio), (800, 440, 0.55));
    assert!(r.violations.is_empty());
    assert_eq!(r.equivalence.len(), 1);
    let split = &r.equivalence[0];
    assert_eq!(split.branch_step, 120);
    assert_eq!(split.prefix_classes.len(), 1);
    assert!(split.suffix_classes.len() >= 2);
    assert_eq!(split.advice.verdict, Verdict::BranchSavesTimeCaseA);
}

#[test]
fn config_errors_are_reported() {
    let broken = DEMO.replacen("\"horizon\": 200,", "\"horizon\": 200", 1);
    match ScenarioConfig::from_json(&broken) {
        Err(Error::Config(msg)) => assert!(msg.contains("line"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let unstable = DEMO.replacen("\"diffusion\": 1.2", "\"diffusion\": 40.0", 1);
    assert!(matches!(ScenarioConfig::from_json(&unstable), Err(Error::UnstableParams(_))));
    let late = DEMO.replacen(
        "\"at_step\": 120,\n      \"overrides\": { \"diffusion\"",
        "\"at_step\": 201,\n      \"overrides\": { \"diffusion\"",
        1,
    );
    assert!(matches!(ScenarioConfig::from_json(&late), Err(Error::Config(_))));
    let unknown = DEMO.replacen("\"horizon\"", "\"horizn\": 1, \"horizon\"", 1);
    assert!(ScenarioConfig::from_json(&unknown).is_err());
}
