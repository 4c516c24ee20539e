//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every check prints exactly one PASS/FAIL line.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use branchsim::cost::Verdict;
use branchsim::equivalence::Roi;
use branchsim::probe::fold_frames;
use branchsim::sim::{initial_dirty, step_incremental_counted};
use branchsim::{
    branch_advice, branching_no_gain, digest_state, extract_frame, frame_deltas, init_state, partition_classes,
    sample_point, step_full, Cells, Engine, Error, History, Manifest, NodeId, ObservationSpec, ParamOverrides,
    ParamSet, ProbeQuery, RunRequest, SimulatorSpec, Store,
};
use common::*;

fn vessel_spec(n: usize) -> SimulatorSpec {
    SimulatorSpec::vesselgrid(n, n, 1.0).unwrap()
}

fn run(engine: &Engine, node: NodeId, until_step: u64) {
    engine.run(RunRequest { node, until_step, incremental: true }).unwrap();
}

struct ReuseTree {
    engine: Engine,
    spec: SimulatorSpec,
    base: ParamSet,
    seeds: std::collections::BTreeMap<usize, f64>,
    leaves: Vec<NodeId>,
}

fn reuse_tree() -> ReuseTree {
    let spec = vessel_spec(64);
    let base = vessel(0.5, 0.3, 0.0, block(&spec, 30, 30, 3), 1.0);
    let seeds = seeds(&[(5 * 64 + 5, 2.0), (40 * 64 + 12, -1.5), (63 * 64 + 63, 0.75)]);
    let engine = Engine::in_memory(10);
    let root = engine.create_root(&spec, base.clone(), &init_state(&spec, &seeds).unwrap()).unwrap();
    run(&engine, root, 120);
    let variants = [
        overrides_diffusion(1.2),
        ParamOverrides { vx: Some(-0.6), vy: Some(0.2), ..Default::default() },
        ParamOverrides { source_amp: Some(3.0), ..Default::default() },
        ParamOverrides::default(),
    ];
    let leaves = variants.into_iter().map(|o| engine.branch_at(root, 120, o).unwrap().id()).collect();
    let outcome = engine.run_tree(200, 2).unwrap();
    assert!(outcome.failed.is_empty(), "{:?}", outcome.failed);
    ReuseTree { engine, spec, base, seeds, leaves }
}

fn branch_reuse_is_bit_exact() {
    let t = reuse_tree();
    for &leaf in &t.leaves {
        let params = t.engine.node(leaf).unwrap().effective_params;
        let expected = linear_digest(&t.spec, &t.seeds, &[(t.base.clone(), 120), (params, 200)]);
        assert_eq!(t.engine.digest_at(leaf, 200).unwrap(), expected, "leaf {leaf}");
    }
}

fn savings_match_prefix_sharing() {
    let t = reuse_tree();
    let r = t.engine.savings_report().unwrap();
    let (prefix, horizon, leaves) = (120u64, 200u64, t.leaves.len() as u64);
    assert_eq!(r.steps_linear, leaves * horizon);
    assert_eq!(r.steps_branching, prefix + leaves * (horizon - prefix));
    assert_eq!((r.steps_linear, r.steps_branching), (800, 440));
    assert_eq!(r.ratio, 440.0 / 800.0);
    assert_eq!(r.ratio, 0.55);
}

fn replay_is_bounded_by_interval() {
    let spec = vessel_spec(32);
    let base = vessel(0.4, 0.0, 0.2, block(&spec, 10, 10, 3), 0.5);
    let seeds = seeds(&[(100, 1.0)]);
    let engine = Engine::in_memory(10);
    let start = init_state(&spec, &seeds).unwrap();
    let root = engine.create_root(&spec, base.clone(), &start).unwrap();
    run(&engine, root, 100);
    let live = linear_run(&spec, &start, &[(base, 100)]);

    let child = engine.branch_at(root, 57, overrides_diffusion(0.9)).unwrap().id();
    let s = engine.materialize_branch_start(child).unwrap();
    assert_eq!(digest_state(&spec, &s), digest_state(&spec, &live[57]));
    assert_eq!(engine.ledger().get(child).unwrap().replay, 7);

    for step in 40..=99u64 {
        let child = engine.branch_at(root, step, overrides_diffusion(0.5 + step as f64 / 1000.0)).unwrap().id();
        engine.materialize_branch_start(child).unwrap();
        let replay = engine.ledger().get(child).unwrap().replay;
        assert_eq!(replay, step % 10);
        assert!(replay < engine.checkpoint_interval());
    }
}

fn incremental_matches_full() {
    let spec = vessel_spec(64);
    let params = vessel(0.5, 0.2, -0.1, block(&spec, 30, 30, 3), 1.0);
    let mut full = init_state(&spec, &Default::default()).unwrap();
    let mut inc = full.clone();
    let mut dirty = initial_dirty(&params, &inc);
    let mut recomputed_first_20 = 0;
    for step in 0..100 {
        full = step_full(&spec, &params, &full).unwrap();
        let (next, d, recomputed) = step_incremental_counted(&spec, &params, &inc, &dirty).unwrap();
        inc = next;
        dirty = d;
        assert_eq!(inc.cells.to_bytes(), full.cells.to_bytes(), "step {}", step + 1);
        if step < 20 {
            recomputed_first_20 += recomputed;
        }
    }
    assert!(recomputed_first_20 < spec.cell_count() * 20, "{recomputed_first_20}");
}

fn saturated_suffix_is_memoized() {
    let spec = SimulatorSpec::maxca(16, 16).unwrap();
    let engine = Engine::in_memory(10);
    let a = engine.create_root(&spec, ParamSet::Maxca, &init_state(&spec, &seeds(&[(0, 255.0)])).unwrap()).unwrap();
    let b = engine
        .create_root(&spec, ParamSet::Maxca, &init_state(&spec, &seeds(&[(7 * 16 + 9, 255.0)])).unwrap())
        .unwrap();
    let bound = 2 * (16 - 1);
    run(&engine, a, bound);
    run(&engine, b, bound);
    for id in [a, b] {
        let s = engine.state_at(id, bound).unwrap();
        assert_eq!(s.cells, Cells::Byte(vec![255; 256]), "node {id} saturated");
    }
    assert_ne!(engine.digest_at(a, 0).unwrap(), engine.digest_at(b, 0).unwrap());

    let fresh_before = engine.ledger().get(b).unwrap().fresh;
    run(&engine, a, 60);
    run(&engine, b, 60);
    let cost = engine.ledger().get(b).unwrap();
    assert_eq!(cost.fresh - fresh_before, 0);
    assert_eq!(cost.reused, 60 - bound);
    assert_eq!(engine.node(b).unwrap().donor, Some(a));
    for t in bound..=60 {
        assert_eq!(engine.digest_at(b, t).unwrap(), engine.digest_at(a, t).unwrap(), "step {t}");
    }
}

fn class_predicates_agree() {
    for p in 1..=3 {
        for s in 1..=3 {
            let no_gain = p == 1 && s == 1;
            let expected = if s >= 2 {
                Verdict::BranchSavesTimeCaseA
            } else if p >= 2 {
                Verdict::BranchSavesTimeCaseB
            } else {
                Verdict::NoGain
            };
            assert_eq!(branching_no_gain(p, s).unwrap(), no_gain, "({p}, {s})");
            assert_eq!(branch_advice(p, s).unwrap().verdict, expected, "({p}, {s})");
        }
    }

    let spec = vessel_spec(32);
    let engine = Engine::in_memory(10);
    let seeded = init_state(&spec, &seeds(&[(16 * 32 + 16, 4.0)])).unwrap();
    let root = |params: ParamSet, start: &branchsim::FieldState, until| {
        let id = engine.create_root(&spec, params, start).unwrap();
        run(&engine, id, until);
        id
    };
    let dup_a = root(vessel(0.5, 0.0, 0.0, [], 0.0), &seeded, 20);
    let dup_b = root(vessel(0.5, 0.0, 0.0, [], 0.0), &seeded, 20);
    let diff_b = root(vessel(1.0, 0.0, 0.0, [], 0.0), &seeded, 20);
    let zero = init_state(&spec, &Default::default()).unwrap();
    let far = block(&spec, 26, 26, 3);
    let shield_a = root(vessel(0.5, 0.0, 0.0, far.clone(), 1.0), &zero, 10);
    let shield_b = root(vessel(0.5, 0.0, 0.0, far, 2.0), &zero, 10);

    let full = ObservationSpec::full_state();
    let roi = ObservationSpec::region(Roi { x: 0, y: 0, width: 8, height: 8 });
    let count = |nodes: &[NodeId], interval, obs| partition_classes(&engine, nodes, interval, obs).unwrap().len();
    assert_eq!(count(&[dup_a, dup_b], (0, 20), &full), 1);
    assert_eq!(count(&[dup_a, diff_b], (0, 20), &full), 2);
    assert_eq!(count(&[dup_a, dup_b, diff_b], (0, 20), &full), 2);
    assert_eq!(count(&[shield_a, shield_b], (0, 10), &roi), 1);
    assert_eq!(count(&[shield_a, shield_b], (0, 10), &full), 2);
}

fn probes_and_deltas_are_sound() {
    let spec = vessel_spec(32);
    let base = vessel(0.6, 0.25, 0.1, block(&spec, 5, 20, 3), 1.5);
    let engine = Engine::in_memory(10);
    let seeds = seeds(&[(3 * 32 + 29, 5.0), (17 * 32 + 8, -2.0)]);
    let root = engine.create_root(&spec, base, &init_state(&spec, &seeds).unwrap()).unwrap();
    run(&engine, root, 60);
    let child = engine.branch_at(root, 30, ParamOverrides { vx: Some(-0.3), ..Default::default() }).unwrap().id();
    engine.run_tree(150, 1).unwrap();

    for (node, from) in [(root, 0), (child, 0), (child, 50), (child, 100)] {
        let deltas = frame_deltas(&engine, node, from, from + 50).unwrap();
        let folded = fold_frames(extract_frame(&engine, node, from).unwrap(), &deltas);
        assert_eq!(folded.len(), 51);
        for f in folded {
            let direct = extract_frame(&engine, node, f.step).unwrap();
            assert_eq!(f.cells.to_bytes(), direct.cells.to_bytes(), "node {node} step {}", f.step);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let max = (spec.width - 1) as f64;
    for _ in 0..1000 {
        let (x, y) = (rng.gen_range(0.0..max), rng.gen_range(0.0..max));
        let step = rng.gen_range(0..=150);
        let v = sample_point(&engine, &ProbeQuery { node: child, x, y, step }).unwrap();
        let cells = engine.state_at(child, step).unwrap().cells;
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let corners =
            [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)].map(|(cx, cy)| cells.value(cy * spec.width + cx));
        let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= v && v <= hi, "({x}, {y}) at {step}: {v} outside [{lo}, {hi}]");
    }

    let uniform = Engine::in_memory(10);
    let fill = (0..spec.cell_count()).map(|i| (i, 0.37)).collect();
    let u = uniform.create_root(&spec, vessel(0.5, 0.0, 0.0, [], 0.0), &init_state(&spec, &fill).unwrap()).unwrap();
    let maxca = SimulatorSpec::maxca(16, 16).unwrap();
    let bytes = Engine::in_memory(10);
    let fill = (0..maxca.cell_count()).map(|i| (i, 77.0)).collect();
    let m = bytes.create_root(&maxca, ParamSet::Maxca, &init_state(&maxca, &fill).unwrap()).unwrap();
    run(&bytes, m, 10);
    for _ in 0..200 {
        let (x, y) = (rng.gen_range(0.0..=max), rng.gen_range(0.0..=max));
        assert_eq!(sample_point(&uniform, &ProbeQuery { node: u, x, y, step: 0 }).unwrap(), 0.37);
        let (x, y) = (rng.gen_range(0.0..=15.0), rng.gen_range(0.0..=15.0));
        assert_eq!(sample_point(&bytes, &ProbeQuery { node: m, x, y, step: 10 }).unwrap(), 77.0);
    }
}

fn concurrent_run(workers: usize) -> (String, String, String, Vec<(NodeId, String)>) {
    let spec = vessel_spec(32);
    let base = vessel(0.5, 0.2, 0.0, block(&spec, 12, 12, 3), 1.0);
    let engine = Engine::in_memory(10);
    let root = engine.create_root(&spec, base, &init_state(&spec, &seeds(&[(40, 3.0)])).unwrap()).unwrap();
    run(&engine, root, 40);
    let mut ids = Vec::new();
    for o in [
        overrides_diffusion(1.0),
        overrides_diffusion(0.5),
        ParamOverrides::default(),
        ParamOverrides { vy: Some(0.4), ..Default::default() },
        ParamOverrides { source_amp: Some(0.0), ..Default::default() },
    ] {
        ids.push(engine.branch_at(root, 40, o).unwrap().id());
    }
    ids.push(engine.branch_at(root, 25, overrides_diffusion(2.0)).unwrap().id());
    let outcome = engine.run_tree(120, workers).unwrap();
    assert!(outcome.failed.is_empty());
    let digests = ids.iter().map(|&id| (id, engine.digest_at(id, 120).unwrap().to_hex())).collect();
    (
        serde_json::to_string(&engine.trees()).unwrap(),
        serde_json::to_string(&engine.store().manifest()).unwrap(),
        serde_json::to_string(&engine.ledger()).unwrap(),
        digests,
    )
}

fn worker_count_is_invisible() {
    let one = concurrent_run(1);
    let four = concurrent_run(4);
    assert_eq!(one, four);
}

fn store_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store");
    let spec = vessel_spec(24);
    let base = vessel(0.7, -0.2, 0.3, block(&spec, 2, 2, 3), 2.0);
    let start = init_state(&spec, &seeds(&[(300, 1.25)])).unwrap();
    let (root, child) = {
        let engine = Engine::new(Store::create(&path, Manifest::new(None)).unwrap(), 10);
        let root = engine.create_root(&spec, base.clone(), &start).unwrap();
        run(&engine, root, 75);
        let child = engine.branch_at(root, 33, overrides_diffusion(0.2)).unwrap().id();
        engine.run_tree(75, 2).unwrap();
        engine.save().unwrap();
        (root, child)
    };

    let engine = Engine::load(Store::open(&path).unwrap()).unwrap();
    let root_ref = linear_run(&spec, &start, &[(base.clone(), 75)]);
    let child_params = base_with(&base, 0.2);
    let child_ref = linear_run(&spec, &start, &[(base, 33), (child_params, 75)]);
    for step in 0..=75u64 {
        let s = step as usize;
        assert_eq!(engine.state_at(root, step).unwrap().cells.to_bytes(), root_ref[s].cells.to_bytes());
        assert_eq!(engine.state_at(child, step).unwrap().cells.to_bytes(), child_ref[s].cells.to_bytes());
    }

    let seg = path.join("segments").join(format!("{root}.seg"));
    let mut bytes = std::fs::read(&seg).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&seg, bytes).unwrap();
    assert!(matches!(Store::open(&path), Err(Error::CorruptStore(_))));
}

fn base_with(base: &ParamSet, diffusion: f64) -> ParamSet {
    overrides_diffusion(diffusion).apply(base).unwrap()
}

fn main() -> ExitCode {
    let checks: [(&str, fn()); 9] = [
        ("branch leaves are bit-identical to from-scratch runs", branch_reuse_is_bit_exact),
        ("savings ledger matches prefix-sharing arithmetic (800/440/0.55)", savings_match_prefix_sharing),
        ("branch start replay is bounded by the checkpoint interval", replay_is_bounded_by_interval),
        ("incremental stepping equals full stepping", incremental_matches_full),
        ("saturated maxca suffix is served from the memo", saturated_suffix_is_memoized),
        ("class-count predicates and partitions", class_predicates_agree),
        ("frame deltas and bilinear probes", probes_and_deltas_are_sound),
        ("run_tree is independent of worker count", worker_count_is_invisible),
        ("store survives close and reopen; bad magic rejected", store_round_trips),
    ];
    std::panic::set_hook(Box::new(|info| eprintln!("    {info}")));
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let ok = catch_unwind(AssertUnwindSafe(check)).is_ok();
        failed += usize::from(!ok);
        println!("[{}/{}] {} {name}", i + 1, checks.len(), if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
